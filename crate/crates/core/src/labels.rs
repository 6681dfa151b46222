use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary malignancy class, also used as the synthesis target `c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Benign,
    Malignant,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 2] = [ClassLabel::Benign, ClassLabel::Malignant];

    /// Class code shared with the critics' auxiliary head: benign = 1, malignant = 2.
    pub fn code(self) -> u8 {
        match self {
            ClassLabel::Benign => 1,
            ClassLabel::Malignant => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(ClassLabel::Benign),
            2 => Ok(ClassLabel::Malignant),
            other => Err(Error::Validation(format!(
                "class label must be 1 (benign) or 2 (malignant), got {other}"
            ))),
        }
    }

    pub fn domain(self) -> DomainLabel {
        match self {
            ClassLabel::Benign => DomainLabel::Benign,
            ClassLabel::Malignant => DomainLabel::Malignant,
        }
    }

    /// Index into the classifier's two logits; malignant is the positive class.
    pub fn binary_index(self) -> usize {
        match self {
            ClassLabel::Benign => 0,
            ClassLabel::Malignant => 1,
        }
    }

    pub fn is_malignant(self) -> bool {
        self == ClassLabel::Malignant
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassLabel::Benign => "benign",
            ClassLabel::Malignant => "malignant",
        })
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "benign" | "1" => Ok(ClassLabel::Benign),
            "malignant" | "2" => Ok(ClassLabel::Malignant),
            other => Err(Error::Validation(format!("unknown class label `{other}`"))),
        }
    }
}

/// Three-way target of the critics' auxiliary classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DomainLabel {
    Fake = 0,
    Benign = 1,
    Malignant = 2,
}

impl DomainLabel {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(DomainLabel::Fake),
            1 => Ok(DomainLabel::Benign),
            2 => Ok(DomainLabel::Malignant),
            other => Err(Error::Validation(format!("domain label {other} outside 0..=2"))),
        }
    }
}
