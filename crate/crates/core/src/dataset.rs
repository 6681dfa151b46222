//! On-disk patch datasets: a directory of `.vol` patches plus `manifest.csv`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::ClassLabel;
use crate::patch_pipeline::{NoiseParams, PatchSample};
use crate::seed::derive_seed;
use crate::volume_io::{load_volume, save_volume, Volume};

pub const MANIFEST_FILE: &str = "manifest.csv";
const REQUIRED: [&str; 4] = ["patch_file", "label", "diameter_mm", "split"];
const OPTIONAL: &str = "synthetic";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("split must be train, val or test, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub patch_file: String,
    pub label: ClassLabel,
    pub diameter_mm: f64,
    pub split: Split,
    pub synthetic: bool,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let with_flag = entries.iter().any(|e| e.synthetic);
    let mut w = csv::Writer::from_path(path).map_err(Error::csv(path))?;
    let mut header: Vec<&str> = REQUIRED.to_vec();
    if with_flag {
        header.push(OPTIONAL);
    }
    w.write_record(&header).map_err(Error::csv(path))?;
    for e in entries {
        let mut row = vec![
            e.patch_file.clone(),
            e.label.to_string(),
            e.diameter_mm.to_string(),
            e.split.to_string(),
        ];
        if with_flag {
            row.push(e.synthetic.to_string());
        }
        w.write_record(&row).map_err(Error::csv(path))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let bad = |msg: String| Error::Manifest {
        path: path.to_path_buf(),
        msg,
    };
    let mut r = csv::Reader::from_path(path).map_err(Error::csv(path))?;
    let header: Vec<String> = r
        .headers()
        .map_err(Error::csv(path))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let with_flag = header.len() == 5 && header[4] == OPTIONAL;
    if header[..header.len().min(4)] != REQUIRED || !(header.len() == 4 || with_flag) {
        return Err(bad(format!(
            "header must be `{}` with optional `{OPTIONAL}`, got `{}`",
            REQUIRED.join(","),
            header.join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(Error::csv(path))?;
        let row = |msg: String| bad(format!("row {}: {msg}", i + 1));
        let diameter_mm: f64 = rec[2]
            .trim()
            .parse()
            .map_err(|_| row(format!("diameter `{}` is not a number", &rec[2])))?;
        if !(diameter_mm.is_finite() && diameter_mm >= 0.0) {
            return Err(row(format!("diameter {diameter_mm} is invalid")));
        }
        out.push(ManifestEntry {
            patch_file: rec[0].trim().to_string(),
            label: rec[1].parse().map_err(|e: Error| row(e.to_string()))?,
            diameter_mm,
            split: rec[3].parse().map_err(|e: Error| row(e.to_string()))?,
            synthetic: with_flag
                && rec[4]
                    .trim()
                    .parse::<bool>()
                    .map_err(|_| row(format!("synthetic flag `{}`", &rec[4])))?,
        });
    }
    Ok(out)
}

/// A patch directory with its manifest.
#[derive(Clone, Debug)]
pub struct PatchDataset {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl PatchDataset {
    pub fn open(root: &Path) -> Result<Self> {
        let entries = read_manifest(&root.join(MANIFEST_FILE))?;
        Ok(PatchDataset {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &ManifestEntry)> {
        self.entries.iter().enumerate().filter(move |(_, e)| e.split == split)
    }

    pub fn load_patch(&self, entry: &ManifestEntry) -> Result<Volume> {
        load_volume(&self.root.join(&entry.patch_file))
    }

    /// Loads one entry as a masked sample; the noise stream is keyed by the
    /// entry's manifest index.
    pub fn load_sample(&self, index: usize, noise: NoiseParams, seed: u64) -> Result<PatchSample> {
        let entry = &self.entries[index];
        let vol = self.load_patch(entry)?;
        PatchSample::from_raw(
            vol.voxels().clone(),
            entry.label,
            entry.diameter_mm,
            vol.spacing(),
            noise,
            derive_seed(seed, "dataset-noise", index as u64),
        )
        .map_err(|e| Error::Validation(format!("{}: {e}", entry.patch_file)))
    }

    pub fn load_split(&self, split: Split, noise: NoiseParams, seed: u64) -> Result<Vec<PatchSample>> {
        self.split(split)
            .map(|(i, _)| self.load_sample(i, noise, seed))
            .collect()
    }
}

/// Writes normalised patches and a manifest into `dir`.
pub fn write_dataset(
    dir: &Path,
    patches: &[(Volume, ManifestEntry)],
) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut entries = Vec::with_capacity(patches.len());
    for (vol, entry) in patches {
        save_volume(vol, &dir.join(&entry.patch_file))?;
        entries.push(entry.clone());
    }
    write_manifest(&dir.join(MANIFEST_FILE), &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use tempfile::tempdir;

    fn entry(name: &str, label: ClassLabel, split: Split, synthetic: bool) -> ManifestEntry {
        ManifestEntry {
            patch_file: name.into(),
            label,
            diameter_mm: 6.5,
            split,
            synthetic,
        }
    }

    #[test]
    fn manifest_roundtrip_with_and_without_flag() {
        let dir = tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let plain = vec![
            entry("a.vol", ClassLabel::Benign, Split::Train, false),
            entry("b.vol", ClassLabel::Malignant, Split::Test, false),
        ];
        write_manifest(&path, &plain).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("patch_file,label,diameter_mm,split\n"));
        assert_eq!(read_manifest(&path).unwrap(), plain);
        let mut flagged = plain.clone();
        flagged.push(entry("s.vol", ClassLabel::Malignant, Split::Train, true));
        write_manifest(&path, &flagged).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), flagged);
    }

    #[test]
    fn bad_manifest_rows_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        std::fs::write(&path, "patch_file,label,diameter_mm,split\na.vol,benign,3,holdout\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Manifest { .. })));
        std::fs::write(&path, "patch_file,label,split\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Manifest { .. })));
        std::fs::write(&path, "patch_file,label,diameter_mm,split\na.vol,2,3,val\n").unwrap();
        assert_eq!(read_manifest(&path).unwrap()[0].label, ClassLabel::Malignant);
    }

    #[test]
    fn dataset_samples_are_reproducible() {
        let dir = tempdir().unwrap();
        let vol = Volume::new(Array3::from_elem((8, 8, 4), -0.5), [1.0, 1.0, 2.0], [0.0; 3]).unwrap();
        write_dataset(
            dir.path(),
            &[(vol, entry("p.vol", ClassLabel::Benign, Split::Val, false))],
        )
        .unwrap();
        let ds = PatchDataset::open(dir.path()).unwrap();
        let a = ds.load_split(Split::Val, NoiseParams::default(), 9).unwrap();
        let b = ds.load_split(Split::Val, NoiseParams::default(), 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1);
        assert!(a[0].mask.iter().any(|&m| m == 1.0));
        assert!(ds.load_split(Split::Train, NoiseParams::default(), 9).unwrap().is_empty());
    }
}
