//! Class-conditional 3D patch in-painting with local and global Wasserstein
//! critics, plus a malignancy classification harness.

pub mod attention;
pub mod cli;
pub mod critics;
pub mod dataset;
pub mod error;
pub mod gan_trainer;
pub mod inpaint_generator;
pub mod labels;
pub mod losses;
pub mod malignancy_classifier;
pub mod nn;
pub mod patch_pipeline;
pub mod phantom;
pub mod seed;
pub mod volume_io;

pub use error::{Error, Result};
pub use labels::{ClassLabel, DomainLabel};
