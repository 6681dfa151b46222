//! Procedural nodule phantoms: smooth parenchyma plus one centred blob.
//!
//! Benign blobs are small compact spheres with a sharp rim; malignant blobs
//! are larger, fill more of their annotated extent and have a lobulated, soft
//! boundary.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_manifest, ManifestEntry, Split, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::labels::ClassLabel;
use crate::patch_pipeline::{
    extract_patch, normalize_hu, patch_center, NoiseParams, PatchSample, PipelineConfig, Shape3,
};
use crate::seed::{derive_seed, rng_for};
use crate::volume_io::{write_annotations, NoduleAnnotation, Volume, save_volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub shape: Shape3,
    pub spacing: [f64; 3],
    pub hu_window: (f32, f32),
    pub benign_diameter_mm: (f64, f64),
    pub malignant_diameter_mm: (f64, f64),
    /// Blob radius as a fraction of the annotated radius.
    pub benign_fill: (f64, f64),
    pub malignant_fill: (f64, f64),
    pub parenchyma_hu: f64,
    pub nodule_hu: f64,
    pub noise_hu: f64,
    pub noise: NoiseParams,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            shape: [32, 32, 16],
            spacing: [1.0, 1.0, 2.0],
            hu_window: (-1000.0, 400.0),
            benign_diameter_mm: (6.0, 11.0),
            malignant_diameter_mm: (8.0, 14.0),
            benign_fill: (0.5, 0.72),
            malignant_fill: (0.68, 0.9),
            parenchyma_hu: -850.0,
            nodule_hu: 30.0,
            noise_hu: 10.0,
            noise: NoiseParams::default(),
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            self.benign_diameter_mm,
            self.malignant_diameter_mm,
            self.benign_fill,
            self.malignant_fill,
        ];
        if ranges.iter().any(|(a, b)| !(a.is_finite() && b.is_finite() && *a > 0.0 && a <= b)) {
            return Err(Error::Config("phantom ranges must be positive with low ≤ high".into()));
        }
        if self.shape.contains(&0) || self.spacing.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("phantom shape and spacing must be positive".into()));
        }
        self.noise.validate()
    }

    pub fn diameter_range(&self, label: ClassLabel) -> (f64, f64) {
        match label {
            ClassLabel::Benign => self.benign_diameter_mm,
            ClassLabel::Malignant => self.malignant_diameter_mm,
        }
    }
}

/// Parameters of one rendered nodule and its surroundings.
#[derive(Clone, Debug)]
pub struct NoduleSpec {
    pub label: ClassLabel,
    pub diameter_mm: f64,
    fill: f64,
    lobulation: f64,
    phases: [f64; 3],
    edge_mm: f64,
    waves: Vec<([f64; 3], f64, f64)>,
}

impl NoduleSpec {
    pub fn sample(label: ClassLabel, cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Self {
        let (lo, hi) = cfg.diameter_range(label);
        let diameter_mm = rng.random_range(lo..=hi);
        let (fill, lobulation, edge_mm) = match label {
            ClassLabel::Benign => (
                rng.random_range(cfg.benign_fill.0..=cfg.benign_fill.1),
                rng.random_range(0.0..0.05),
                0.25,
            ),
            ClassLabel::Malignant => (
                rng.random_range(cfg.malignant_fill.0..=cfg.malignant_fill.1),
                rng.random_range(0.08..0.2),
                rng.random_range(0.6..1.2),
            ),
        };
        let phases = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
        let waves = (0..3)
            .map(|_| {
                let wavelength = rng.random_range(18.0..40.0);
                let dir: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-6);
                let k = std::array::from_fn(|a| dir[a] / norm * 2.0 * PI / wavelength);
                (k, rng.random_range(0.0..2.0 * PI), rng.random_range(15.0..45.0))
            })
            .collect();
        NoduleSpec {
            label,
            diameter_mm,
            fill,
            lobulation,
            phases,
            edge_mm,
            waves,
        }
    }

    /// Radius of the blob surface along unit direction `u`.
    fn surface_radius(&self, u: [f64; 3]) -> f64 {
        let azimuth = u[1].atan2(u[0]);
        let polar = u[2].clamp(-1.0, 1.0).acos();
        let shape = 0.5 * (3.0 * azimuth + self.phases[0]).sin()
            + 0.3 * (2.0 * polar + self.phases[1]).cos()
            + 0.2 * (5.0 * azimuth + 2.0 * polar + self.phases[2]).sin();
        let r = 0.5 * self.diameter_mm * self.fill * (1.0 + self.lobulation * shape);
        r.min(0.5 * (self.diameter_mm - self.edge_mm))
    }

    /// Fraction of nodule tissue at offset `d` (mm) from the nodule centre.
    pub fn occupancy(&self, d: [f64; 3]) -> f64 {
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let u = if r > 1e-9 { [d[0] / r, d[1] / r, d[2] / r] } else { [0.0, 0.0, 1.0] };
        let surface = self.surface_radius(u);
        1.0 / (1.0 + ((r - surface) / (0.25 * self.edge_mm)).exp())
    }

    /// Noise-free HU at world position `p` with the nodule centred at `center`.
    pub fn hu(&self, p: [f64; 3], center: [f64; 3], cfg: &PhantomConfig) -> f64 {
        let bg = cfg.parenchyma_hu
            + self
                .waves
                .iter()
                .map(|(k, phase, amp)| amp * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos())
                .sum::<f64>();
        let occ = self.occupancy(std::array::from_fn(|a| p[a] - center[a]));
        bg + occ * (cfg.nodule_hu - bg)
    }
}

fn class_plan(n: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Vec<ClassLabel> {
    let n_mal = (n as f64 * ratio).round() as usize;
    let mut labels: Vec<ClassLabel> = (0..n)
        .map(|i| if i < n_mal { ClassLabel::Malignant } else { ClassLabel::Benign })
        .collect();
    labels.shuffle(rng);
    labels
}

/// Renders a normalised phantom patch for `spec` centred at the patch centre.
pub fn render_patch(spec: &NoduleSpec, cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Result<Array3<f32>> {
    let c = patch_center(cfg.shape);
    let center = [0.0; 3];
    let normal = Normal::new(0.0, cfg.noise_hu.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let hu = Array3::from_shape_fn((cfg.shape[0], cfg.shape[1], cfg.shape[2]), |(i, j, k)| {
        let p = [
            (i as f64 - c[0]) * cfg.spacing[0],
            (j as f64 - c[1]) * cfg.spacing[1],
            (k as f64 - c[2]) * cfg.spacing[2],
        ];
        (spec.hu(p, center, cfg) + normal.sample(rng)) as f32
    });
    normalize_hu(&hu, cfg.hu_window)
}

/// `n` phantom samples with exactly `round(n·ratio)` malignant ones.
pub fn phantom_dataset(n: usize, class_ratio: f64, seed: u64) -> Result<Vec<PatchSample>> {
    phantom_dataset_with(n, class_ratio, seed, &PhantomConfig::default())
}

pub fn phantom_dataset_with(n: usize, class_ratio: f64, seed: u64, cfg: &PhantomConfig) -> Result<Vec<PatchSample>> {
    if n == 0 {
        return Err(Error::Validation("phantom dataset needs n ≥ 1".into()));
    }
    if !(class_ratio > 0.0 && class_ratio < 1.0) {
        return Err(Error::Validation(format!("class ratio must lie in (0, 1), got {class_ratio}")));
    }
    cfg.validate()?;
    let labels = class_plan(n, class_ratio, &mut rng_for(seed, "phantom-classes", 0));
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut rng = rng_for(seed, "phantom-sample", i as u64);
            let spec = NoduleSpec::sample(label, cfg, &mut rng);
            let raw = render_patch(&spec, cfg, &mut rng)?;
            PatchSample::from_raw(
                raw,
                label,
                spec.diameter_mm,
                cfg.spacing,
                cfg.noise,
                derive_seed(seed, "phantom-noise", i as u64),
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureConfig {
    pub phantom: PhantomConfig,
    /// (benign, malignant) counts per split.
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
    pub volume_dims: Shape3,
    pub volume_spacing: [f64; 3],
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            phantom: PhantomConfig::default(),
            train: (192, 48),
            val: (24, 6),
            test: (24, 6),
            volume_dims: [36, 36, 18],
            volume_spacing: [0.9, 0.9, 1.8],
        }
    }
}

impl FixtureConfig {
    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            target_spacing: self.phantom.spacing,
            patch_shape: self.phantom.shape,
            hu_window: self.phantom.hu_window,
            noise: self.phantom.noise,
            seed: 0,
        }
    }
}

pub const FIXTURE_VOLUMES: &str = "volumes";
pub const FIXTURE_ANNOTATIONS: &str = "annotations.csv";
pub const FIXTURE_SPLITS: &str = "splits.csv";
pub const FIXTURE_PATCHES: &str = "patches";

/// Paths of a written fixture.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub root: PathBuf,
    pub volumes: PathBuf,
    pub annotations: PathBuf,
    pub splits: PathBuf,
    pub patches: PathBuf,
}

impl Fixture {
    pub fn at(root: &Path) -> Self {
        Fixture {
            root: root.to_path_buf(),
            volumes: root.join(FIXTURE_VOLUMES),
            annotations: root.join(FIXTURE_ANNOTATIONS),
            splits: root.join(FIXTURE_SPLITS),
            patches: root.join(FIXTURE_PATCHES),
        }
    }
}

/// Four reader scores whose strict-majority consensus equals `label`.
fn reader_scores(label: ClassLabel, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let high = match label {
        ClassLabel::Malignant => rng.random_range(3..=4),
        ClassLabel::Benign => rng.random_range(0..=2),
    };
    let mut scores: Vec<u8> = (0..4)
        .map(|i| if i < high { rng.random_range(4..=5) } else { rng.random_range(1..=3) })
        .collect();
    scores.shuffle(rng);
    scores
}

pub fn write_splits(path: &Path, splits: &[(String, Split)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::csv(path))?;
    w.write_record(["volume_id", "split"]).map_err(Error::csv(path))?;
    for (id, s) in splits {
        w.write_record([id.as_str(), &s.to_string()]).map_err(Error::csv(path))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_splits(path: &Path) -> Result<Vec<(String, Split)>> {
    let mut r = csv::Reader::from_path(path).map_err(Error::csv(path))?;
    let header: Vec<String> = r.headers().map_err(Error::csv(path))?.iter().map(str::to_string).collect();
    if header != ["volume_id", "split"] {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            msg: "header must be `volume_id,split`".into(),
        });
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(Error::csv(path))?;
            Ok((rec[0].trim().to_string(), rec[1].parse()?))
        })
        .collect()
}

/// Writes a complete phantom study: HU volumes, annotations, split table and
/// the extracted patch dataset.
pub fn make_phantom_fixture(out_dir: &Path, seed: u64, cfg: &FixtureConfig) -> Result<Fixture> {
    cfg.phantom.validate()?;
    let fx = Fixture::at(out_dir);
    std::fs::create_dir_all(&fx.volumes).map_err(Error::io(&fx.volumes))?;

    let mut plan = Vec::new();
    for (split, (b, m)) in [(Split::Train, cfg.train), (Split::Val, cfg.val), (Split::Test, cfg.test)] {
        let mut labels: Vec<ClassLabel> = std::iter::repeat_n(ClassLabel::Benign, b)
            .chain(std::iter::repeat_n(ClassLabel::Malignant, m))
            .collect();
        labels.shuffle(&mut rng_for(seed, "fixture-order", split as u64));
        plan.extend(labels.into_iter().map(|l| (split, l)));
    }
    if plan.is_empty() {
        return Err(Error::Config("fixture needs at least one nodule".into()));
    }

    let dims = cfg.volume_dims;
    let spacing = cfg.volume_spacing;
    let pipeline = cfg.pipeline();
    let mut annotations = Vec::with_capacity(plan.len());
    let mut splits = Vec::with_capacity(plan.len());
    for (i, &(split, label)) in plan.iter().enumerate() {
        let mut rng = rng_for(seed, "fixture-volume", i as u64);
        let id = format!("vol{i:04}");
        let origin: [f64; 3] = std::array::from_fn(|_| rng.random_range(-200.0..200.0));
        let extent: [f64; 3] = std::array::from_fn(|a| (dims[a] - 1) as f64 * spacing[a]);
        let center: [f64; 3] = std::array::from_fn(|a| origin[a] + extent[a] / 2.0 + rng.random_range(-1.0..1.0));
        // Extraction places the annotated centre at index dim/2, half a voxel past the
        // geometric patch centre where the mask sits; the blob follows the mask.
        let blob: [f64; 3] = std::array::from_fn(|a| center[a] - 0.5 * pipeline.target_spacing[a]);
        let spec = NoduleSpec::sample(label, &cfg.phantom, &mut rng);
        let normal = Normal::new(0.0, cfg.phantom.noise_hu.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let voxels = Array3::from_shape_fn((dims[0], dims[1], dims[2]), |(x, y, z)| {
            let p = [
                origin[0] + x as f64 * spacing[0],
                origin[1] + y as f64 * spacing[1],
                origin[2] + z as f64 * spacing[2],
            ];
            (spec.hu(p, blob, &cfg.phantom) + normal.sample(&mut rng)) as f32
        });
        let volume = Volume::new(voxels, spacing, origin)?;
        save_volume(&volume, &fx.volumes.join(format!("{id}.vol")))?;
        annotations.push(NoduleAnnotation {
            source_volume_id: id.clone(),
            center,
            diameter_mm: spec.diameter_mm,
            scores: reader_scores(label, &mut rng),
        });
        splits.push((id, split));
    }
    write_annotations(&fx.annotations, &annotations)?;
    write_splits(&fx.splits, &splits)?;
    extract_dataset(&fx.volumes, &annotations, &splits, &pipeline, &fx.patches)?;
    Ok(fx)
}

/// Extracts, normalises and writes one patch per annotation, labelled by
/// reader consensus.
pub fn extract_dataset(
    volumes_dir: &Path,
    annotations: &[NoduleAnnotation],
    splits: &[(String, Split)],
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let lookup: std::collections::HashMap<&str, Split> =
        splits.iter().map(|(id, s)| (id.as_str(), *s)).collect();
    let mut entries = Vec::with_capacity(annotations.len());
    for (i, ann) in annotations.iter().enumerate() {
        let split = *lookup.get(ann.source_volume_id.as_str()).ok_or_else(|| {
            Error::Validation(format!("no split assigned to volume `{}`", ann.source_volume_id))
        })?;
        let volume = crate::volume_io::load_volume(&volumes_dir.join(format!("{}.vol", ann.source_volume_id)))?;
        let hu = extract_patch(&volume, ann.center, config)?;
        let patch = Volume::new(normalize_hu(&hu, config.hu_window)?, config.target_spacing, [0.0; 3])?;
        let file = format!("patch{i:05}.vol");
        save_volume(&patch, &out_dir.join(&file))?;
        entries.push(ManifestEntry {
            patch_file: file,
            label: ann.label()?,
            diameter_mm: ann.diameter_mm,
            split,
            synthetic: false,
        });
    }
    write_manifest(&out_dir.join(MANIFEST_FILE), &entries)?;
    Ok(entries)
}

/// Deterministic stratified 80/10/10 split assignment for volumes without a split table.
pub fn default_splits(annotations: &[NoduleAnnotation], seed: u64) -> Result<Vec<(String, Split)>> {
    let mut out = Vec::new();
    for label in ClassLabel::ALL {
        let mut ids: Vec<String> = Vec::new();
        for a in annotations {
            if a.label()? == label && !ids.contains(&a.source_volume_id) {
                ids.push(a.source_volume_id.clone());
            }
        }
        ids.shuffle(&mut rng_for(seed, "default-splits", label.code() as u64));
        let n = ids.len();
        let n_val = n / 10;
        let n_test = n / 10;
        for (k, id) in ids.into_iter().enumerate() {
            let split = if k < n_val {
                Split::Val
            } else if k < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
            out.push((id, split));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PatchDataset;
    use crate::volume_io::parse_annotations;

    #[test]
    fn exact_class_split() {
        let s = phantom_dataset(10, 0.5, 3).unwrap();
        assert_eq!(s.iter().filter(|x| x.label == ClassLabel::Malignant).count(), 5);
        for x in &s {
            x.validate().unwrap();
            assert_eq!(x.shape(), [32, 32, 16]);
        }
        assert!(phantom_dataset(0, 0.5, 3).is_err());
        assert!(phantom_dataset(5, 1.0, 3).is_err());
    }

    #[test]
    fn phantom_is_deterministic() {
        assert_eq!(phantom_dataset(4, 0.25, 8).unwrap(), phantom_dataset(4, 0.25, 8).unwrap());
        assert_ne!(phantom_dataset(4, 0.25, 8).unwrap(), phantom_dataset(4, 0.25, 9).unwrap());
    }

    #[test]
    fn malignant_diameters_exceed_benign() {
        let s = phantom_dataset(100, 0.5, 21).unwrap();
        let mean = |l: ClassLabel| {
            let d: Vec<f64> = s.iter().filter(|x| x.label == l).map(|x| x.diameter_mm).collect();
            d.iter().sum::<f64>() / d.len() as f64
        };
        let margin = mean(ClassLabel::Malignant) - mean(ClassLabel::Benign);
        assert!(margin > 1.5, "margin {margin}");
    }

    /// Thresholded blob mass inside the mask is larger for malignant nodules.
    #[test]
    fn malignant_blobs_fill_more_of_the_mask() {
        let s = phantom_dataset(40, 0.5, 5).unwrap();
        let fill = |x: &PatchSample| {
            let inside: f64 = x.mask.iter().sum::<f32>() as f64;
            let blob = x.raw.iter().zip(&x.mask).filter(|(r, m)| **m == 1.0 && **r > -0.2).count();
            blob as f64 / inside.max(1.0)
        };
        let mean = |l: ClassLabel| {
            let v: Vec<f64> = s.iter().filter(|x| x.label == l).map(fill).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(ClassLabel::Malignant) > mean(ClassLabel::Benign) + 0.1);
    }

    #[test]
    fn blob_stays_inside_its_mask() {
        for x in phantom_dataset(30, 0.5, 2).unwrap() {
            let leaked = x.raw.iter().zip(&x.mask).filter(|(r, m)| **m == 0.0 && **r > 0.0).count();
            assert_eq!(leaked, 0);
        }
    }

    #[test]
    fn scores_agree_with_label() {
        let mut rng = rng_for(1, "t", 0);
        for _ in 0..200 {
            for l in ClassLabel::ALL {
                let s = reader_scores(l, &mut rng);
                assert_eq!(crate::volume_io::consensus_malignancy(&s).unwrap(), l);
            }
        }
    }

    #[test]
    fn small_fixture_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = FixtureConfig {
            train: (3, 2),
            val: (1, 1),
            test: (1, 1),
            ..FixtureConfig::default()
        };
        let fx = make_phantom_fixture(dir.path(), 4, &cfg).unwrap();
        let anns = parse_annotations(&fx.annotations).unwrap();
        assert_eq!(anns.len(), 9);
        let ds = PatchDataset::open(&fx.patches).unwrap();
        assert_eq!(ds.entries.len(), 9);
        let train = ds.load_split(Split::Train, NoiseParams::default(), 0).unwrap();
        assert_eq!(train.len(), 5);
        assert_eq!(train.iter().filter(|s| s.label == ClassLabel::Malignant).count(), 2);
        for s in &train {
            s.validate().unwrap();
        }
        let again = tempfile::tempdir().unwrap();
        make_phantom_fixture(again.path(), 4, &cfg).unwrap();
        for name in ["annotations.csv", "splits.csv", "patches/manifest.csv", "volumes/vol0003.vol", "patches/patch00004.vol"] {
            assert_eq!(
                std::fs::read(dir.path().join(name)).unwrap(),
                std::fs::read(again.path().join(name)).unwrap(),
                "{name}"
            );
        }
        let splits = read_splits(&fx.splits).unwrap();
        assert_eq!(splits.len(), 9);
        let defaults = default_splits(&anns, 1).unwrap();
        assert_eq!(defaults.len(), 9);
    }
}
