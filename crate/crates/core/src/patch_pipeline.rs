//! Patch extraction, HU normalisation, spherical noise masks and label maps.

use ndarray::{Array3, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::ClassLabel;
use crate::seed::rng_for;
use crate::volume_io::Volume;

pub type Shape3 = [usize; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    pub low: f32,
    pub high: f32,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams { low: -1.0, high: 1.0 }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.low.is_finite() && self.high.is_finite() && self.low < self.high) {
            return Err(Error::Config(format!(
                "noise range must satisfy low < high, got ({}, {})",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub target_spacing: [f64; 3],
    pub patch_shape: Shape3,
    pub hu_window: (f32, f32),
    pub noise: NoiseParams,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            target_spacing: [1.0, 1.0, 2.0],
            patch_shape: [64, 64, 32],
            hu_window: (-1000.0, 400.0),
            noise: NoiseParams::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_shape.contains(&0) {
            return Err(Error::Config(format!("patch_shape must be positive, got {:?}", self.patch_shape)));
        }
        if self.target_spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config(format!(
                "target_spacing must be positive, got {:?}",
                self.target_spacing
            )));
        }
        check_window(self.hu_window)?;
        self.noise.validate()
    }
}

fn check_window((low, high): (f32, f32)) -> Result<()> {
    if !(low.is_finite() && high.is_finite() && low < high) {
        return Err(Error::Config(format!("HU window must satisfy low < high, got ({low}, {high})")));
    }
    Ok(())
}

/// Aligned training example: real patch, its noise-masked copy, the mask and class.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub raw: Array3<f32>,
    pub masked: Array3<f32>,
    pub mask: Array3<f32>,
    pub label: ClassLabel,
    pub diameter_mm: f64,
}

impl PatchSample {
    pub fn shape(&self) -> Shape3 {
        let (x, y, z) = self.raw.dim();
        [x, y, z]
    }

    pub fn validate(&self) -> Result<()> {
        if self.masked.dim() != self.raw.dim() || self.mask.dim() != self.raw.dim() {
            return Err(Error::Shape(format!(
                "raw {:?}, masked {:?}, mask {:?}",
                self.raw.dim(),
                self.masked.dim(),
                self.mask.dim()
            )));
        }
        if self.mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Validation("mask values must be 0 or 1".into()));
        }
        if self.raw.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Validation("raw values must lie in [-1, 1]".into()));
        }
        let context_ok = Zip::from(&self.raw)
            .and(&self.masked)
            .and(&self.mask)
            .all(|r, m, k| *k != 0.0 || r.to_bits() == m.to_bits());
        if !context_ok {
            return Err(Error::Validation("masked differs from raw outside the mask".into()));
        }
        if !(self.diameter_mm.is_finite() && self.diameter_mm >= 0.0) {
            return Err(Error::Validation(format!("diameter {} is invalid", self.diameter_mm)));
        }
        Ok(())
    }

    /// Builds a sample from a normalised patch, masking at `diameter_mm` with seeded noise.
    pub fn from_raw(
        raw: Array3<f32>,
        label: ClassLabel,
        diameter_mm: f64,
        spacing: [f64; 3],
        noise: NoiseParams,
        seed: u64,
    ) -> Result<Self> {
        let (x, y, z) = raw.dim();
        let mask = make_spherical_mask(diameter_mm, spacing, [x, y, z])?;
        let masked = apply_noise_mask(&raw, &mask, seed, noise)?;
        let sample = PatchSample {
            raw,
            masked,
            mask,
            label,
            diameter_mm,
        };
        sample.validate()?;
        Ok(sample)
    }

    /// Same raw patch and mask with freshly drawn noise.
    pub fn renoised(&self, seed: u64, noise: NoiseParams) -> Result<Self> {
        Ok(PatchSample {
            masked: apply_noise_mask(&self.raw, &self.mask, seed, noise)?,
            ..self.clone()
        })
    }
}

/// Trilinear sample at continuous voxel coordinates; `None` outside the grid.
pub fn sample_trilinear(voxels: &Array3<f32>, v: [f64; 3]) -> Option<f32> {
    const EPS: f64 = 1e-9;
    let (dx, dy, dz) = voxels.dim();
    let dims = [dx, dy, dz];
    let mut lo = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let max = (dims[a] - 1) as f64;
        if !(v[a] >= -EPS && v[a] <= max + EPS) {
            return None;
        }
        let c = v[a].clamp(0.0, max);
        let f = c.floor();
        lo[a] = (f as usize).min(dims[a].saturating_sub(2));
        frac[a] = c - lo[a] as f64;
        if dims[a] == 1 {
            lo[a] = 0;
            frac[a] = 0.0;
        }
    }
    let mut acc = 0.0f64;
    for corner in 0..8usize {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let hi = (corner >> a) & 1 == 1;
            w *= if hi { frac[a] } else { 1.0 - frac[a] };
            idx[a] = lo[a] + usize::from(hi && dims[a] > 1);
        }
        if w != 0.0 {
            acc += w * voxels[idx] as f64;
        }
    }
    Some(acc as f32)
}

/// Nodule-centred patch in HU, resampled to `config.target_spacing`.
///
/// The centre lands on patch index `floor(dim / 2)` along each axis, so an
/// already-resampled volume with a grid-point centre yields a plain crop.
pub fn extract_patch(volume: &Volume, center: [f64; 3], config: &PipelineConfig) -> Result<Array3<f32>> {
    config.validate()?;
    let dims = volume.dims();
    let c = volume.world_to_voxel(center);
    if (0..3).any(|a| !(c[a] >= 0.0 && c[a] <= (dims[a] - 1) as f64)) {
        return Err(Error::Validation(format!(
            "centre {center:?} mm lies outside the volume (voxel coords {c:?}, dims {dims:?})"
        )));
    }
    let [px, py, pz] = config.patch_shape;
    let half = [px / 2, py / 2, pz / 2];
    let pad = config.hu_window.0;
    let spacing = volume.spacing();
    let ratio: [f64; 3] = std::array::from_fn(|a| config.target_spacing[a] / spacing[a]);
    Ok(Array3::from_shape_fn((px, py, pz), |(i, j, k)| {
        let idx = [i, j, k];
        let v: [f64; 3] = std::array::from_fn(|a| c[a] + (idx[a] as f64 - half[a] as f64) * ratio[a]);
        sample_trilinear(volume.voxels(), v).unwrap_or(pad)
    }))
}

/// Affine map `low → -1`, `high → 1`, clipped.
pub fn normalize_hu(patch: &Array3<f32>, window: (f32, f32)) -> Result<Array3<f32>> {
    check_window(window)?;
    let (low, high) = (window.0 as f64, window.1 as f64);
    Ok(patch.mapv(|v| (-1.0 + 2.0 * (v as f64 - low) / (high - low)).clamp(-1.0, 1.0) as f32))
}

/// Inverse of [`normalize_hu`] on the unclipped range.
pub fn denormalize_hu(patch: &Array3<f32>, window: (f32, f32)) -> Result<Array3<f32>> {
    check_window(window)?;
    let (low, high) = (window.0 as f64, window.1 as f64);
    Ok(patch.mapv(|v| (low + (v as f64 + 1.0) * 0.5 * (high - low)) as f32))
}

/// Geometric centre of a patch in voxel coordinates.
pub fn patch_center(shape: Shape3) -> [f64; 3] {
    std::array::from_fn(|a| (shape[a] as f64 - 1.0) / 2.0)
}

/// 1 where the physical distance to the patch centre is at most `diameter_mm / 2`.
pub fn make_spherical_mask(diameter_mm: f64, spacing: [f64; 3], shape: Shape3) -> Result<Array3<f32>> {
    if !(diameter_mm.is_finite() && diameter_mm >= 0.0) {
        return Err(Error::Validation(format!("diameter must be ≥ 0, got {diameter_mm}")));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Validation(format!("spacing must be positive, got {spacing:?}")));
    }
    let r = diameter_mm / 2.0;
    let r2 = r * r;
    let c = patch_center(shape);
    Ok(Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(i, j, k)| {
        let dx = (i as f64 - c[0]) * spacing[0];
        let dy = (j as f64 - c[1]) * spacing[1];
        let dz = (k as f64 - c[2]) * spacing[2];
        if dx * dx + dy * dy + dz * dz <= r2 {
            1.0
        } else {
            0.0
        }
    }))
}

/// Replaces masked voxels with i.i.d. uniform noise; unmasked voxels are copied.
pub fn apply_noise_mask(
    raw: &Array3<f32>,
    mask: &Array3<f32>,
    seed: u64,
    noise: NoiseParams,
) -> Result<Array3<f32>> {
    if raw.dim() != mask.dim() {
        return Err(Error::Shape(format!("raw {:?} vs mask {:?}", raw.dim(), mask.dim())));
    }
    noise.validate()?;
    let mut rng = rng_for(seed, "noise-mask", 0);
    let mut out = raw.clone();
    // Iterate in logical order so the draw sequence does not depend on memory layout.
    for (idx, m) in mask.indexed_iter() {
        if *m != 0.0 {
            out[idx] = rng.random_range(noise.low..=noise.high);
        }
    }
    Ok(out)
}

/// Constant single-channel conditioning map: benign 0, malignant 1.
pub fn make_label_map(label: ClassLabel, shape: Shape3) -> Array3<f32> {
    Array3::from_elem((shape[0], shape[1], shape[2]), label_value(label))
}

pub fn label_value(label: ClassLabel) -> f32 {
    match label {
        ClassLabel::Benign => 0.0,
        ClassLabel::Malignant => 1.0,
    }
}

/// Checked variant taking the numeric class code.
pub fn make_label_map_code(code: u8, shape: Shape3) -> Result<Array3<f32>> {
    Ok(make_label_map(ClassLabel::from_code(code)?, shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn volume(dims: (usize, usize, usize), spacing: [f64; 3], f: impl Fn([f64; 3]) -> f32) -> Volume {
        let origin = [-3.0, 5.0, 10.0];
        let voxels = Array3::from_shape_fn(dims, |(i, j, k)| {
            f([
                origin[0] + i as f64 * spacing[0],
                origin[1] + j as f64 * spacing[1],
                origin[2] + k as f64 * spacing[2],
            ])
        });
        Volume::new(voxels, spacing, origin).unwrap()
    }

    fn small_config(shape: Shape3) -> PipelineConfig {
        PipelineConfig {
            patch_shape: shape,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn constant_volume_gives_constant_patch() {
        let v = volume((20, 20, 10), [0.7, 0.7, 1.3], |_| -412.0);
        let p = extract_patch(&v, v.voxel_to_world([9.3, 10.1, 4.4]), &small_config([8, 8, 4])).unwrap();
        assert!(p.iter().all(|&x| (x + 412.0).abs() < 1e-3));
    }

    #[test]
    fn grid_aligned_extraction_is_a_crop() {
        let v = volume((80, 80, 40), [1.0, 1.0, 2.0], |p| (p[0] * 3.1 + p[1] * 0.2 - p[2]) as f32);
        let c = [40usize, 38, 20];
        let p = extract_patch(
            &v,
            v.voxel_to_world([c[0] as f64, c[1] as f64, c[2] as f64]),
            &PipelineConfig::default(),
        )
        .unwrap();
        assert_eq!(p.dim(), (64, 64, 32));
        for ((i, j, k), &x) in p.indexed_iter() {
            let src = v.voxels()[[c[0] + i - 32, c[1] + j - 32, c[2] + k - 16]];
            assert_eq!(x, src);
        }
    }

    #[test]
    fn ramp_at_half_spacing_matches_analytic_values() {
        let v = volume((160, 40, 20), [0.5, 0.5, 1.0], |p| p[0] as f32);
        let center = v.voxel_to_world([80.0, 20.0, 10.0]);
        let cfg = small_config([64, 16, 8]);
        let p = extract_patch(&v, center, &cfg).unwrap();
        for ((i, _, _), &x) in p.indexed_iter() {
            let expected = center[0] + (i as f64 - 32.0) * cfg.target_spacing[0];
            assert!((x as f64 - expected).abs() < 1e-5, "{x} vs {expected}");
        }
    }

    #[test]
    fn outside_region_is_padded_and_outside_centre_rejected() {
        let v = volume((10, 10, 5), [1.0, 1.0, 2.0], |_| 100.0);
        let p = extract_patch(&v, v.voxel_to_world([0.0, 0.0, 0.0]), &small_config([8, 8, 4])).unwrap();
        assert_eq!(p[[0, 0, 0]], -1000.0);
        assert_eq!(p[[7, 7, 3]], 100.0);
        assert!(extract_patch(&v, v.voxel_to_world([-1.0, 0.0, 0.0]), &small_config([8, 8, 4])).is_err());
    }

    #[test]
    fn normalize_examples() {
        let p = Array3::from_shape_vec((4, 1, 1), vec![-1000.0, 400.0, -300.0, 5000.0]).unwrap();
        let n = normalize_hu(&p, (-1000.0, 400.0)).unwrap();
        assert_eq!(n.as_slice().unwrap(), &[-1.0, 1.0, 0.0, 1.0]);
        assert!(normalize_hu(&p, (3.0, 3.0)).is_err());
        let back = denormalize_hu(&n, (-1000.0, 400.0)).unwrap();
        assert!((back[[2, 0, 0]] + 300.0).abs() < 1e-3);
    }

    /// Counts lattice points inside the sphere one axis-line at a time.
    fn oracle_count(diameter: f64, spacing: [f64; 3], shape: Shape3) -> usize {
        let r = diameter / 2.0;
        let mut count = 0;
        for i in 0..shape[0] {
            let dx = (i as f64 - (shape[0] as f64 - 1.0) / 2.0) * spacing[0];
            for j in 0..shape[1] {
                let dy = (j as f64 - (shape[1] as f64 - 1.0) / 2.0) * spacing[1];
                count += (0..shape[2])
                    .filter(|&k| {
                        let dz = (k as f64 - (shape[2] as f64 - 1.0) / 2.0) * spacing[2];
                        dx * dx + dy * dy + dz * dz <= r * r
                    })
                    .count();
            }
        }
        count
    }

    fn ones(m: &Array3<f32>) -> usize {
        m.iter().filter(|&&v| v == 1.0).count()
    }

    #[test]
    fn mask_examples() {
        assert_eq!(ones(&make_spherical_mask(0.0, [1.0, 1.0, 2.0], [4, 4, 4]).unwrap()), 0);
        // Odd shape: diameter 0 still hits the exact centre voxel.
        assert_eq!(ones(&make_spherical_mask(0.0, [1.0; 3], [3, 3, 3]).unwrap()), 1);
        // Centre plus its 6 face neighbours, then plus 12 edge neighbours.
        assert_eq!(ones(&make_spherical_mask(2.0, [1.0; 3], [5, 5, 5]).unwrap()), 7);
        assert_eq!(ones(&make_spherical_mask(2.0 * 2f64.sqrt(), [1.0; 3], [5, 5, 5]).unwrap()), 19);
        let diag = (63f64.powi(2) + 63f64.powi(2) + 62f64.powi(2)).sqrt();
        let full = make_spherical_mask(diag * (1.0 + 1e-9), [1.0, 1.0, 2.0], [64, 64, 32]).unwrap();
        assert_eq!(ones(&full), 64 * 64 * 32);
        let m = make_spherical_mask(10.0, [1.0, 1.0, 2.0], [64, 64, 32]).unwrap();
        assert_eq!(ones(&m), oracle_count(10.0, [1.0, 1.0, 2.0], [64, 64, 32]));
        assert!(make_spherical_mask(-1.0, [1.0; 3], [2, 2, 2]).is_err());
    }

    #[test]
    fn large_sphere_count_tracks_analytic_volume() {
        let d = 30.0;
        let m = make_spherical_mask(d, [1.0, 1.0, 2.0], [64, 64, 32]).unwrap();
        let analytic = std::f64::consts::PI / 6.0 * d * d * d / 2.0;
        let rel = (ones(&m) as f64 - analytic).abs() / analytic;
        assert!(rel < 0.02, "relative error {rel}");
    }

    proptest! {
        #[test]
        fn mask_matches_oracle_and_is_symmetric(
            d in 0.0f64..20.0,
            sx in 0.5f64..2.5, sz in 0.5f64..3.0,
            x in 1usize..12, y in 1usize..12, z in 1usize..8,
        ) {
            let shape = [2 * x + 1, 2 * y + 1, 2 * z + 1];
            let m = make_spherical_mask(d, [sx, sx, sz], shape).unwrap();
            prop_assert_eq!(ones(&m), oracle_count(d, [sx, sx, sz], shape));
            for ((i, j, k), &v) in m.indexed_iter() {
                prop_assert_eq!(v, m[[shape[0] - 1 - i, j, k]]);
                prop_assert_eq!(v, m[[i, shape[1] - 1 - j, k]]);
                prop_assert_eq!(v, m[[i, j, shape[2] - 1 - k]]);
            }
        }

        #[test]
        fn mask_count_is_monotone(d in 0.0f64..15.0, extra in 0.0f64..5.0, sz in 0.5f64..3.0) {
            let a = make_spherical_mask(d, [1.0, 1.0, sz], [12, 12, 8]).unwrap();
            let b = make_spherical_mask(d + extra, [1.0, 1.0, sz], [12, 12, 8]).unwrap();
            prop_assert!(ones(&a) <= ones(&b));
        }

        #[test]
        fn noise_never_touches_context(seed in any::<u64>(), d in 0.0f64..8.0) {
            let raw = Array3::from_shape_fn((6, 5, 4), |(i, j, k)| ((i + 2 * j + 3 * k) as f32 / 30.0) - 0.5);
            let mask = make_spherical_mask(d, [1.0; 3], [6, 5, 4]).unwrap();
            let out = apply_noise_mask(&raw, &mask, seed, NoiseParams::default()).unwrap();
            for ((r, o), m) in raw.iter().zip(&out).zip(&mask) {
                if *m == 0.0 {
                    prop_assert_eq!(r.to_bits(), o.to_bits());
                } else {
                    prop_assert!((-1.0..=1.0).contains(o));
                }
            }
        }

        #[test]
        fn constant_volume_extracts_constant(val in -1200.0f32..1200.0, fx in 0.2f64..0.8, sz in 0.5f64..2.5) {
            let v = volume((16, 16, 8), [0.8, 0.8, sz], |_| val);
            let p = extract_patch(&v, v.voxel_to_world([15.0 * fx, 7.0, 3.5]), &small_config([6, 6, 4])).unwrap();
            let inside: Vec<f32> = p.iter().copied().filter(|&x| x != -1000.0).collect();
            prop_assert!(!inside.is_empty());
            for x in inside {
                prop_assert!((x - val).abs() <= 1e-3 * (1.0 + val.abs()));
            }
        }
    }

    #[test]
    fn noise_mask_examples() {
        let raw = Array3::from_elem((20, 20, 50), 0.25f32);
        let zero = Array3::zeros((20, 20, 50));
        assert_eq!(apply_noise_mask(&raw, &zero, 3, NoiseParams::default()).unwrap(), raw);
        let one = Array3::ones((20, 20, 50));
        let a = apply_noise_mask(&raw, &one, 3, NoiseParams::default()).unwrap();
        let b = apply_noise_mask(&raw, &one, 3, NoiseParams::default()).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = apply_noise_mask(&raw, &one, 4, NoiseParams::default()).unwrap();
        assert_ne!(a, c);
        assert!(apply_noise_mask(&raw, &Array3::zeros((2, 2, 2)), 3, NoiseParams::default()).is_err());
    }

    /// Half-masked patch: the context is untouched and the 10^4 noise draws pass a
    /// chi-square uniformity test (10 bins, 9 dof, critical value 27.88 at p = 0.001).
    #[test]
    fn half_mask_noise_is_uniform() {
        let raw = Array3::from_shape_fn((20, 20, 50), |(i, j, k)| ((i * j + k) % 7) as f32 / 7.0);
        let mask = Array3::from_shape_fn((20, 20, 50), |(_, _, k)| if k < 25 { 1.0 } else { 0.0 });
        let out = apply_noise_mask(&raw, &mask, 11, NoiseParams::default()).unwrap();
        let mut context_diff = 0.0f64;
        let mut bins = [0usize; 10];
        for ((r, o), m) in raw.iter().zip(&out).zip(&mask) {
            if *m == 0.0 {
                context_diff += (r - o).abs() as f64;
            } else {
                let b = (((*o + 1.0) / 2.0 * 10.0) as usize).min(9);
                bins[b] += 1;
            }
        }
        assert_eq!(context_diff, 0.0);
        let n: usize = bins.iter().sum();
        assert_eq!(n, 10_000);
        let expected = n as f64 / 10.0;
        let chi2: f64 = bins.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 27.88, "chi2 {chi2} bins {bins:?}");
    }

    #[test]
    fn label_maps() {
        let b = make_label_map(ClassLabel::Benign, [4, 4, 4]);
        let m = make_label_map(ClassLabel::Malignant, [4, 4, 4]);
        assert!(b.iter().all(|&v| v == 0.0));
        assert!(m.iter().all(|&v| v == 1.0));
        assert!(b.iter().zip(&m).all(|(x, y)| x != y));
        assert!(make_label_map_code(0, [1, 1, 1]).is_err());
        assert_eq!(make_label_map_code(2, [1, 1, 1]).unwrap()[[0, 0, 0]], 1.0);
    }

    #[test]
    fn sample_validation_catches_broken_context() {
        let raw = Array3::from_elem((5, 5, 5), 0.1f32);
        let mut s = PatchSample::from_raw(raw, ClassLabel::Benign, 3.0, [1.0; 3], NoiseParams::default(), 1).unwrap();
        s.validate().unwrap();
        s.masked[[0, 0, 0]] = 0.5;
        assert!(s.validate().is_err());
    }
}
