//! Contextual attention: foreground feature patches are rebuilt as
//! softmax-weighted sums of background features, weighted by cosine
//! similarity between zero-padded cubic feature patches.

use std::rc::Rc;

use ndarray::Array3;
use tensorgrad::{Scalar, SparseMap, Tensor, Var};

use crate::error::{Error, Result};

pub const COSINE_EPS: f64 = 1e-8;

pub struct Attended<T: Scalar> {
    /// `[C, X, Y, Z]`, background locations unchanged.
    pub features: Var<T>,
    /// `[|fg|, |bg|]`, rows sum to one.
    pub weights: Tensor<T>,
    /// Flat grid indices of foreground and background locations.
    pub foreground: Vec<usize>,
    pub background: Vec<usize>,
}

fn offsets(patch_size: usize) -> Vec<[isize; 3]> {
    let lo = -((patch_size / 2) as isize);
    let hi = lo + patch_size as isize;
    let mut out = Vec::with_capacity(patch_size.pow(3));
    for dx in lo..hi {
        for dy in lo..hi {
            for dz in lo..hi {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

/// Gathers the zero-padded patch around each of `centres` into rows of
/// length `C · patch_size³`.
fn patch_map<T: Scalar>(
    c: usize,
    dims: [usize; 3],
    centres: &[usize],
    patch_size: usize,
) -> Result<SparseMap<T>> {
    let offs = offsets(patch_size);
    let vol = dims[0] * dims[1] * dims[2];
    let width = c * offs.len();
    let mut rows = Vec::with_capacity(centres.len() * width);
    for &p in centres {
        let pos = [p / (dims[1] * dims[2]), (p / dims[2]) % dims[1], p % dims[2]];
        for ch in 0..c {
            for o in &offs {
                let q: [isize; 3] = std::array::from_fn(|a| pos[a] as isize + o[a]);
                let inside = (0..3).all(|a| q[a] >= 0 && (q[a] as usize) < dims[a]);
                rows.push(if inside {
                    let flat = (q[0] as usize * dims[1] + q[1] as usize) * dims[2] + q[2] as usize;
                    vec![(ch * vol + flat, T::one())]
                } else {
                    Vec::new()
                });
            }
        }
    }
    Ok(SparseMap::new(&[c, dims[0], dims[1], dims[2]], &[centres.len(), width], rows)?)
}

/// Gathers the feature vector at each of `centres`: `[C, grid] -> [n, C]`.
fn centre_map<T: Scalar>(c: usize, dims: [usize; 3], centres: &[usize]) -> Result<SparseMap<T>> {
    let vol = dims[0] * dims[1] * dims[2];
    let rows = centres
        .iter()
        .flat_map(|&p| (0..c).map(move |ch| vec![(ch * vol + p, T::one())]))
        .collect();
    Ok(SparseMap::new(&[c, dims[0], dims[1], dims[2]], &[centres.len(), c], rows)?)
}

fn normalise_rows<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let norms = x
        .square()
        .sum_rows()?
        .add_scalar(T::from_f64_lossy(COSINE_EPS))
        .sqrt();
    Ok(x.div(&norms.expand_rows(x.shape())?)?)
}

/// Applies contextual attention to one sample's `[C, X, Y, Z]` features.
/// `mask` is 1 on foreground (to be filled) grid cells.
pub fn contextual_attention<T: Scalar>(
    features: &Var<T>,
    mask: &Array3<f32>,
    patch_size: usize,
    softmax_scale: f64,
) -> Result<Attended<T>> {
    let &[c, x, y, z] = features.shape() else {
        return Err(Error::Shape(format!("attention expects [C, X, Y, Z], got {:?}", features.shape())));
    };
    let dims = [x, y, z];
    if mask.dim() != (x, y, z) {
        return Err(Error::Shape(format!("mask {:?} vs feature grid {dims:?}", mask.dim())));
    }
    if patch_size == 0 || dims.iter().any(|&d| patch_size > d) {
        return Err(Error::Validation(format!("patch size {patch_size} exceeds grid {dims:?}")));
    }
    let flat: Vec<f32> = mask.iter().copied().collect();
    let foreground: Vec<usize> = (0..flat.len()).filter(|&i| flat[i] != 0.0).collect();
    let background: Vec<usize> = (0..flat.len()).filter(|&i| flat[i] == 0.0).collect();
    if background.is_empty() {
        return Err(Error::Validation("contextual attention needs at least one background location".into()));
    }
    if foreground.is_empty() {
        return Ok(Attended {
            features: features.clone(),
            weights: Tensor::zeros(&[0, background.len()]),
            foreground,
            background,
        });
    }

    let fg_patches = features.sparse_map(&Rc::new(patch_map(c, dims, &foreground, patch_size)?), false)?;
    let bg_patches = features.sparse_map(&Rc::new(patch_map(c, dims, &background, patch_size)?), false)?;
    let sim = normalise_rows(&fg_patches)?.matmul_t(&normalise_rows(&bg_patches)?, false, true)?;
    let weights = sim.scale(T::from_f64_lossy(softmax_scale)).softmax_rows()?;
    let bg_values = features.sparse_map(&Rc::new(centre_map(c, dims, &background)?), false)?;
    let fg_values = weights.matmul(&bg_values)?;

    let scatter = Rc::new(centre_map::<T>(c, dims, &foreground)?);
    let keep: Vec<T> = (0..c)
        .flat_map(|_| flat.iter().map(|&m| if m == 0.0 { T::one() } else { T::zero() }))
        .collect();
    let kept = features.mul_const(&Tensor::new(features.shape(), keep)?)?;
    let filled = fg_values.sparse_map(&scatter, true)?.reshape(features.shape())?;
    Ok(Attended {
        features: kept.add(&filled)?,
        weights: weights.value().clone(),
        foreground,
        background,
    })
}

/// Max-pools a full-resolution mask down by `factor` on every axis.
pub fn downsample_mask(mask: &Array3<f32>, factor: usize) -> Result<Array3<f32>> {
    let (x, y, z) = mask.dim();
    if factor == 0 || x % factor != 0 || y % factor != 0 || z % factor != 0 {
        return Err(Error::Shape(format!("mask {:?} not divisible by {factor}", mask.dim())));
    }
    let mut out = Array3::zeros((x / factor, y / factor, z / factor));
    for ((i, j, k), &v) in mask.indexed_iter() {
        let o = &mut out[[i / factor, j / factor, k / factor]];
        if v > *o {
            *o = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct loop implementation used as the reference.
    pub(crate) fn brute_force(
        f: &[f64],
        c: usize,
        dims: [usize; 3],
        mask: &[f32],
        p: usize,
        scale: f64,
    ) -> (Vec<f64>, Vec<Vec<f64>>) {
        let vol = dims[0] * dims[1] * dims[2];
        let at = |ch: usize, q: [isize; 3]| -> f64 {
            if (0..3).all(|a| q[a] >= 0 && (q[a] as usize) < dims[a]) {
                f[ch * vol + (q[0] as usize * dims[1] + q[1] as usize) * dims[2] + q[2] as usize]
            } else {
                0.0
            }
        };
        let coord = |i: usize| [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
        let patch = |i: usize| -> Vec<f64> {
            let c0 = coord(i);
            let h = (p / 2) as isize;
            let mut v = Vec::new();
            for ch in 0..c {
                for dx in 0..p as isize {
                    for dy in 0..p as isize {
                        for dz in 0..p as isize {
                            v.push(at(ch, [c0[0] as isize + dx - h, c0[1] as isize + dy - h, c0[2] as isize + dz - h]));
                        }
                    }
                }
            }
            v
        };
        let mut out = f.to_vec();
        let mut all_w = Vec::new();
        let bg: Vec<usize> = (0..vol).filter(|&i| mask[i] == 0.0).collect();
        for fi in (0..vol).filter(|&i| mask[i] != 0.0) {
            let a = patch(fi);
            let na = (a.iter().map(|v| v * v).sum::<f64>() + COSINE_EPS).sqrt();
            let logits: Vec<f64> = bg
                .iter()
                .map(|&bi| {
                    let b = patch(bi);
                    let nb = (b.iter().map(|v| v * v).sum::<f64>() + COSINE_EPS).sqrt();
                    scale * a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let w: Vec<f64> = e.iter().map(|v| v / s).collect();
            for ch in 0..c {
                out[ch * vol + fi] = bg.iter().zip(&w).map(|(&bi, wi)| wi * f[ch * vol + bi]).sum();
            }
            all_w.push(w);
        }
        (out, all_w)
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (Vec<f64>, usize, [usize; 3], Vec<f32>, usize, f64) {
        let dims = [rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4)];
        let c = rng.random_range(1..=3);
        let vol = dims[0] * dims[1] * dims[2];
        let f: Vec<f64> = (0..c * vol).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut mask: Vec<f32> = (0..vol).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let b = rng.random_range(0..vol);
        mask[b] = 0.0;
        let max_p = *dims.iter().min().unwrap();
        let p = [1, 3].into_iter().filter(|&p| p <= max_p).last().unwrap_or(1);
        let scale = rng.random_range(0.5..20.0);
        (f, c, dims, mask, p, scale)
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..60 {
            let (f, c, dims, mask, p, scale) = random_case(&mut rng);
            let feats = Var::constant(Tensor::new(&[c, dims[0], dims[1], dims[2]], f.clone()).unwrap());
            let m = Array3::from_shape_vec((dims[0], dims[1], dims[2]), mask.clone()).unwrap();
            let out = contextual_attention(&feats, &m, p, scale).unwrap();
            let (expected, w) = brute_force(&f, c, dims, &mask, p, scale);
            for (a, b) in out.features.data().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-10);
            }
            for (row, wrow) in w.iter().enumerate() {
                let s: f64 = (0..wrow.len()).map(|j| out.weights.data()[row * wrow.len() + j]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_background_copies_its_features() {
        let f: Vec<f64> = (0..2 * 8).map(|i| i as f64 * 0.1 - 0.4).collect();
        let feats = Var::constant(Tensor::new(&[2, 2, 2, 2], f.clone()).unwrap());
        let mut mask = Array3::ones((2, 2, 2));
        mask[[1, 0, 1]] = 0.0;
        let bg = 5;
        let out = contextual_attention(&feats, &mask, 1, 10.0).unwrap();
        for ch in 0..2 {
            for i in 0..8 {
                assert_eq!(out.features.data()[ch * 8 + i], f[ch * 8 + bg]);
            }
        }
    }

    /// Three candidates: one identical to the foreground patch (cosine 1), two
    /// orthogonal (cosine 0). Weights are e^s / (e^s + 2) for scale s.
    #[test]
    fn matching_background_dominates() {
        // C = 3 channels on a 1×1×4 grid, patch size 1 so patches are the channel vectors.
        let cols = [[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let mut f = vec![0.0f64; 12];
        for (pos, v) in cols.iter().enumerate() {
            for ch in 0..3 {
                f[ch * 4 + pos] = v[ch];
            }
        }
        let feats = Var::constant(Tensor::new(&[3, 1, 1, 4], f).unwrap());
        let mask = Array3::from_shape_vec((1, 1, 4), vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        for scale in [1.0, 10.0, 50.0] {
            let out = contextual_attention(&feats, &mask, 1, scale).unwrap();
            let w = out.weights.data();
            let top = scale.exp() / (scale.exp() + 2.0);
            let rest = 1.0 / (scale.exp() + 2.0);
            assert!((w[0] - top).abs() < 1e-6 && (w[1] - rest).abs() < 1e-6 && (w[2] - rest).abs() < 1e-6);
        }
        let out = contextual_attention(&feats, &mask, 1, 50.0).unwrap();
        assert!((out.features.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn errors_and_degenerate_masks() {
        let feats = Var::constant(Tensor::<f64>::ones(&[1, 2, 2, 2]));
        assert!(contextual_attention(&feats, &Array3::ones((2, 2, 2)), 1, 10.0).is_err());
        assert!(contextual_attention(&feats, &Array3::zeros((2, 2, 2)), 3, 10.0).is_err());
        let out = contextual_attention(&feats, &Array3::zeros((2, 2, 2)), 1, 10.0).unwrap();
        assert_eq!(out.features.data(), feats.data());
    }

    #[test]
    fn mask_downsampling_is_max_pooling() {
        let mut m = Array3::zeros((4, 4, 2));
        m[[3, 0, 1]] = 1.0;
        let d = downsample_mask(&m, 2).unwrap();
        assert_eq!(d.dim(), (2, 2, 1));
        assert_eq!(d.iter().sum::<f32>(), 1.0);
        assert_eq!(d[[1, 0, 0]], 1.0);
        assert!(downsample_mask(&m, 3).is_err());
    }
}
