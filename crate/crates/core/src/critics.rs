//! Local and global Wasserstein critics. A strided convolutional trunk feeds
//! two linear heads on pooled features: an unbounded realness score and
//! three-way logits over {fake, benign, malignant}.
//!
//! The local critic sees the mask's bounding box (plus a margin) resampled
//! trilinearly to a fixed shape; the resampling is a sparse linear map, so
//! gradients flow back to the full patch.

use std::path::Path;
use std::rc::Rc;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use tensorgrad::{ConvSpec, ParamSet, Scalar, SparseMap, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{cat, global_avg_pool, lrelu, Conv, Linear};
use crate::seed::rng_for;

pub const NUM_DOMAINS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Local,
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub input_kind: InputKind,
    pub local_crop_margin: usize,
    pub local_shape: [usize; 3],
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            base_channels: 32,
            depth: 3,
            input_kind: InputKind::Global,
            local_crop_margin: 2,
            local_shape: [32, 32, 16],
        }
    }
}

impl CriticConfig {
    pub fn desk(kind: InputKind) -> Self {
        CriticConfig {
            base_channels: 8,
            depth: 3,
            input_kind: kind,
            local_crop_margin: 2,
            local_shape: [16, 16, 8],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.depth == 0 || self.local_shape.contains(&0) {
            return Err(Error::Config("critic base_channels, depth and local_shape must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Inclusive-exclusive voxel box `[lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BBox {
    pub fn size(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.hi[a] - self.lo[a])
    }
}

/// Bounding box of the nonzero mask voxels, grown by `margin` and clipped.
pub fn mask_bbox(mask: &Array3<f32>, margin: usize) -> Result<BBox> {
    let dims = <[usize; 3]>::from(mask.dim());
    let mut lo = dims;
    let mut hi = [0; 3];
    for ((i, j, k), &v) in mask.indexed_iter() {
        if v != 0.0 {
            for (a, p) in [i, j, k].into_iter().enumerate() {
                lo[a] = lo[a].min(p);
                hi[a] = hi[a].max(p + 1);
            }
        }
    }
    if hi == [0; 3] {
        return Err(Error::Validation("cannot crop around an empty mask".into()));
    }
    Ok(BBox {
        lo: std::array::from_fn(|a| lo[a].saturating_sub(margin)),
        hi: std::array::from_fn(|a| (hi[a] + margin).min(dims[a])),
    })
}

/// Linear interpolation taps for output index `o` of `n` along a box span.
fn taps(lo: usize, size: usize, o: usize, n: usize) -> Vec<(usize, f64)> {
    let s = if n == 1 {
        lo as f64 + (size as f64 - 1.0) / 2.0
    } else {
        lo as f64 + (o * (size - 1)) as f64 / (n - 1) as f64
    };
    let i0 = s.floor() as usize;
    let t = s - i0 as f64;
    if t == 0.0 || i0 + 1 >= lo + size {
        vec![(i0.min(lo + size - 1), 1.0)]
    } else {
        vec![(i0, 1.0 - t), (i0 + 1, t)]
    }
}

/// Batched crop-and-resample map `[N, 1, X, Y, Z] -> [N, 1, out]`, one box per sample.
pub fn local_crop_map<T: Scalar>(
    masks: &[Array3<f32>],
    margin: usize,
    out: [usize; 3],
) -> Result<SparseMap<T>> {
    let Some(first) = masks.first() else {
        return Err(Error::Validation("no masks to crop".into()));
    };
    let dims = <[usize; 3]>::from(first.dim());
    let vol = dims.iter().product::<usize>();
    let mut rows = Vec::with_capacity(masks.len() * out.iter().product::<usize>());
    for (n, m) in masks.iter().enumerate() {
        if m.dim() != first.dim() {
            return Err(Error::Shape(format!("mask {:?} vs {:?}", m.dim(), first.dim())));
        }
        let b = mask_bbox(m, margin)?;
        let size = b.size();
        let t: [Vec<Vec<(usize, f64)>>; 3] =
            std::array::from_fn(|a| (0..out[a]).map(|o| taps(b.lo[a], size[a], o, out[a])).collect());
        for tx in &t[0] {
            for ty in &t[1] {
                for tz in &t[2] {
                    let mut row = Vec::with_capacity(8);
                    for &(x, wx) in tx {
                        for &(y, wy) in ty {
                            for &(z, wz) in tz {
                                let flat = n * vol + (x * dims[1] + y) * dims[2] + z;
                                row.push((flat, T::from_f64_lossy(wx * wy * wz)));
                            }
                        }
                    }
                    rows.push(row);
                }
            }
        }
    }
    let nb = masks.len();
    Ok(SparseMap::new(
        &[nb, 1, dims[0], dims[1], dims[2]],
        &[nb, 1, out[0], out[1], out[2]],
        rows,
    )?)
}

/// Crops one patch around its mask and resamples it to `out`.
pub fn crop_local(patch: &Array3<f32>, mask: &Array3<f32>, margin: usize, out: [usize; 3]) -> Result<Array3<f32>> {
    if patch.dim() != mask.dim() {
        return Err(Error::Shape(format!("patch {:?} vs mask {:?}", patch.dim(), mask.dim())));
    }
    let map = local_crop_map::<f64>(std::slice::from_ref(mask), margin, out)?;
    let (x, y, z) = patch.dim();
    let t = Tensor::new(&[1, 1, x, y, z], patch.iter().map(|&v| v as f64).collect())?;
    let r = map.apply_tensor(&t, false)?;
    Ok(Array3::from_shape_vec(
        (out[0], out[1], out[2]),
        r.data().iter().map(|&v| v as f32).collect(),
    )
    .expect("map output shape"))
}

/// Label channel: every voxel of sample `n` holds `values[n]`.
pub fn label_map<T: Scalar>(values: &[f64], spatial: [usize; 3]) -> Tensor<T> {
    let vol: usize = spatial.iter().product();
    let data = values
        .iter()
        .flat_map(|&v| std::iter::repeat_n(T::from_f64_lossy(v), vol))
        .collect();
    Tensor::new(&[values.len(), 1, spatial[0], spatial[1], spatial[2]], data).expect("label map shape")
}

pub struct CriticOutput<T: Scalar> {
    /// `[N]`
    pub wscore: Var<T>,
    /// `[N, 3]`
    pub class_logits: Var<T>,
}

#[derive(Clone, Debug)]
pub struct Critic {
    pub config: CriticConfig,
    pub input_shape: [usize; 3],
    trunk: Vec<Conv>,
    score: Linear,
    cls: Linear,
}

impl Critic {
    /// `patch_shape` is used by the global critic; the local critic expects
    /// `config.local_shape`.
    pub fn new<T: Scalar>(config: CriticConfig, patch_shape: [usize; 3], seed: u64) -> Result<(Self, ParamSet<T>)> {
        config.validate()?;
        let label = match config.input_kind {
            InputKind::Local => "critic-local-init",
            InputKind::Global => "critic-global-init",
        };
        let mut rng = rng_for(seed, label, 0);
        let mut params = ParamSet::new();
        let mut trunk = Vec::with_capacity(config.depth);
        let mut prev = 2;
        for l in 0..config.depth {
            let w = config.base_channels << l.min(3);
            trunk.push(Conv::new(&mut params, &format!("trunk{l}"), prev, w, 3, ConvSpec::strided(3, 2), &mut rng)?);
            prev = w;
        }
        let score = Linear::new(&mut params, "score", prev, 1, &mut rng)?;
        let cls = Linear::new(&mut params, "cls", prev, NUM_DOMAINS, &mut rng)?;
        let input_shape = match config.input_kind {
            InputKind::Local => config.local_shape,
            InputKind::Global => patch_shape,
        };
        Ok((
            Critic {
                config,
                input_shape,
                trunk,
                score,
                cls,
            },
            params,
        ))
    }

    pub fn cls_slots(&self) -> [usize; 2] {
        self.cls.slots()
    }

    pub fn forward<T: Scalar>(&self, p: &[Var<T>], input: &Var<T>, label_map: &Var<T>) -> Result<CriticOutput<T>> {
        let s = input.shape();
        if s.len() != 5 || s[1] != 1 || s[2..] != self.input_shape || label_map.shape() != s {
            return Err(Error::Shape(format!(
                "critic expects [N, 1, {:?}] input and label map, got {:?} and {:?}",
                self.input_shape,
                s,
                label_map.shape()
            )));
        }
        let n = s[0];
        let mut h = cat(&[input.clone(), label_map.clone()])?;
        for conv in &self.trunk {
            h = lrelu(conv.forward(p, &h)?);
        }
        let pooled = global_avg_pool(&h)?;
        Ok(CriticOutput {
            wscore: self.score.forward(p, &pooled)?.reshape(&[n])?,
            class_logits: self.cls.forward(p, &pooled)?,
        })
    }

    /// Maps full patches to this critic's input space.
    pub fn prepare<T: Scalar>(&self, patches: &Var<T>, crop: Option<&Rc<SparseMap<T>>>) -> Result<Var<T>> {
        match (self.config.input_kind, crop) {
            (InputKind::Global, _) => Ok(patches.clone()),
            (InputKind::Local, Some(map)) => Ok(patches.sparse_map(map, false)?),
            (InputKind::Local, None) => Err(Error::Validation("local critic needs a crop map".into())),
        }
    }

    pub fn save(&self, dir: &Path, params: &ParamSet<f32>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let path = dir.join(crate::inpaint_generator::CONFIG_FILE);
        let cfg = SavedCritic {
            config: self.config.clone(),
            patch_shape: self.input_shape,
        };
        let json = serde_json::to_string_pretty(&cfg).map_err(Error::json("critic config"))?;
        std::fs::write(&path, json).map_err(Error::io(&path))?;
        tensorgrad::save_params(dir, params)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, ParamSet<f32>)> {
        let path = dir.join(crate::inpaint_generator::CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(Error::io(&path))?;
        let saved: SavedCritic = serde_json::from_str(&text).map_err(Error::json("critic config"))?;
        let (net, mut params) = Critic::new::<f32>(saved.config, saved.patch_shape, 0)?;
        tensorgrad::assign_params(&mut params, &tensorgrad::load_params(dir)?)?;
        Ok((net, params))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SavedCritic {
    config: CriticConfig,
    patch_shape: [usize; 3],
}
