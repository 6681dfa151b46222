//! Stacked coarse-to-fine in-painting generator. G1 maps (masked patch, mask,
//! label map) to a coarse patch; G2 maps (coarse, masked, mask, label map) to
//! the refined patch, with a contextual-attention branch at its bottleneck.
//!
//! Both stages are hourglasses: stride-2 encoder, dilated bottleneck and a
//! nearest-upsample + convolution decoder with encoder skips. All inputs and
//! outputs are `[N, 1, X, Y, Z]` tensors.

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use tensorgrad::{ConvSpec, ParamSet, Scalar, Tensor, Var};

use crate::attention::{contextual_attention, downsample_mask};
use crate::error::{Error, Result};
use crate::nn::{cat, lrelu, Conv};
use crate::seed::rng_for;

pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub attention_patch_size: usize,
    pub attention_softmax_scale: f64,
    pub use_attention: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_channels: 32,
            depth: 3,
            attention_patch_size: 3,
            attention_softmax_scale: 10.0,
            use_attention: true,
        }
    }
}

impl GeneratorConfig {
    /// Small configuration sized for single-core training on 32×32×16 patches.
    pub fn desk() -> Self {
        GeneratorConfig {
            base_channels: 8,
            depth: 2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.depth == 0 || self.attention_patch_size == 0 {
            return Err(Error::Config(
                "generator base_channels, depth and attention_patch_size must be ≥ 1".into(),
            ));
        }
        if !(self.attention_softmax_scale.is_finite() && self.attention_softmax_scale > 0.0) {
            return Err(Error::Config("attention_softmax_scale must be positive".into()));
        }
        Ok(())
    }

    /// Channel width at encoder level `l` (1-based).
    fn width(&self, l: usize) -> usize {
        self.base_channels << (l - 1).min(3)
    }

    pub fn check_shape(&self, shape: [usize; 3]) -> Result<()> {
        let f = 1usize << self.depth;
        if shape.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::Shape(format!(
                "patch shape {shape:?} must be divisible by {f} for depth {}",
                self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct AttentionBranch {
    pre: Conv,
    post: Conv,
    merge: Conv,
}

#[derive(Clone, Debug)]
struct Hourglass {
    down: Vec<Conv>,
    bottleneck: Vec<Conv>,
    attention: Option<AttentionBranch>,
    up: Vec<Conv>,
    out: Conv,
}

impl Hourglass {
    fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        prefix: &str,
        cin: usize,
        cfg: &GeneratorConfig,
        with_attention: bool,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        let mut down = Vec::with_capacity(cfg.depth);
        let mut prev = cin;
        for l in 1..=cfg.depth {
            let w = cfg.width(l);
            down.push(Conv::new(params, &format!("{prefix}.down{l}"), prev, w, 3, ConvSpec::strided(3, 2), rng)?);
            prev = w;
        }
        let wb = cfg.width(cfg.depth);
        let bottleneck = [1, 2]
            .iter()
            .map(|&d| Conv::new(params, &format!("{prefix}.mid_d{d}"), wb, wb, 3, ConvSpec::same(3, d), rng))
            .collect::<Result<Vec<_>>>()?;
        let attention = if with_attention {
            Some(AttentionBranch {
                pre: Conv::new(params, &format!("{prefix}.attn_in"), wb, wb, 3, ConvSpec::same(3, 1), rng)?,
                post: Conv::new(params, &format!("{prefix}.attn_out"), wb, wb, 3, ConvSpec::same(3, 1), rng)?,
                merge: Conv::new(params, &format!("{prefix}.merge"), 2 * wb, wb, 1, ConvSpec::same(1, 1), rng)?,
            })
        } else {
            None
        };
        let mut up = Vec::new();
        for l in (2..=cfg.depth).rev() {
            let (w_in, w_out) = (cfg.width(l) + cfg.width(l - 1), cfg.width(l - 1));
            up.push(Conv::new(params, &format!("{prefix}.up{l}"), w_in, w_out, 3, ConvSpec::same(3, 1), rng)?);
        }
        let out = Conv::new(params, &format!("{prefix}.out"), cfg.width(1) + cin, 1, 3, ConvSpec::same(3, 1), rng)?;
        Ok(Hourglass {
            down,
            bottleneck,
            attention,
            up,
            out,
        })
    }

    fn forward<T: Scalar>(
        &self,
        p: &[Var<T>],
        x: &Var<T>,
        grid_masks: Option<&[Array3<f32>]>,
        cfg: &GeneratorConfig,
    ) -> Result<Var<T>> {
        let mut skips = Vec::with_capacity(self.down.len());
        let mut h = x.clone();
        for conv in &self.down {
            h = lrelu(conv.forward(p, &h)?);
            skips.push(h.clone());
        }
        let enc = h.clone();
        for conv in &self.bottleneck {
            h = lrelu(conv.forward(p, &h)?);
        }
        if let (Some(branch), Some(masks)) = (&self.attention, grid_masks) {
            let a = lrelu(branch.pre.forward(p, &enc)?);
            let attended = attend_batch(&a, masks, cfg)?;
            let a = lrelu(branch.post.forward(p, &attended)?);
            h = lrelu(branch.merge.forward(p, &cat(&[h, a])?)?);
        }
        for (i, conv) in self.up.iter().enumerate() {
            let skip = &skips[skips.len() - 2 - i];
            h = lrelu(conv.forward(p, &cat(&[h.upsample2()?, skip.clone()])?)?);
        }
        Ok(self.out.forward(p, &cat(&[h.upsample2()?, x.clone()])?)?.tanh())
    }
}

/// Runs contextual attention sample by sample; samples whose grid mask has no
/// foreground or no background pass through unchanged.
fn attend_batch<T: Scalar>(a: &Var<T>, masks: &[Array3<f32>], cfg: &GeneratorConfig) -> Result<Var<T>> {
    let shape = a.shape().to_vec();
    if masks.len() != shape[0] {
        return Err(Error::Shape(format!("{} masks for batch of {}", masks.len(), shape[0])));
    }
    let patch = cfg.attention_patch_size.min(shape[2..].iter().copied().min().unwrap_or(1));
    let mut parts = Vec::with_capacity(shape[0]);
    for (n, m) in masks.iter().enumerate() {
        let sample = a.narrow(0, n, 1)?;
        let has_fg = m.iter().any(|&v| v != 0.0);
        let has_bg = m.iter().any(|&v| v == 0.0);
        if !(has_fg && has_bg) {
            parts.push(sample);
            continue;
        }
        let feats = sample.reshape(&shape[1..])?;
        let out = contextual_attention(&feats, m, patch, cfg.attention_softmax_scale)?;
        parts.push(out.features.reshape(&[1, shape[1], shape[2], shape[3], shape[4]])?);
    }
    Ok(Var::concat(&parts, 0)?)
}

/// Network structure; parameters live in a separate [`ParamSet`] so the same
/// generator runs in `f32` for training and `f64` for gradient checks.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    g1: Hourglass,
    g2: Hourglass,
}

pub struct GeneratorOutput<T: Scalar> {
    pub coarse: Var<T>,
    pub refined: Var<T>,
    pub composite: Var<T>,
}

/// Batched generator inputs. `mask` is binary; `label_map` holds the target
/// class value everywhere.
pub struct GeneratorInput<T: Scalar> {
    pub masked: Var<T>,
    pub mask: Tensor<T>,
    pub label_map: Var<T>,
}

impl<T: Scalar> GeneratorInput<T> {
    pub fn check(&self) -> Result<()> {
        let s = self.masked.shape();
        if s.len() != 5 || s[1] != 1 || self.mask.shape() != s || self.label_map.shape() != s {
            return Err(Error::Shape(format!(
                "generator inputs must share [N, 1, X, Y, Z]: masked {:?}, mask {:?}, label {:?}",
                s,
                self.mask.shape(),
                self.label_map.shape()
            )));
        }
        Ok(())
    }
}

impl Generator {
    pub fn new<T: Scalar>(config: GeneratorConfig, seed: u64) -> Result<(Self, ParamSet<T>)> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut rng = rng_for(seed, "generator-init", 0);
        let g1 = Hourglass::new(&mut params, "g1", 3, &config, false, &mut rng)?;
        let g2 = Hourglass::new(&mut params, "g2", 4, &config, config.use_attention, &mut rng)?;
        Ok((Generator { config, g1, g2 }, params))
    }

    fn check_params<T: Scalar>(&self, p: &[Var<T>]) -> Result<()> {
        let needed = self.g2.out.bias_slot() + 1;
        if p.len() != needed {
            return Err(Error::Shape(format!(
                "generator expects {needed} parameter tensors, got {}",
                p.len()
            )));
        }
        Ok(())
    }

    pub fn coarse_forward<T: Scalar>(&self, p: &[Var<T>], input: &GeneratorInput<T>) -> Result<Var<T>> {
        input.check()?;
        self.check_params(p)?;
        self.config.check_shape(spatial(input.masked.shape()))?;
        let mask = Var::constant(input.mask.clone());
        let x = cat(&[input.masked.clone(), mask, input.label_map.clone()])?;
        self.g1.forward(p, &x, None, &self.config)
    }

    pub fn refine_forward<T: Scalar>(
        &self,
        p: &[Var<T>],
        coarse: &Var<T>,
        input: &GeneratorInput<T>,
    ) -> Result<Var<T>> {
        input.check()?;
        self.check_params(p)?;
        if coarse.shape() != input.masked.shape() {
            return Err(Error::Shape(format!("coarse {:?} vs masked {:?}", coarse.shape(), input.masked.shape())));
        }
        self.config.check_shape(spatial(coarse.shape()))?;
        let mask = Var::constant(input.mask.clone());
        let x = cat(&[coarse.clone(), input.masked.clone(), mask, input.label_map.clone()])?;
        let grids = if self.config.use_attention {
            Some(grid_masks(&input.mask, self.config.depth)?)
        } else {
            None
        };
        self.g2.forward(p, &x, grids.as_deref(), &self.config)
    }

    pub fn generate<T: Scalar>(&self, p: &[Var<T>], input: &GeneratorInput<T>) -> Result<GeneratorOutput<T>> {
        let coarse = self.coarse_forward(p, input)?;
        let refined = self.refine_forward(p, &coarse, input)?;
        let composite = composite(&refined, &input.masked, &input.mask)?;
        Ok(GeneratorOutput {
            coarse,
            refined,
            composite,
        })
    }

    pub fn save(&self, dir: &Path, params: &ParamSet<f32>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let path = dir.join(CONFIG_FILE);
        let json = serde_json::to_string_pretty(&self.config).map_err(Error::json("generator config"))?;
        std::fs::write(&path, json).map_err(Error::io(&path))?;
        tensorgrad::save_params(dir, params)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, ParamSet<f32>)> {
        let path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(Error::io(&path))?;
        let config: GeneratorConfig = serde_json::from_str(&text).map_err(Error::json("generator config"))?;
        let (net, mut params) = Generator::new::<f32>(config, 0)?;
        tensorgrad::assign_params(&mut params, &tensorgrad::load_params(dir)?)?;
        Ok((net, params))
    }
}

fn spatial(shape: &[usize]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}

/// `mask·refined + (1 − mask)·masked`; exact on the context because the mask is binary.
pub fn composite<T: Scalar>(refined: &Var<T>, masked: &Var<T>, mask: &Tensor<T>) -> Result<Var<T>> {
    let keep = mask.map(|m| T::one() - m);
    Ok(refined.mul_const(mask)?.add(&masked.mul_const(&keep)?)?)
}

/// Max-pooled masks at the bottleneck resolution, one per sample.
pub fn grid_masks<T: Scalar>(mask: &Tensor<T>, depth: usize) -> Result<Vec<Array3<f32>>> {
    let s = mask.shape();
    let vol = s[2] * s[3] * s[4];
    mask.data()
        .chunks(vol)
        .map(|c| {
            let full = Array3::from_shape_vec(
                (s[2], s[3], s[4]),
                c.iter().map(|v| v.to_f64_lossy() as f32).collect(),
            )
            .expect("chunk matches mask volume");
            downsample_mask(&full, 1 << depth)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            base_channels: 2,
            depth: 1,
            attention_patch_size: 1,
            ..Default::default()
        }
    }

    fn input<T: Scalar>(shape: [usize; 3], seed: u64, label: f64) -> GeneratorInput<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let full = [1, 1, shape[0], shape[1], shape[2]];
        let n: usize = shape.iter().product();
        let c = shape.map(|d| (d as f64 - 1.0) / 2.0);
        let mut mask = Vec::with_capacity(n);
        let mut masked = Vec::with_capacity(n);
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                for k in 0..shape[2] {
                    let d = [i, j, k].iter().zip(&c).map(|(&a, b)| (a as f64 - b).powi(2)).sum::<f64>();
                    let m = if d <= (shape[2] as f64 / 3.0).powi(2) { 1.0 } else { 0.0 };
                    mask.push(T::from_f64_lossy(m));
                    masked.push(T::from_f64_lossy(rng.random_range(-1.0..1.0)));
                }
            }
        }
        GeneratorInput {
            masked: Var::constant(Tensor::new(&full, masked).unwrap()),
            mask: Tensor::new(&full, mask).unwrap(),
            label_map: Var::constant(Tensor::full(&full, T::from_f64_lossy(label))),
        }
    }

    #[test]
    fn zero_input_gives_finite_output() {
        let (g, p) = Generator::new::<f32>(GeneratorConfig::desk(), 1).unwrap();
        let full = [1, 1, 32, 32, 16];
        let zero = GeneratorInput {
            masked: Var::constant(Tensor::zeros(&full)),
            mask: Tensor::zeros(&full),
            label_map: Var::constant(Tensor::zeros(&full)),
        };
        let out = g.generate(&p.bind_frozen(), &zero).unwrap();
        assert!(out.coarse.value().all_finite() && out.refined.value().all_finite());
        assert!(out.refined.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn output_shape_matches_input() {
        let cfg = GeneratorConfig {
            base_channels: 2,
            ..GeneratorConfig::desk()
        };
        let (g, p) = Generator::new::<f32>(cfg, 3).unwrap();
        for shape in [[32, 32, 16], [64, 64, 32]] {
            let inp = input::<f32>(shape, 4, 1.0);
            let out = g.generate(&p.bind_frozen(), &inp).unwrap();
            for v in [&out.coarse, &out.refined, &out.composite] {
                assert_eq!(v.shape(), inp.masked.shape());
            }
        }
        assert!(g.coarse_forward(&p.bind_frozen(), &input::<f32>([30, 32, 16], 4, 1.0)).is_err());
    }

    #[test]
    fn composite_keeps_context_exactly() {
        let (g, p) = Generator::new::<f32>(GeneratorConfig::desk(), 5).unwrap();
        let inp = input::<f32>([32, 32, 16], 6, 1.0);
        let out = g.generate(&p.bind_frozen(), &inp).unwrap();
        for ((c, m), x) in out.composite.data().iter().zip(inp.mask.data()).zip(inp.masked.data()) {
            if *m == 0.0 {
                assert_eq!(c.to_bits(), x.to_bits());
            }
        }
        let empty = GeneratorInput {
            mask: Tensor::zeros(inp.mask.shape()),
            ..inp
        };
        let out = g.generate(&p.bind_frozen(), &empty).unwrap();
        assert_eq!(out.composite.data(), empty.masked.data());
    }

    #[test]
    fn refine_is_deterministic_and_attention_optional() {
        for use_attention in [true, false] {
            let cfg = GeneratorConfig {
                use_attention,
                ..GeneratorConfig::desk()
            };
            let (g, p) = Generator::new::<f32>(cfg, 7).unwrap();
            let inp = input::<f32>([16, 16, 8], 8, 2.0);
            let a = g.generate(&p.bind_frozen(), &inp).unwrap();
            let b = g.generate(&p.bind_frozen(), &inp).unwrap();
            assert_eq!(a.refined.data(), b.refined.data());
            assert!(a.refined.value().all_finite());
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let (_, a) = Generator::new::<f32>(GeneratorConfig::desk(), 11).unwrap();
        let (_, b) = Generator::new::<f32>(GeneratorConfig::desk(), 11).unwrap();
        let (_, c) = Generator::new::<f32>(GeneratorConfig::desk(), 12).unwrap();
        assert_eq!(a.tensors(), b.tensors());
        assert_ne!(a.tensors(), c.tensors());
    }

    fn fd_input_check(refine: bool) {
        let cfg = tiny();
        let (g, p) = Generator::new::<f64>(cfg, 21).unwrap();
        let base = input::<f64>([4, 4, 4], 22, 1.0);
        let probe = 21; // inside the mask
        assert_eq!(base.mask.data()[probe], 1.0);
        let run = |masked: Tensor<f64>| -> (f64, Vec<f64>) {
            let x = Var::param(masked);
            let inp = GeneratorInput {
                masked: x.clone(),
                mask: base.mask.clone(),
                label_map: base.label_map.clone(),
            };
            let pv = p.bind_frozen();
            let coarse = g.coarse_forward(&pv, &inp).unwrap();
            let out = if refine { g.refine_forward(&pv, &coarse, &inp).unwrap() } else { coarse };
            let s = out.sum();
            let gx = tensorgrad::grad(&s, &[&x], false).unwrap();
            (s.item(), gx[0].data().to_vec())
        };
        let (_, analytic) = run(base.masked.value().clone());
        let h = 1e-5;
        for idx in [probe, 0, 37] {
            let mut plus = base.masked.value().clone();
            plus.data_mut()[idx] += h;
            let mut minus = base.masked.value().clone();
            minus.data_mut()[idx] -= h;
            let fd = (run(plus).0 - run(minus).0) / (2.0 * h);
            let rel = (fd - analytic[idx]).abs() / fd.abs().max(analytic[idx].abs()).max(1e-6);
            assert!(rel < 1e-3, "voxel {idx}: fd {fd} vs analytic {}", analytic[idx]);
        }
    }

    #[test]
    fn coarse_input_gradient_matches_finite_differences() {
        fd_input_check(false);
    }

    #[test]
    fn refine_input_gradient_matches_finite_differences() {
        fd_input_check(true);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (g, p) = Generator::new::<f32>(GeneratorConfig::desk(), 31).unwrap();
        g.save(dir.path(), &p).unwrap();
        let (g2, p2) = Generator::load(dir.path()).unwrap();
        assert_eq!(g2.config, g.config);
        assert_eq!(p2.tensors(), p.tensors());
        assert_eq!(p2.names(), p.names());
    }
}
