//! Benign/malignant patch classification with a 3D residual network, the
//! three training regimes (raw, class-weighted loss, raw plus synthetic
//! minority patches) and metric reporting.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tensorgrad::{grad, no_grad, Adam, AdamConfig, ConvSpec, ParamSet, Tensor, Var};

use crate::dataset::{PatchDataset, Split};
use crate::error::{Error, Result};
use crate::labels::ClassLabel;
use crate::losses::cross_entropy;
use crate::nn::{global_avg_pool, stack_channels, Conv, Linear};
use crate::patch_pipeline::sample_trilinear;
use crate::seed::{derive_seed, rng_for};

pub const CONFIG_FILE: &str = "config.json";

/// Residual network layout. `widths` are per-stage output channels (the
/// inner width for bottleneck blocks, whose output is `4 × width`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub name: String,
    pub stem_channels: usize,
    pub block_counts: Vec<usize>,
    pub widths: Vec<usize>,
    pub bottleneck: bool,
    pub groups: usize,
}

impl Architecture {
    /// Two basic-block stages, 16 base channels.
    pub fn desk() -> Self {
        Architecture {
            name: "desk".into(),
            stem_channels: 16,
            block_counts: vec![1, 1],
            widths: vec![16, 32],
            bottleneck: false,
            groups: 1,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (blocks, groups, widths) = match name {
            "desk" => return Ok(Self::desk()),
            "resnet50" => (vec![3, 4, 6, 3], 1, vec![64, 128, 256, 512]),
            "resnet101" => (vec![3, 4, 23, 3], 1, vec![64, 128, 256, 512]),
            "resnet152" => (vec![3, 8, 36, 3], 1, vec![64, 128, 256, 512]),
            "resnext101" => (vec![3, 4, 23, 3], 32, vec![128, 256, 512, 1024]),
            other => {
                return Err(Error::Config(format!(
                    "unknown architecture `{other}` (expected desk, resnet50, resnet101, resnet152 or resnext101)"
                )))
            }
        };
        Ok(Architecture {
            name: name.into(),
            stem_channels: 64,
            block_counts: blocks,
            widths,
            bottleneck: true,
            groups,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_counts.is_empty()
            || self.block_counts.len() != self.widths.len()
            || self.block_counts.contains(&0)
            || self.widths.contains(&0)
            || self.stem_channels == 0
            || self.groups == 0
            || self.widths.iter().any(|w| w % self.groups != 0)
        {
            return Err(Error::Config(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Unweighted,
    ClassWeighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augmentation {
    /// Largest random shift per axis, in voxels.
    pub max_shift: [f64; 3],
    /// Isotropic zoom factor range about the patch centre.
    pub scale: (f64, f64),
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation {
            max_shift: [2.0, 2.0, 1.0],
            scale: (0.9, 1.1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub architecture: Architecture,
    pub pretrained_weights_path: Option<PathBuf>,
    pub loss_mode: LossMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub augmentation: Augmentation,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            architecture: Architecture::desk(),
            pretrained_weights_path: None,
            loss_mode: LossMode::Unweighted,
            epochs: 8,
            batch_size: 16,
            learning_rate: 1e-3,
            augmentation: Augmentation::default(),
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("batch_size ≥ 1, learning_rate > 0 and threshold in [0, 1] required".into()));
        }
        let (lo, hi) = self.augmentation.scale;
        if !(lo > 0.0 && lo <= hi) || self.augmentation.max_shift.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config(format!("invalid augmentation {:?}", self.augmentation)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ClassifierConfig = serde_json::from_str(text).map_err(Error::json("classifier config"))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
struct Block {
    convs: Vec<Conv>,
    shortcut: Option<Conv>,
    gain: usize,
}

/// 3D residual network producing `[N, 2]` logits (benign, malignant).
///
/// There is no normalisation layer; each residual branch is scaled by a
/// learned gain that starts at zero, so every block begins as its shortcut.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ClassifierConfig,
    stem: Conv,
    blocks: Vec<Block>,
    head: Linear,
}

impl Classifier {
    pub fn new(config: ClassifierConfig) -> Result<(Self, ParamSet<f32>)> {
        config.validate()?;
        let arch = &config.architecture;
        let mut rng = rng_for(config.seed, "classifier-init", 0);
        let mut p = ParamSet::new();
        let stem = Conv::new(&mut p, "stem", 1, arch.stem_channels, 3, ConvSpec::strided(3, 2), &mut rng)?;
        let mut blocks = Vec::new();
        let mut cin = arch.stem_channels;
        for (si, (&count, &width)) in arch.block_counts.iter().zip(&arch.widths).enumerate() {
            for bi in 0..count {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let name = format!("stage{}.block{bi}", si + 1);
                let (convs, cout) = if arch.bottleneck {
                    let out = 4 * width;
                    let mid = ConvSpec::strided(3, stride).with_groups(arch.groups);
                    (
                        vec![
                            Conv::new(&mut p, &format!("{name}.reduce"), cin, width, 1, ConvSpec::default(), &mut rng)?,
                            Conv::new(&mut p, &format!("{name}.conv"), width, width, 3, mid, &mut rng)?,
                            Conv::new(&mut p, &format!("{name}.expand"), width, out, 1, ConvSpec::default(), &mut rng)?,
                        ],
                        out,
                    )
                } else {
                    (
                        vec![
                            Conv::new(&mut p, &format!("{name}.conv1"), cin, width, 3, ConvSpec::strided(3, stride), &mut rng)?,
                            Conv::new(&mut p, &format!("{name}.conv2"), width, width, 3, ConvSpec::same(3, 1), &mut rng)?,
                        ],
                        width,
                    )
                };
                let shortcut = if stride != 1 || cin != cout {
                    let spec = ConvSpec {
                        stride,
                        ..ConvSpec::default()
                    };
                    Some(Conv::new(&mut p, &format!("{name}.shortcut"), cin, cout, 1, spec, &mut rng)?)
                } else {
                    None
                };
                let gain = p.push(format!("{name}.gain"), Tensor::zeros(&[1]))?;
                blocks.push(Block { convs, shortcut, gain });
                cin = cout;
            }
        }
        let head = Linear::new(&mut p, "head", cin, 2, &mut rng)?;
        let net = Classifier {
            config,
            stem,
            blocks,
            head,
        };
        let mut params = p;
        if let Some(path) = net.config.pretrained_weights_path.clone() {
            net.load_pretrained(&mut params, &path)?;
        }
        Ok((net, params))
    }

    /// Loads pretrained weights; a 3-channel stem kernel is summed over its
    /// input channels to fit single-channel patches.
    fn load_pretrained(&self, params: &mut ParamSet<f32>, dir: &Path) -> Result<()> {
        if !dir.exists() {
            return Err(Error::Config(format!("pretrained weights {} not found", dir.display())));
        }
        let mut src = tensorgrad::load_params::<f32>(dir)?;
        if let Some(slot) = src.slot("stem.weight") {
            let w = src.get(slot);
            let s = w.shape().to_vec();
            if s.len() == 5 && s[1] == 3 {
                let k = s[2] * s[3] * s[4];
                let data: Vec<f32> = (0..s[0])
                    .flat_map(|o| {
                        let base = o * 3 * k;
                        let wd = w.data();
                        (0..k).map(move |i| wd[base + i] + wd[base + k + i] + wd[base + 2 * k + i])
                    })
                    .collect();
                *src.get_mut(slot) = Tensor::new(&[s[0], 1, s[2], s[3], s[4]], data)?;
            }
        }
        tensorgrad::assign_params(params, &src)?;
        Ok(())
    }

    pub fn forward(&self, p: &[Var<f32>], x: &Var<f32>) -> Result<Var<f32>> {
        if x.shape().len() != 5 || x.shape()[1] != 1 {
            return Err(Error::Shape(format!("classifier expects [N, 1, X, Y, Z], got {:?}", x.shape())));
        }
        let mut h = self.stem.forward(p, x)?.relu();
        for b in &self.blocks {
            let mut r = h.clone();
            for (i, conv) in b.convs.iter().enumerate() {
                r = conv.forward(p, &r)?;
                if i + 1 < b.convs.len() {
                    r = r.relu();
                }
            }
            let skip = match &b.shortcut {
                Some(s) => s.forward(p, &h)?,
                None => h,
            };
            h = skip.add(&r.mul(&p[b.gain].fill(r.shape())?)?)?.relu();
        }
        self.head.forward(p, &global_avg_pool(&h)?)
    }

    /// Probability of the malignant class per patch.
    pub fn predict(&self, params: &ParamSet<f32>, patches: &[&Array3<f32>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(32) {
            let x = stack_channels::<f32>(&chunk.iter().map(|p| vec![*p]).collect::<Vec<_>>())?;
            let probs = no_grad(|| -> Result<Tensor<f32>> {
                Ok(self.forward(&params.bind_frozen(), &Var::constant(x))?.softmax_rows()?.value().clone())
            })?;
            out.extend(probs.data().chunks(2).map(|r| r[1] as f64));
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path, params: &ParamSet<f32>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let path = dir.join(CONFIG_FILE);
        let mut cfg = self.config.clone();
        cfg.pretrained_weights_path = None;
        let json = serde_json::to_string_pretty(&cfg).map_err(Error::json("classifier config"))?;
        std::fs::write(&path, json).map_err(Error::io(&path))?;
        tensorgrad::save_params(dir, params)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, ParamSet<f32>)> {
        let path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(Error::io(&path))?;
        let config = ClassifierConfig::from_json(&text)?;
        let (net, mut params) = Classifier::new(config)?;
        tensorgrad::assign_params(&mut params, &tensorgrad::load_params(dir)?)?;
        Ok((net, params))
    }
}

/// One labelled patch for classification.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub patch: Array3<f32>,
    pub label: ClassLabel,
}

/// Inverse class frequencies scaled to mean 1, indexed by binary class.
pub fn inverse_frequency_weights(counts: [usize; 2]) -> Result<[f64; 2]> {
    if counts.contains(&0) {
        return Err(Error::Validation(format!("both classes are needed for class weights, got {counts:?}")));
    }
    let inv = counts.map(|c| 1.0 / c as f64);
    let s = inv[0] + inv[1];
    Ok(inv.map(|v| 2.0 * v / s))
}

/// Mean of `weight[label] · −log softmax(logits)[label]` over `[N, 2]` logits.
pub fn weighted_ce(logits: &Var<f32>, labels: &[ClassLabel], weights: [f64; 2]) -> Result<Var<f32>> {
    let targets: Vec<usize> = labels.iter().map(|l| l.binary_index()).collect();
    cross_entropy(logits, &targets, Some(&weights))
}

/// Area under the ROC curve by the trapezoidal rule over distinct score
/// thresholds. Tied scores contribute half, so the result equals the
/// Mann–Whitney statistic exactly.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), positive.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation("AUC scores must not be NaN".into()));
    }
    let p = positive.iter().filter(|&&b| b).count() as u64;
    let n = positive.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(Error::Validation("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // Twice the area in units of one (positive, negative) pair.
    let (mut tp, mut fp, mut area2) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let (mut dtp, mut dfp) = (0u64, 0u64);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        area2 += dfp * (2 * tp + dtp);
        tp += dtp;
        fp += dfp;
    }
    debug_assert_eq!((tp, fp), (p, n));
    Ok(area2 as f64 / (2 * p * n) as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub auc: f64,
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n: usize,
}

impl MetricsReport {
    /// Malignant is the positive class; `probs` are P(malignant). SEN and SPE
    /// are 0 when their class is absent.
    pub fn from_scores(probs: &[f64], labels: &[ClassLabel], threshold: f64) -> Result<Self> {
        if probs.is_empty() || probs.len() != labels.len() {
            return Err(Error::Validation(format!("{} scores for {} labels", probs.len(), labels.len())));
        }
        let positive: Vec<bool> = labels.iter().map(|l| l.is_malignant()).collect();
        let mut m = MetricsReport {
            n: probs.len(),
            ..Default::default()
        };
        for (&p, &pos) in probs.iter().zip(&positive) {
            match (p >= threshold, pos) {
                (true, true) => m.tp += 1,
                (false, false) => m.tn += 1,
                (true, false) => m.fp += 1,
                (false, true) => m.fn_ += 1,
            }
        }
        m.acc = (m.tp + m.tn) as f64 / m.n as f64;
        m.sen = if m.tp + m.fn_ > 0 { m.tp as f64 / (m.tp + m.fn_) as f64 } else { 0.0 };
        m.spe = if m.tn + m.fp > 0 { m.tn as f64 / (m.tn + m.fp) as f64 } else { 0.0 };
        m.auc = auc(probs, &positive)?;
        Ok(m)
    }
}

pub fn evaluate(net: &Classifier, params: &ParamSet<f32>, examples: &[Example], threshold: f64) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty split".into()));
    }
    let patches: Vec<&Array3<f32>> = examples.iter().map(|e| &e.patch).collect();
    let probs = net.predict(params, &patches)?;
    let labels: Vec<ClassLabel> = examples.iter().map(|e| e.label).collect();
    MetricsReport::from_scores(&probs, &labels, threshold)
}

/// Random shift and isotropic zoom about the patch centre, resampled
/// trilinearly with edge clamping; the output keeps the input shape.
pub fn augment(patch: &Array3<f32>, aug: &Augmentation, rng: &mut impl Rng) -> Array3<f32> {
    let shift: [f64; 3] = std::array::from_fn(|a| {
        let m = aug.max_shift[a];
        if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 }
    });
    let (lo, hi) = aug.scale;
    let zoom = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let (x, y, z) = patch.dim();
    let dims = [x, y, z];
    let c: [f64; 3] = std::array::from_fn(|a| (dims[a] as f64 - 1.0) / 2.0);
    Array3::from_shape_fn((x, y, z), |(i, j, k)| {
        let v: [f64; 3] = std::array::from_fn(|a| {
            let o = [i, j, k][a] as f64;
            ((o - c[a]) / zoom + c[a] + shift[a]).clamp(0.0, dims[a] as f64 - 1.0)
        });
        sample_trilinear(patch, v).expect("clamped inside the grid")
    })
}

/// Index of the highest value; ties go to the earliest.
pub fn select_best(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub train_loss: Vec<f64>,
    pub val_auc: Vec<f64>,
    /// 1-based epoch of the selected model; 0 when no epoch ran.
    pub best_epoch: usize,
}

/// Trains with on-the-fly augmentation and keeps the parameters with the
/// best validation AUC.
pub fn train_classifier(
    train: &[Example],
    val: &[Example],
    config: &ClassifierConfig,
) -> Result<(Classifier, ParamSet<f32>, History)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Validation("classifier training needs non-empty train and val splits".into()));
    }
    let (net, mut params) = Classifier::new(config.clone())?;
    let mut history = History::default();
    if config.epochs == 0 {
        return Ok((net, params, history));
    }
    let counts = [
        train.iter().filter(|e| !e.label.is_malignant()).count(),
        train.iter().filter(|e| e.label.is_malignant()).count(),
    ];
    let weights = match config.loss_mode {
        LossMode::Unweighted => [1.0, 1.0],
        LossMode::ClassWeighted => inverse_frequency_weights(counts)?,
    };
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        &params,
    );
    let mut best = params.clone();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(config.seed, "classifier-shuffle", epoch as u64));
        let mut aug_rng = rng_for(config.seed, "classifier-augment", epoch as u64);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let patches: Vec<Array3<f32>> = chunk
                .iter()
                .map(|&i| augment(&train[i].patch, &config.augmentation, &mut aug_rng))
                .collect();
            let labels: Vec<ClassLabel> = chunk.iter().map(|&i| train[i].label).collect();
            let x = stack_channels::<f32>(&patches.iter().map(|p| vec![p]).collect::<Vec<_>>())?;
            let p = params.bind();
            let logits = net.forward(&p, &Var::constant(x))?;
            let loss = weighted_ce(&logits, &labels, weights)?;
            let value = loss.item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    term: "classifier cross entropy".into(),
                    step: epoch as u64,
                });
            }
            loss_sum += value * chunk.len() as f64;
            let refs: Vec<&Var<f32>> = p.iter().collect();
            let grads: Vec<Tensor<f32>> = grad(&loss, &refs, false)?.into_iter().map(|g| g.value().clone()).collect();
            adam.step(&mut params, &grads)?;
        }
        let m = evaluate(&net, &params, val, config.threshold)?;
        history.train_loss.push(loss_sum / train.len() as f64);
        history.val_auc.push(m.auc);
        if select_best(&history.val_auc) == Some(epoch) {
            best = params.clone();
            history.best_epoch = epoch + 1;
        }
        log::debug!("classifier epoch {}: loss {:.4} val auc {:.4}", epoch + 1, history.train_loss[epoch], m.auc);
    }
    Ok((net, best, history))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Raw,
    RawWeighted,
    RawSynthesis,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Raw, Regime::RawWeighted, Regime::RawSynthesis];

    pub fn title(self) -> &'static str {
        match self {
            Regime::Raw => "Raw",
            Regime::RawWeighted => "Raw + Weighted Loss",
            Regime::RawSynthesis => "Raw + Synthesis",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "raw" => Ok(Regime::Raw),
            "raw_weighted" => Ok(Regime::RawWeighted),
            "raw_synthesis" => Ok(Regime::RawSynthesis),
            _ => Err(Error::Validation(format!("regime must be raw, raw-weighted or raw-synthesis, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Raw => "raw",
            Regime::RawWeighted => "raw-weighted",
            Regime::RawSynthesis => "raw-synthesis",
        })
    }
}

/// Loads the raw patches of one split.
pub fn load_examples(ds: &PatchDataset, split: Split) -> Result<Vec<Example>> {
    ds.split(split)
        .map(|(_, e)| {
            Ok(Example {
                patch: ds.load_patch(e)?.voxels().clone(),
                label: e.label,
            })
        })
        .collect()
}

/// Data for one regime: training examples (with synthetic ones appended for
/// `RawSynthesis`), the validation split, and the loss mode.
pub fn regime_data(
    data: &PatchDataset,
    synthetic: Option<&PatchDataset>,
    regime: Regime,
) -> Result<(Vec<Example>, Vec<Example>, LossMode)> {
    let mut train = load_examples(data, Split::Train)?;
    let val = load_examples(data, Split::Val)?;
    let mode = match regime {
        Regime::Raw => LossMode::Unweighted,
        Regime::RawWeighted => LossMode::ClassWeighted,
        Regime::RawSynthesis => {
            let syn = synthetic.ok_or_else(|| Error::Validation("raw-synthesis needs a synthetic patch directory".into()))?;
            if syn.entries.is_empty() {
                return Err(Error::Validation("synthetic patch directory is empty".into()));
            }
            for e in &syn.entries {
                train.push(Example {
                    patch: syn.load_patch(e)?.voxels().clone(),
                    label: e.label,
                });
            }
            LossMode::Unweighted
        }
    };
    Ok((train, val, mode))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: MetricsReport,
    pub std_acc: f64,
    pub std_sen: f64,
    pub std_spe: f64,
    pub std_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub regime: Regime,
    pub architecture: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<MetricsReport>,
    pub best_epochs: Vec<usize>,
    pub summary: Summary,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

pub fn summarize(reports: &[MetricsReport]) -> Summary {
    let col = |f: fn(&MetricsReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    let (acc, std_acc) = col(|r| r.acc);
    let (sen, std_sen) = col(|r| r.sen);
    let (spe, std_spe) = col(|r| r.spe);
    let (auc, std_auc) = col(|r| r.auc);
    let sum = |f: fn(&MetricsReport) -> usize| reports.iter().map(f).sum::<usize>() / reports.len().max(1);
    Summary {
        mean: MetricsReport {
            acc,
            sen,
            spe,
            auc,
            tp: sum(|r| r.tp),
            tn: sum(|r| r.tn),
            fp: sum(|r| r.fp),
            fn_: sum(|r| r.fn_),
            n: sum(|r| r.n),
        },
        std_acc,
        std_sen,
        std_spe,
        std_auc,
    }
}

/// Trains one classifier per seed under `regime` and evaluates each on the
/// test split.
pub fn run_experiment(
    data: &PatchDataset,
    synthetic: Option<&PatchDataset>,
    regime: Regime,
    config: &ClassifierConfig,
    seeds: &[u64],
) -> Result<ExperimentResult> {
    run_experiment_with(data, synthetic, regime, config, seeds, |_, _, _| Ok(()))
}

/// As [`run_experiment`], handing each selected model to `on_model` with its seed.
pub fn run_experiment_with(
    data: &PatchDataset,
    synthetic: Option<&PatchDataset>,
    regime: Regime,
    config: &ClassifierConfig,
    seeds: &[u64],
    mut on_model: impl FnMut(u64, &Classifier, &ParamSet<f32>) -> Result<()>,
) -> Result<ExperimentResult> {
    if seeds.is_empty() {
        return Err(Error::Validation("at least one seed is required".into()));
    }
    let (train, val, mode) = regime_data(data, synthetic, regime)?;
    let test = load_examples(data, Split::Test)?;
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut best_epochs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = ClassifierConfig {
            loss_mode: mode,
            seed: derive_seed(seed, "classifier-run", 0),
            ..config.clone()
        };
        let (net, params, hist) = train_classifier(&train, &val, &cfg)?;
        on_model(seed, &net, &params)?;
        per_seed.push(evaluate(&net, &params, &test, cfg.threshold)?);
        best_epochs.push(hist.best_epoch);
        log::info!("{regime} seed {seed}: test auc {:.4}", per_seed.last().map_or(0.0, |m| m.auc));
    }
    Ok(ExperimentResult {
        regime,
        architecture: config.architecture.name.clone(),
        seeds: seeds.to_vec(),
        summary: summarize(&per_seed),
        per_seed,
        best_epochs,
    })
}

/// Table with one row group per regime and mean ± sample standard deviation
/// over seeds for each metric.
pub fn format_table(results: &[ExperimentResult]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<22} {:<12} {:>15} {:>15} {:>15} {:>15}", "Regime", "Model", "ACC", "SEN", "SPE", "AUC");
    for r in results {
        let s = &r.summary;
        let cell = |m: f64, sd: f64| format!("{m:.4} ± {sd:.4}");
        let _ = writeln!(
            out,
            "{:<22} {:<12} {:>15} {:>15} {:>15} {:>15}",
            r.regime.title(),
            r.architecture,
            cell(s.mean.acc, s.std_acc),
            cell(s.mean.sen, s.std_sen),
            cell(s.mean.spe, s.std_spe),
            cell(s.mean.auc, s.std_auc)
        );
    }
    out
}
