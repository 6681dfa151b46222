//! Staged WGAN-GP training of the in-painting generator against local and
//! global critics, checkpointing, and bulk class-conditioned synthesis.
//!
//! Phases by step: reconstruction only, then (optionally) critic warm-up with
//! the generator still on reconstruction, then adversarial training with
//! several critic updates per generator update, then adversarial plus
//! domain-classification terms.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tensorgrad::{grad, no_grad, Adam, AdamConfig, ParamSet, Scalar, SparseMap, Tensor, Var};

use crate::critics::{label_map, local_crop_map, Critic, CriticConfig, InputKind};
use crate::error::{Error, Result};
use crate::inpaint_generator::{Generator, GeneratorConfig, GeneratorInput, GeneratorOutput};
use crate::labels::{ClassLabel, DomainLabel};
use crate::losses::{
    aux_class_loss, critic_objective, generator_objective, gradient_penalty_var, recon_loss, wgan_adv, LossReport,
    LossWeights,
};
use crate::nn::{stack_channels, unstack};
use crate::patch_pipeline::{label_value, NoiseParams, PatchSample};
use crate::seed::{derive_seed, rng_for};

pub const STATE_FILE: &str = "state.json";
pub const LOG_FILE: &str = "train_log.ndjson";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_DIR: &str = "final";

const RUNNING_DECAY: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub weights: LossWeights,
    pub critic_steps_per_gen_step: usize,
    pub recon_only_steps: usize,
    pub adv_start_step: usize,
    pub cls_start_step: usize,
    /// Starts the class terms early once the running `l_recon` drops below
    /// this value (only after `adv_start_step`).
    pub cls_recon_threshold: Option<f64>,
    pub total_steps: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub generator: GeneratorConfig,
    pub critic_local: CriticConfig,
    pub critic_global: CriticConfig,
    pub optim_g: AdamConfig,
    pub optim_d: AdamConfig,
    pub noise: NoiseParams,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            weights: LossWeights::default(),
            critic_steps_per_gen_step: 5,
            recon_only_steps: 1000,
            adv_start_step: 1000,
            cls_start_step: 3000,
            cls_recon_threshold: None,
            total_steps: 5000,
            batch_size: 8,
            checkpoint_every: 500,
            generator: GeneratorConfig::default(),
            critic_local: CriticConfig {
                input_kind: InputKind::Local,
                ..CriticConfig::default()
            },
            critic_global: CriticConfig::default(),
            optim_g: AdamConfig::default(),
            optim_d: AdamConfig::default(),
            noise: NoiseParams::default(),
            seed: 0,
        }
    }
}

impl GanConfig {
    /// Single-core schedule for 32×32×16 phantom patches.
    pub fn desk() -> Self {
        GanConfig {
            critic_steps_per_gen_step: 2,
            recon_only_steps: 200,
            adv_start_step: 200,
            cls_start_step: 400,
            total_steps: 600,
            batch_size: 4,
            checkpoint_every: 200,
            generator: GeneratorConfig::desk(),
            critic_local: CriticConfig::desk(InputKind::Local),
            critic_global: CriticConfig::desk(InputKind::Global),
            optim_g: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            optim_d: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.generator.validate()?;
        self.critic_local.validate()?;
        self.critic_global.validate()?;
        self.noise.validate()?;
        if !(self.recon_only_steps <= self.adv_start_step
            && self.adv_start_step <= self.cls_start_step
            && self.cls_start_step <= self.total_steps)
        {
            return Err(Error::Config(format!(
                "phase boundaries must satisfy recon_only ≤ adv_start ≤ cls_start ≤ total, got {} ≤ {} ≤ {} ≤ {}",
                self.recon_only_steps, self.adv_start_step, self.cls_start_step, self.total_steps
            )));
        }
        if self.critic_steps_per_gen_step == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "critic_steps_per_gen_step, batch_size and checkpoint_every must be ≥ 1".into(),
            ));
        }
        if self.critic_local.input_kind != InputKind::Local || self.critic_global.input_kind != InputKind::Global {
            return Err(Error::Config("critic_local and critic_global must have input_kind local and global".into()));
        }
        for o in [&self.optim_g, &self.optim_d] {
            if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
                return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: GanConfig = serde_json::from_str(text).map_err(Error::json("GAN config"))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Recon,
    CriticWarmup,
    Adversarial,
    Classified,
}

impl Phase {
    pub fn critics_train(self) -> bool {
        self != Phase::Recon
    }

    pub fn generator_adversarial(self) -> bool {
        matches!(self, Phase::Adversarial | Phase::Classified)
    }

    pub fn class_terms(self) -> bool {
        self == Phase::Classified
    }
}

/// Counters and running averages that travel with a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCounters {
    pub step: u64,
    pub critic_updates: u64,
    pub generator_updates: u64,
    pub generate_calls: u64,
    pub composite_violations: u64,
    pub cls_triggered_at: Option<u64>,
    pub running: LossReport,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    counters: TrainCounters,
    patch_shape: [usize; 3],
    adam_steps: [u64; 3],
    config: GanConfig,
}

#[derive(Debug)]
struct Net {
    critic: Critic,
    params: ParamSet<f32>,
    adam: Adam<f32>,
}

/// Training state: networks, parameters, optimizers and counters.
#[derive(Debug)]
pub struct GanTrainer {
    pub config: GanConfig,
    pub patch_shape: [usize; 3],
    pub generator: Generator,
    pub g_params: ParamSet<f32>,
    g_adam: Adam<f32>,
    local: Net,
    global: Net,
    pub counters: TrainCounters,
}

/// Batched tensors for one training batch.
pub struct Batch<T: Scalar> {
    pub raw: Tensor<T>,
    pub mask: Tensor<T>,
    /// Label-map value per sample.
    pub labels: Vec<f64>,
    /// Domain index per sample.
    pub domains: Vec<usize>,
    /// Local-critic crop of every sample.
    pub crop: Rc<SparseMap<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(samples: &[PatchSample], local_shape: [usize; 3], margin: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Validation("training batch is empty".into()));
        }
        let raw = stack_channels(&samples.iter().map(|s| vec![&s.raw]).collect::<Vec<_>>())?;
        let mask = stack_channels(&samples.iter().map(|s| vec![&s.mask]).collect::<Vec<_>>())?;
        let masks: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
        Ok(Batch {
            raw,
            mask,
            labels: samples.iter().map(|s| label_value(s.label) as f64).collect(),
            domains: samples.iter().map(|s| s.label.domain().index()).collect(),
            crop: Rc::new(local_crop_map(&masks, margin, local_shape)?),
        })
    }

    pub fn input(&self, masked: Var<T>) -> GeneratorInput<T> {
        let s = self.raw.shape();
        GeneratorInput {
            masked,
            mask: self.mask.clone(),
            label_map: Var::constant(label_map(&self.labels, [s[2], s[3], s[4]])),
        }
    }
}

/// Loss terms of one critic on one batch.
pub struct CriticTerms<T: Scalar> {
    pub l_adv: Var<T>,
    pub gp: Var<T>,
    pub l_cls: Var<T>,
    pub objective: Var<T>,
}

/// Objective of one critic on `real` patches against `fake` composites.
/// Class targets are the true domains followed by `Fake` for every composite.
#[allow(clippy::too_many_arguments)]
pub fn critic_terms<T: Scalar>(
    critic: &Critic,
    p: &[Var<T>],
    batch: &Batch<T>,
    real: &Var<T>,
    fake: &Var<T>,
    w: &LossWeights,
    class_terms: bool,
    gp_seed: u64,
) -> Result<CriticTerms<T>> {
    let real_in = critic.prepare(real, Some(&batch.crop))?;
    let fake_in = critic.prepare(fake, Some(&batch.crop))?;
    let lm = Var::constant(label_map::<T>(&batch.labels, critic.input_shape));
    let out_r = critic.forward(p, &real_in, &lm)?;
    let out_f = critic.forward(p, &fake_in, &lm)?;
    let gp = gradient_penalty_var(|x| Ok(critic.forward(p, x, &lm)?.wscore), &real_in, &fake_in, w.lambda_gp, gp_seed)?;
    let l_adv = wgan_adv(&out_r.wscore, &out_f.wscore, &gp)?;
    let l_cls = if class_terms {
        let n = batch.domains.len();
        let mut targets = batch.domains.clone();
        targets.extend(std::iter::repeat_n(DomainLabel::Fake.index(), n));
        aux_class_loss(&Var::concat(&[out_r.class_logits, out_f.class_logits], 0)?, &targets)?
    } else {
        Var::scalar(T::zero())
    };
    let objective = critic_objective(&l_adv, &l_cls, w)?;
    Ok(CriticTerms {
        l_adv,
        gp,
        l_cls,
        objective,
    })
}

/// Generator outputs and loss terms on one batch.
pub struct GeneratorTerms<T: Scalar> {
    pub output: GeneratorOutput<T>,
    pub l_masked: Var<T>,
    pub l_global: Var<T>,
    pub l_recon: Var<T>,
    pub l_adv: Var<T>,
    pub l_cls: Var<T>,
    pub total: Var<T>,
}

/// Generator objective: reconstruction of both stages, plus the critics'
/// mean fake score and domain loss on the composite when `phase` enables them.
/// Both adversarial and class terms average the local and global critics.
pub fn generator_terms<T: Scalar>(
    generator: &Generator,
    p: &[Var<T>],
    critics: [(&Critic, &[Var<T>]); 2],
    batch: &Batch<T>,
    masked: Var<T>,
    w: &LossWeights,
    phase: Phase,
) -> Result<GeneratorTerms<T>> {
    let output = generator.generate(p, &batch.input(masked))?;
    let coarse = recon_loss(&output.coarse, &batch.raw, &batch.mask, w.lambda1)?;
    let fine = recon_loss(&output.refined, &batch.raw, &batch.mask, w.lambda1)?;
    let l_masked = coarse.l_masked.add(&fine.l_masked)?;
    let l_global = coarse.l_global.add(&fine.l_global)?;
    let l_recon = coarse.l_recon.add(&fine.l_recon)?;
    let half = T::from_f64_lossy(0.5);
    let (l_adv, l_cls) = if phase.generator_adversarial() {
        let mut adv = Vec::with_capacity(2);
        let mut cls = Vec::with_capacity(2);
        for (critic, cp) in critics {
            let x = critic.prepare(&output.composite, Some(&batch.crop))?;
            let lm = Var::constant(label_map::<T>(&batch.labels, critic.input_shape));
            let o = critic.forward(cp, &x, &lm)?;
            adv.push(o.wscore.mean());
            if phase.class_terms() {
                cls.push(aux_class_loss(&o.class_logits, &batch.domains)?);
            }
        }
        let adv = adv[0].add(&adv[1])?.scale(half);
        let cls = if cls.is_empty() { Var::scalar(T::zero()) } else { cls[0].add(&cls[1])?.scale(half) };
        (adv, cls)
    } else {
        (Var::scalar(T::zero()), Var::scalar(T::zero()))
    };
    let total = generator_objective(&l_adv, &l_cls, &l_recon, w)?;
    Ok(GeneratorTerms {
        output,
        l_masked,
        l_global,
        l_recon,
        l_adv,
        l_cls,
        total,
    })
}

/// True when `composite` equals `masked` bit-for-bit wherever `mask` is 0.
pub fn context_preserved(composite: &Tensor<f32>, masked: &Tensor<f32>, mask: &Tensor<f32>) -> bool {
    composite
        .data()
        .iter()
        .zip(masked.data())
        .zip(mask.data())
        .all(|((c, x), m)| *m != 0.0 || c.to_bits() == x.to_bits())
}

fn mean(a: f64, b: f64) -> f64 {
    0.5 * (a + b)
}

impl GanTrainer {
    pub fn new(config: GanConfig, patch_shape: [usize; 3]) -> Result<Self> {
        config.validate()?;
        config.generator.check_shape(patch_shape)?;
        let (generator, g_params) = Generator::new::<f32>(config.generator.clone(), config.seed)?;
        let net = |cfg: &CriticConfig| -> Result<Net> {
            let (critic, params) = Critic::new::<f32>(cfg.clone(), patch_shape, config.seed)?;
            let adam = Adam::new(config.optim_d, &params);
            Ok(Net { critic, params, adam })
        };
        Ok(GanTrainer {
            local: net(&config.critic_local)?,
            global: net(&config.critic_global)?,
            g_adam: Adam::new(config.optim_g, &g_params),
            generator,
            g_params,
            patch_shape,
            counters: TrainCounters::default(),
            config,
        })
    }

    pub fn phase_at(&self, step: u64) -> Phase {
        let c = &self.config;
        let step = step as usize;
        let triggered = self.counters.cls_triggered_at.is_some_and(|s| s as usize <= step);
        if step < c.recon_only_steps {
            Phase::Recon
        } else if step < c.adv_start_step {
            Phase::CriticWarmup
        } else if step < c.cls_start_step && !triggered {
            Phase::Adversarial
        } else {
            Phase::Classified
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase_at(self.counters.step)
    }

    pub fn critic_params(&self) -> (&ParamSet<f32>, &ParamSet<f32>) {
        (&self.local.params, &self.global.params)
    }

    fn noise_seed(&self, purpose: &str, k: u64) -> u64 {
        derive_seed(self.config.seed, purpose, self.counters.step * 1024 + k)
    }

    fn renoise(&self, batch: &Batch<f32>, seed: u64) -> Result<Tensor<f32>> {
        let n = batch.raw.shape()[0];
        let vol = batch.raw.len() / n;
        let noise = self.config.noise;
        let mut rng = rng_for(seed, "train-noise", 0);
        let mut out = batch.raw.data().to_vec();
        for (v, m) in out.iter_mut().zip(batch.mask.data()) {
            if *m != 0.0 {
                *v = rand::Rng::random_range(&mut rng, noise.low..noise.high);
            }
        }
        debug_assert_eq!(out.len(), n * vol);
        Ok(Tensor::new(batch.raw.shape(), out)?)
    }

    fn check_composite(&mut self, composite: &Tensor<f32>, masked: &Tensor<f32>, mask: &Tensor<f32>) {
        self.counters.generate_calls += 1;
        if !context_preserved(composite, masked, mask) {
            self.counters.composite_violations += 1;
        }
    }

    /// One critic update for both critics on freshly generated fakes.
    fn critic_step(&mut self, batch: &Batch<f32>, k: u64, class_terms: bool, report: &mut LossReport) -> Result<()> {
        let masked = self.renoise(batch, self.noise_seed("critic-noise", k))?;
        let input = batch.input(Var::constant(masked.clone()));
        let fake = no_grad(|| -> Result<Tensor<f32>> {
            Ok(self.generator.generate(&self.g_params.bind_frozen(), &input)?.composite.value().clone())
        })?;
        self.check_composite(&fake, &masked, &batch.mask);
        let w = self.config.weights.clone();
        let real = Var::constant(batch.raw.clone());
        let fake = Var::constant(fake);
        let mut terms = Vec::with_capacity(2);
        let mut updates = Vec::with_capacity(2);
        for (slot, net) in [("local", &self.local), ("global", &self.global)] {
            let p = net.params.bind();
            let gp_seed = self.noise_seed(&format!("gp-{slot}"), k);
            let t = critic_terms(&net.critic, &p, batch, &real, &fake, &w, class_terms, gp_seed)?;
            terms.push((t.l_adv.item() as f64, t.gp.item() as f64, t.l_cls.item() as f64, t.objective.item() as f64));
            let refs: Vec<&Var<f32>> = p.iter().collect();
            let grads: Vec<Tensor<f32>> =
                grad(&t.objective, &refs, false)?.into_iter().map(|g| g.value().clone()).collect();
            updates.push(grads);
        }
        report.l_adv_local = terms[0].0;
        report.l_adv_global = terms[1].0;
        report.gp_local = terms[0].1;
        report.gp_global = terms[1].1;
        report.l_cls_d = mean(terms[0].2, terms[1].2);
        report.l_d_total = mean(terms[0].3, terms[1].3);
        if let Some(term) = report.first_non_finite() {
            return Err(Error::NonFinite {
                term: term.into(),
                step: self.counters.step,
            });
        }
        let mut updates = updates.into_iter();
        for net in [&mut self.local, &mut self.global] {
            net.adam.step(&mut net.params, &updates.next().expect("two critics"))?;
        }
        self.counters.critic_updates += 1;
        Ok(())
    }

    /// One generator update, preceded by the critic updates of the current phase.
    pub fn train_step(&mut self, samples: &[PatchSample]) -> Result<LossReport> {
        let phase = self.phase();
        let batch = Batch::<f32>::new(samples, self.config.critic_local.local_shape, self.config.critic_local.local_crop_margin)?;
        if batch.raw.shape()[2..] != self.patch_shape {
            return Err(Error::Shape(format!("batch patches {:?} vs trainer {:?}", &batch.raw.shape()[2..], self.patch_shape)));
        }
        let mut report = LossReport::default();
        if phase.critics_train() {
            for k in 0..self.config.critic_steps_per_gen_step {
                self.critic_step(&batch, k as u64, phase.class_terms(), &mut report)?;
            }
        }

        let w = self.config.weights.clone();
        let masked = self.renoise(&batch, self.noise_seed("generator-noise", 0))?;
        let p = self.g_params.bind();
        let (lp, gp) = (self.local.params.bind_frozen(), self.global.params.bind_frozen());
        let critics = [(&self.local.critic, lp.as_slice()), (&self.global.critic, gp.as_slice())];
        let t = generator_terms(&self.generator, &p, critics, &batch, Var::constant(masked.clone()), &w, phase)?;
        self.check_composite(t.output.composite.value(), &masked, &batch.mask);
        let total = t.total;
        report.l_masked = t.l_masked.item() as f64;
        report.l_global = t.l_global.item() as f64;
        report.l_recon = t.l_recon.item() as f64;
        report.l_cls_g = t.l_cls.item() as f64;
        report.l_g_total = total.item() as f64;
        if let Some(term) = report.first_non_finite() {
            return Err(Error::NonFinite {
                term: term.into(),
                step: self.counters.step,
            });
        }
        let refs: Vec<&Var<f32>> = p.iter().collect();
        let grads: Vec<Tensor<f32>> = grad(&total, &refs, false)?.into_iter().map(|g| g.value().clone()).collect();
        self.g_adam.step(&mut self.g_params, &grads)?;
        self.counters.generator_updates += 1;
        self.update_running(&report);
        self.counters.step += 1;
        if let (Some(th), None) = (self.config.cls_recon_threshold, self.counters.cls_triggered_at) {
            if self.counters.step as usize >= self.config.adv_start_step && self.counters.running.l_recon < th {
                self.counters.cls_triggered_at = Some(self.counters.step);
            }
        }
        Ok(report)
    }

    fn update_running(&mut self, r: &LossReport) {
        let first = self.counters.generator_updates == 1;
        let run = &mut self.counters.running;
        let blend = |acc: &mut f64, v: f64| {
            *acc = if first { v } else { RUNNING_DECAY * *acc + (1.0 - RUNNING_DECAY) * v };
        };
        blend(&mut run.l_masked, r.l_masked);
        blend(&mut run.l_global, r.l_global);
        blend(&mut run.l_recon, r.l_recon);
        blend(&mut run.l_adv_local, r.l_adv_local);
        blend(&mut run.l_adv_global, r.l_adv_global);
        blend(&mut run.gp_local, r.gp_local);
        blend(&mut run.gp_global, r.gp_global);
        blend(&mut run.l_cls_d, r.l_cls_d);
        blend(&mut run.l_cls_g, r.l_cls_g);
        blend(&mut run.l_d_total, r.l_d_total);
        blend(&mut run.l_g_total, r.l_g_total);
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        self.generator.save(&dir.join("generator"), &self.g_params)?;
        self.local.critic.save(&dir.join("critic_local"), &self.local.params)?;
        self.global.critic.save(&dir.join("critic_global"), &self.global.params)?;
        for (name, adam) in [("g", &self.g_adam), ("d_local", &self.local.adam), ("d_global", &self.global.adam)] {
            let (m, v) = adam.moments();
            tensorgrad::save_params(&dir.join("optim").join(format!("{name}_m")), m)?;
            tensorgrad::save_params(&dir.join("optim").join(format!("{name}_v")), v)?;
        }
        let state = StateFile {
            counters: self.counters.clone(),
            patch_shape: self.patch_shape,
            adam_steps: [self.g_adam.step_count(), self.local.adam.step_count(), self.global.adam.step_count()],
            config: self.config.clone(),
        };
        let path = dir.join(STATE_FILE);
        let json = serde_json::to_string_pretty(&state).map_err(Error::json("train state"))?;
        std::fs::write(&path, json).map_err(Error::io(&path))
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let text = std::fs::read_to_string(&path).map_err(Error::io(&path))?;
        let state: StateFile = serde_json::from_str(&text).map_err(Error::json("train state"))?;
        let mut t = GanTrainer::new(state.config, state.patch_shape)?;
        let (_, gp) = Generator::load(&dir.join("generator"))?;
        tensorgrad::assign_params(&mut t.g_params, &gp)?;
        for (sub, net) in [("critic_local", &mut t.local), ("critic_global", &mut t.global)] {
            let (_, p) = Critic::load(&dir.join(sub))?;
            tensorgrad::assign_params(&mut net.params, &p)?;
        }
        let optim = |name: &str, template: &ParamSet<f32>, config: AdamConfig, step: u64| -> Result<Adam<f32>> {
            let mut m = template.zeros_like();
            let mut v = template.zeros_like();
            tensorgrad::assign_params(&mut m, &tensorgrad::load_params(&dir.join("optim").join(format!("{name}_m")))?)?;
            tensorgrad::assign_params(&mut v, &tensorgrad::load_params(&dir.join("optim").join(format!("{name}_v")))?)?;
            Ok(Adam::from_state(config, step, m, v)?)
        };
        t.g_adam = optim("g", &t.g_params, t.config.optim_g, state.adam_steps[0])?;
        t.local.adam = optim("d_local", &t.local.params, t.config.optim_d, state.adam_steps[1])?;
        t.global.adam = optim("d_global", &t.global.params, t.config.optim_d, state.adam_steps[2])?;
        t.counters = state.counters;
        Ok(t)
    }

    /// In-paints `samples` (each with its own noise already in `masked`) as
    /// class `target`; returns composites.
    pub fn generate_composites(&self, samples: &[PatchSample], target: ClassLabel) -> Result<Vec<ndarray::Array3<f32>>> {
        generate_composites(&self.generator, &self.g_params, samples, target)
    }
}

/// Batched inference; returns one composite per sample.
pub fn generate_composites(
    generator: &Generator,
    params: &ParamSet<f32>,
    samples: &[PatchSample],
    target: ClassLabel,
) -> Result<Vec<ndarray::Array3<f32>>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let masked = stack_channels::<f32>(&samples.iter().map(|s| vec![&s.masked]).collect::<Vec<_>>())?;
    let mask = stack_channels::<f32>(&samples.iter().map(|s| vec![&s.mask]).collect::<Vec<_>>())?;
    let s = masked.shape().to_vec();
    let labels = vec![label_value(target) as f64; samples.len()];
    let input = GeneratorInput {
        masked: Var::constant(masked),
        mask,
        label_map: Var::constant(label_map(&labels, [s[2], s[3], s[4]])),
    };
    let out = no_grad(|| generator.generate(&params.bind_frozen(), &input))?;
    unstack(out.composite.value())
}

/// Sample indices for the batch of `step`: a seeded permutation per epoch,
/// consumed `batch_size` at a time across epoch boundaries.
pub fn batch_indices(n: usize, batch_size: usize, step: u64, seed: u64) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch_size as u64)
        .map(|j| {
            let pos = step * batch_size as u64 + j;
            let epoch = pos / n as u64;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng_for(seed, "gan-shuffle", epoch));
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("filled above").1[(pos % n as u64) as usize]
        })
        .collect()
}

#[derive(Serialize)]
struct LogLine<'a> {
    step: u64,
    phase: Phase,
    wall_time_s: f64,
    #[serde(flatten)]
    report: &'a LossReport,
}

#[derive(Serialize)]
struct AbortLine<'a> {
    step: u64,
    error: &'a str,
    non_finite_term: Option<&'a str>,
}

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("step_{step:06}"))
}

/// Runs training to `config.total_steps`, writing checkpoints, the final
/// state and an NDJSON log under `out`. With `resume`, training continues
/// from that checkpoint and appends to the log.
pub fn train(dataset: &[PatchSample], config: &GanConfig, out: &Path, resume: Option<&Path>) -> Result<GanTrainer> {
    let Some(first) = dataset.first() else {
        return Err(Error::Validation("GAN training needs a non-empty dataset".into()));
    };
    let shape = first.shape();
    if let Some(bad) = dataset.iter().position(|s| s.shape() != shape) {
        return Err(Error::Shape(format!("sample {bad} has shape {:?}, expected {shape:?}", dataset[bad].shape())));
    }
    let mut trainer = match resume {
        Some(dir) => {
            let mut t = GanTrainer::load_checkpoint(dir)?;
            if t.patch_shape != shape {
                return Err(Error::Shape(format!("checkpoint patches {:?} vs data {shape:?}", t.patch_shape)));
            }
            t.config.total_steps = config.total_steps;
            t.config.checkpoint_every = config.checkpoint_every;
            t.config.validate()?;
            t
        }
        None => GanTrainer::new(config.clone(), shape)?,
    };
    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    let log_path = out.join(LOG_FILE);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(Error::io(&log_path))?;
    let mut log = BufWriter::new(file);
    let c = trainer.config.clone();
    let boundaries: BTreeSet<u64> = [c.recon_only_steps, c.adv_start_step, c.cls_start_step]
        .into_iter()
        .map(|s| s as u64)
        .collect();
    let started = Instant::now();
    if trainer.counters.step == 0 {
        trainer.save_checkpoint(&checkpoint_path(out, 0))?;
    }
    while (trainer.counters.step as usize) < c.total_steps {
        let step = trainer.counters.step;
        let idx = batch_indices(dataset.len(), c.batch_size, step, c.seed);
        let batch: Vec<PatchSample> = idx.iter().map(|&i| dataset[i].clone()).collect();
        let phase = trainer.phase();
        let report = match trainer.train_step(&batch) {
            Ok(r) => r,
            Err(e) => {
                let term = match &e {
                    Error::NonFinite { term, .. } => Some(term.as_str()),
                    _ => None,
                };
                let line = AbortLine {
                    step,
                    error: &e.to_string(),
                    non_finite_term: term,
                };
                let json = serde_json::to_string(&line).map_err(Error::json("training log"))?;
                writeln!(log, "{json}").map_err(Error::io(&log_path))?;
                log.flush().map_err(Error::io(&log_path))?;
                log::error!("training aborted at step {step}: {e}");
                return Err(e);
            }
        };
        let line = LogLine {
            step,
            phase,
            wall_time_s: started.elapsed().as_secs_f64(),
            report: &report,
        };
        let json = serde_json::to_string(&line).map_err(Error::json("training log"))?;
        writeln!(log, "{json}").map_err(Error::io(&log_path))?;
        let done = trainer.counters.step;
        if done % c.checkpoint_every as u64 == 0 || boundaries.contains(&done) {
            log.flush().map_err(Error::io(&log_path))?;
            trainer.save_checkpoint(&checkpoint_path(out, done))?;
        }
        if done % 50 == 0 {
            log::info!("step {done}: l_recon {:.4} l_G {:.4} l_D {:.4}", report.l_recon, report.l_g_total, report.l_d_total);
        }
    }
    log.flush().map_err(Error::io(&log_path))?;
    trainer.save_checkpoint(&out.join(FINAL_DIR))?;
    Ok(trainer)
}

/// Draws `n` sources with replacement, re-masks each with fresh noise at its
/// annotated diameter and in-paints it as `target`. Outputs carry the target
/// label; callers flag them as synthetic when writing a manifest.
pub fn synthesize_dataset(
    generator: &Generator,
    params: &ParamSet<f32>,
    trained_steps: u64,
    source: &[PatchSample],
    target: ClassLabel,
    n: usize,
    seed: u64,
    noise: NoiseParams,
) -> Result<Vec<PatchSample>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if source.is_empty() {
        return Err(Error::Validation("synthesis needs at least one source patch".into()));
    }
    if trained_steps == 0 {
        log::warn!("synthesizing from an untrained generator");
    }
    let mut pick = rng_for(seed, "synth-pick", 0);
    let mut out = Vec::with_capacity(n);
    let chunk = 8;
    for start in (0..n).step_by(chunk) {
        let mut batch = Vec::with_capacity(chunk);
        for i in start..(start + chunk).min(n) {
            let src = &source[rand::Rng::random_range(&mut pick, 0..source.len())];
            let mut s = src.renoised(derive_seed(seed, "synth-noise", i as u64), noise)?;
            s.label = target;
            batch.push(s);
        }
        let composites = generate_composites(generator, params, &batch, target)?;
        for (s, composite) in batch.into_iter().zip(composites) {
            let sample = PatchSample { raw: composite, ..s };
            sample.validate()?;
            out.push(sample);
        }
    }
    Ok(out)
}

/// Writes `config` as pretty JSON.
pub fn write_config(path: &Path, config: &GanConfig) -> Result<()> {
    let mut f = File::create(path).map_err(Error::io(path))?;
    let json = serde_json::to_string_pretty(config).map_err(Error::json("GAN config"))?;
    f.write_all(json.as_bytes()).map_err(Error::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::phantom_dataset;

    fn tiny_config() -> GanConfig {
        GanConfig {
            critic_steps_per_gen_step: 5,
            recon_only_steps: 2,
            adv_start_step: 2,
            cls_start_step: 4,
            total_steps: 6,
            batch_size: 2,
            checkpoint_every: 3,
            generator: GeneratorConfig {
                base_channels: 4,
                ..GeneratorConfig::desk()
            },
            critic_local: CriticConfig {
                base_channels: 4,
                local_shape: [8, 8, 4],
                ..CriticConfig::desk(InputKind::Local)
            },
            critic_global: CriticConfig {
                base_channels: 4,
                ..CriticConfig::desk(InputKind::Global)
            },
            seed: 3,
            ..GanConfig::desk()
        }
    }

    fn data(n: usize) -> Vec<PatchSample> {
        phantom_dataset(n, 0.5, 9).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(GanConfig::default().validate().is_ok());
        assert!(GanConfig::desk().validate().is_ok());
        let bad = GanConfig {
            adv_start_step: 10,
            cls_start_step: 5,
            ..GanConfig::desk()
        };
        assert!(bad.validate().is_err());
        assert!(GanConfig::from_json(r#"{"batch_size": 2, "bogus": 1}"#).is_err());
        let cfg = GanConfig::from_json(r#"{"batch_size": 2}"#).unwrap();
        assert_eq!(cfg.batch_size, 2);
        assert_eq!(cfg.critic_steps_per_gen_step, 5);
    }

    #[test]
    fn phases_gate_updates() {
        let d = data(4);
        let mut t = GanTrainer::new(tiny_config(), d[0].shape()).unwrap();
        let (l0, g0) = (t.local.params.clone(), t.global.params.clone());
        for step in 0..6u64 {
            let phase = t.phase();
            let before = t.counters.critic_updates;
            let r = t.train_step(&d[..2]).unwrap();
            let did = t.counters.critic_updates - before;
            match step {
                0 | 1 => {
                    assert_eq!(phase, Phase::Recon);
                    assert_eq!(did, 0);
                    assert_eq!((&t.local.params, &t.global.params), (&l0, &g0));
                    assert_eq!((r.l_adv_local, r.gp_global, r.l_d_total), (0.0, 0.0, 0.0));
                }
                2 | 3 => {
                    assert_eq!(phase, Phase::Adversarial);
                    assert_eq!(did, 5);
                    assert_eq!((r.l_cls_d, r.l_cls_g), (0.0, 0.0));
                    assert_ne!(r.l_adv_local, 0.0);
                }
                _ => {
                    assert_eq!(phase, Phase::Classified);
                    assert!(r.l_cls_d > 0.0 && r.l_cls_g > 0.0);
                }
            }
            assert!((r.l_recon - (r.l_masked + t.config.weights.lambda1 * r.l_global)).abs() < 1e-5);
        }
        assert_ne!(t.local.params, l0);
        assert_eq!(t.counters.generator_updates, 6);
        assert_eq!(t.counters.critic_updates, 20);
        assert_eq!(t.counters.composite_violations, 0);
        assert_eq!(t.counters.generate_calls, 26);
    }

    #[test]
    fn warmup_trains_critics_only() {
        let cfg = GanConfig {
            recon_only_steps: 1,
            adv_start_step: 2,
            ..tiny_config()
        };
        let d = data(2);
        let mut t = GanTrainer::new(cfg, d[0].shape()).unwrap();
        t.train_step(&d).unwrap();
        let l0 = t.local.params.clone();
        assert_eq!(t.phase(), Phase::CriticWarmup);
        let r = t.train_step(&d).unwrap();
        assert_ne!(t.local.params, l0);
        assert_eq!(r.l_cls_g, 0.0);
        assert!((r.l_g_total - t.config.weights.lambda_recon * r.l_recon).abs() < 1e-4);
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut seen = vec![0; 10];
        for step in 0..5 {
            for i in batch_indices(10, 2, step, 1) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(batch_indices(10, 3, 4, 1), batch_indices(10, 3, 4, 1));
        assert_ne!(batch_indices(10, 10, 0, 1), batch_indices(10, 10, 1, 1));
    }

    #[test]
    fn zero_steps_writes_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GanConfig {
            total_steps: 0,
            recon_only_steps: 0,
            adv_start_step: 0,
            cls_start_step: 0,
            ..tiny_config()
        };
        let d = data(2);
        let t = train(&d, &cfg, dir.path(), None).unwrap();
        let fresh = GanTrainer::new(cfg, d[0].shape()).unwrap();
        assert_eq!(t.g_params, fresh.g_params);
        assert!(checkpoint_path(dir.path(), 0).join(STATE_FILE).exists());
        assert_eq!(std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap(), "");
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let d = data(6);
        let cfg = tiny_config();
        let a = tempfile::tempdir().unwrap();
        train(&d, &cfg, a.path(), None).unwrap();
        let b = tempfile::tempdir().unwrap();
        train(&d, &cfg, b.path(), Some(&checkpoint_path(a.path(), 3))).unwrap();
        let strip = |text: String| -> Vec<serde_json::Value> {
            text.lines()
                .map(|l| {
                    let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                    v.as_object_mut().unwrap().remove("wall_time_s");
                    v
                })
                .collect()
        };
        let full = strip(std::fs::read_to_string(a.path().join(LOG_FILE)).unwrap());
        let resumed = strip(std::fs::read_to_string(b.path().join(LOG_FILE)).unwrap());
        assert_eq!(resumed.len(), 3);
        assert_eq!(&full[3..], &resumed[..]);
        let fa = GanTrainer::load_checkpoint(&a.path().join(FINAL_DIR)).unwrap();
        let fb = GanTrainer::load_checkpoint(&b.path().join(FINAL_DIR)).unwrap();
        assert_eq!(fa.g_params, fb.g_params);
        assert_eq!(fa.counters, fb.counters);
    }

    #[test]
    fn nan_batch_aborts_naming_the_term() {
        let mut d = data(2);
        d[1].raw[[0, 0, 0]] = f32::NAN;
        d[1].masked[[0, 0, 0]] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        let err = train(&d, &tiny_config(), dir.path(), None).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref term, step: 0 } if term == "l_masked"), "{err}");
        let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert!(log.contains("\"non_finite_term\":\"l_masked\""));
    }

    #[test]
    fn synthesis_bookkeeping_and_determinism() {
        let d = data(4);
        let t = GanTrainer::new(tiny_config(), d[0].shape()).unwrap();
        let noise = NoiseParams::default();
        let none = synthesize_dataset(&t.generator, &t.g_params, 0, &d, ClassLabel::Malignant, 0, 1, noise).unwrap();
        assert!(none.is_empty());
        let a = synthesize_dataset(&t.generator, &t.g_params, 0, &d, ClassLabel::Malignant, 11, 1, noise).unwrap();
        let b = synthesize_dataset(&t.generator, &t.g_params, 0, &d, ClassLabel::Malignant, 11, 1, noise).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 11);
        for s in &a {
            assert_eq!(s.label, ClassLabel::Malignant);
            s.validate().unwrap();
        }
    }
}
