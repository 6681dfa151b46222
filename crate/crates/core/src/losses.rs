//! Training objectives, all expressed as quantities to minimise.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tensorgrad::{grad, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Keeps the gradient of the norm finite when a critic gradient vanishes.
const NORM_EPS: f64 = 1e-16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda_gp: f64,
    pub lambda_cls_d: f64,
    pub lambda_cls_g: f64,
    pub lambda_recon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda_gp: 10.0,
            lambda_cls_d: 1.0,
            lambda_cls_g: 1.0,
            lambda_recon: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda_gp, self.lambda_cls_d, self.lambda_cls_g, self.lambda_recon];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0: {self:?}")));
        }
        Ok(())
    }
}

/// Per-step loss values; terms inactive in the current phase are 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossReport {
    pub l_masked: f64,
    pub l_global: f64,
    pub l_recon: f64,
    pub l_adv_local: f64,
    pub l_adv_global: f64,
    pub gp_local: f64,
    pub gp_global: f64,
    pub l_cls_d: f64,
    pub l_cls_g: f64,
    pub l_d_total: f64,
    pub l_g_total: f64,
}

impl LossReport {
    pub fn terms(&self) -> [(&'static str, f64); 11] {
        [
            ("l_masked", self.l_masked),
            ("l_global", self.l_global),
            ("l_recon", self.l_recon),
            ("l_adv_local", self.l_adv_local),
            ("l_adv_global", self.l_adv_global),
            ("gp_local", self.gp_local),
            ("gp_global", self.gp_global),
            ("l_cls_d", self.l_cls_d),
            ("l_cls_g", self.l_cls_g),
            ("l_d_total", self.l_d_total),
            ("l_g_total", self.l_g_total),
        ]
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

pub struct ReconTerms<T: Scalar> {
    pub l_masked: Var<T>,
    pub l_global: Var<T>,
    pub l_recon: Var<T>,
}

fn c<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// Masked-region and whole-patch L1, each a per-sample mean averaged over the
/// batch. Inputs are `[N, ...]`; an empty mask contributes 0 to `l_masked`.
pub fn recon_loss<T: Scalar>(pred: &Var<T>, target: &Tensor<T>, mask: &Tensor<T>, lambda1: f64) -> Result<ReconTerms<T>> {
    if pred.shape() != target.shape() || pred.shape() != mask.shape() || pred.shape().is_empty() {
        return Err(Error::Shape(format!(
            "recon loss: pred {:?}, target {:?}, mask {:?}",
            pred.shape(),
            target.shape(),
            mask.shape()
        )));
    }
    let n = pred.shape()[0];
    let diff = pred.sub(&Var::constant(target.clone()))?.abs();
    let per_sample = diff.mul_const(mask)?.sum_rows()?;
    let counts = Var::constant(mask.clone()).sum_rows()?;
    let inv = Tensor::new(
        &[n],
        counts.data().iter().map(|&m| T::one() / if m > T::one() { m } else { T::one() }).collect(),
    )?;
    let l_masked = per_sample.mul_const(&inv)?.mean();
    let l_global = diff.mean();
    let l_recon = l_masked.add(&l_global.scale(c(lambda1)))?;
    Ok(ReconTerms {
        l_masked,
        l_global,
        l_recon,
    })
}

/// Interpolation coefficients, one per sample, drawn from `U[0, 1)`.
pub fn gp_epsilons(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, "gradient-penalty", 0);
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// `λ · mean((‖∇ critic(x̂)‖₂ − 1)²)` over per-sample interpolates
/// `x̂ = ε·real + (1 − ε)·fake`. `critic` maps `[N, ...]` to `[N]` scores with
/// no coupling between samples. The result is differentiable with respect to
/// the critic's parameters.
pub fn gradient_penalty<T: Scalar>(
    critic: impl Fn(&Var<T>) -> Result<Var<T>>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    lambda_gp: f64,
    seed: u64,
) -> Result<Var<T>> {
    gradient_penalty_var(critic, &Var::constant(real.clone()), &Var::constant(fake.clone()), lambda_gp, seed)
}

/// As [`gradient_penalty`], also differentiable with respect to `real` and `fake`.
pub fn gradient_penalty_var<T: Scalar>(
    critic: impl Fn(&Var<T>) -> Result<Var<T>>,
    real: &Var<T>,
    fake: &Var<T>,
    lambda_gp: f64,
    seed: u64,
) -> Result<Var<T>> {
    if real.shape() != fake.shape() || real.shape().is_empty() || real.shape()[0] == 0 {
        return Err(Error::Shape(format!("penalty batches {:?} vs {:?}", real.shape(), fake.shape())));
    }
    let n = real.shape()[0];
    let per = real.len() / n;
    let eps = gp_epsilons(n, seed);
    let spread = |f: &dyn Fn(T) -> T| -> Result<Tensor<T>> {
        let data = eps.iter().flat_map(|e| std::iter::repeat_n(f(c(*e)), per)).collect();
        Ok(Tensor::new(real.shape(), data)?)
    };
    let mixed = real
        .mul_const(&spread(&|e| e)?)?
        .add(&fake.mul_const(&spread(&|e| T::one() - e)?)?)?;
    let x_hat = if mixed.requires_grad() { mixed } else { Var::param(mixed.value().clone()) };
    let scores = critic(&x_hat)?;
    if scores.shape() != [n] {
        return Err(Error::Shape(format!("critic returned {:?} for a batch of {n}", scores.shape())));
    }
    let g = grad(&scores.sum(), &[&x_hat], true)?.remove(0);
    let norms = g.reshape(&[n, per])?.square().sum_rows()?.add_scalar(c(NORM_EPS)).sqrt();
    Ok(norms.add_scalar(-T::one()).square().mean().scale(c(lambda_gp)))
}

pub fn wgan_adv<T: Scalar>(real_scores: &Var<T>, fake_scores: &Var<T>, gp: &Var<T>) -> Result<Var<T>> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(Error::Validation("adversarial loss needs non-empty score batches".into()));
    }
    Ok(real_scores.mean().sub(&fake_scores.mean())?.sub(&gp.reshape(&[])?)?)
}

/// Mean over the batch of `weight[t] · −log softmax(logits)[t]`.
pub fn cross_entropy<T: Scalar>(logits: &Var<T>, targets: &[usize], weights: Option<&[f64]>) -> Result<Var<T>> {
    let &[n, k] = logits.shape() else {
        return Err(Error::Shape(format!("logits must be [N, K], got {:?}", logits.shape())));
    };
    if n == 0 || targets.len() != n {
        return Err(Error::Shape(format!("{} targets for {n} logit rows", targets.len())));
    }
    if let Some(w) = weights {
        if w.len() != k || w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Validation(format!("class weights must be {k} positive values, got {w:?}")));
        }
    }
    let mut pick = vec![T::zero(); n * k];
    for (i, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(Error::Validation(format!("target {t} out of range for {k} classes")));
        }
        pick[i * k + t] = c(weights.map_or(1.0, |w| w[t]) / n as f64);
    }
    Ok(logits.log_softmax_rows()?.mul_const(&Tensor::new(&[n, k], pick)?)?.sum().neg())
}

/// Domain-classification loss over {fake, benign, malignant}.
pub fn aux_class_loss<T: Scalar>(logits: &Var<T>, targets: &[usize]) -> Result<Var<T>> {
    if logits.shape().get(1) != Some(&3) {
        return Err(Error::Shape(format!("domain logits must be [N, 3], got {:?}", logits.shape())));
    }
    cross_entropy(logits, targets, None)
}

/// Critic loss to minimise: `−l_adv + λ_cls_D · l_cls_D`.
pub fn critic_objective<T: Scalar>(l_adv: &Var<T>, l_cls_d: &Var<T>, w: &LossWeights) -> Result<Var<T>> {
    Ok(l_cls_d.scale(c(w.lambda_cls_d)).sub(l_adv)?)
}

/// Generator loss to minimise: `−l_adv + λ_cls_G · l_cls_G + λ_recon · l_recon`.
pub fn generator_objective<T: Scalar>(
    l_adv: &Var<T>,
    l_cls_g: &Var<T>,
    l_recon: &Var<T>,
    w: &LossWeights,
) -> Result<Var<T>> {
    Ok(l_cls_g
        .scale(c(w.lambda_cls_g))
        .add(&l_recon.scale(c(w.lambda_recon)))?
        .sub(l_adv)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    fn s(v: f64) -> Var<f64> {
        Var::scalar(v)
    }

    fn recon_oracle(pred: &[f64], target: &[f64], mask: &[f64], n: usize, lambda1: f64) -> (f64, f64, f64) {
        let per = pred.len() / n;
        let mut masked = 0.0;
        for i in 0..n {
            let (mut num, mut den) = (0.0, 0.0);
            for j in i * per..(i + 1) * per {
                num += (pred[j] - target[j]).abs() * mask[j];
                den += mask[j];
            }
            masked += num / den.max(1.0);
        }
        masked /= n as f64;
        let global = pred.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64;
        (masked, global, masked + lambda1 * global)
    }

    #[test]
    fn recon_examples() {
        let z = recon_loss(&Var::constant(t(&[1, 2], &[0.3, 0.7])), &t(&[1, 2], &[0.3, 0.7]), &t(&[1, 2], &[1.0, 0.0]), 1.0).unwrap();
        assert_eq!((z.l_masked.item(), z.l_global.item(), z.l_recon.item()), (0.0, 0.0, 0.0));
        let r = recon_loss(&Var::constant(t(&[1, 2, 1, 1], &[1.0, 0.0])), &t(&[1, 2, 1, 1], &[0.0, 0.0]), &t(&[1, 2, 1, 1], &[1.0, 0.0]), 0.5).unwrap();
        assert_eq!((r.l_masked.item(), r.l_global.item(), r.l_recon.item()), (1.0, 0.5, 1.25));
    }

    proptest! {
        #[test]
        fn recon_matches_oracle(
            n in 1usize..4,
            vals in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, prop::bool::ANY), 24),
            lambda1 in 0.0f64..3.0,
        ) {
            let per = 24 / 4;
            let take = n * per;
            let pred: Vec<f64> = vals[..take].iter().map(|v| v.0).collect();
            let target: Vec<f64> = vals[..take].iter().map(|v| v.1).collect();
            let mask: Vec<f64> = vals[..take].iter().map(|v| if v.2 { 1.0 } else { 0.0 }).collect();
            let r = recon_loss(&Var::constant(t(&[n, per], &pred)), &t(&[n, per], &target), &t(&[n, per], &mask), lambda1).unwrap();
            let (m, g, total) = recon_oracle(&pred, &target, &mask, n, lambda1);
            prop_assert!((r.l_masked.item() - m).abs() < 1e-12);
            prop_assert!((r.l_global.item() - g).abs() < 1e-12);
            prop_assert!((r.l_recon.item() - total).abs() < 1e-12);
            let r0 = recon_loss(&Var::constant(t(&[n, per], &pred)), &t(&[n, per], &target), &t(&[n, per], &mask), 0.0).unwrap();
            prop_assert_eq!(r0.l_recon.item(), r0.l_masked.item());
        }

        #[test]
        fn unmasked_perturbation_moves_global_only(
            pred in prop::collection::vec(-1.0f64..1.0, 8),
            delta in 0.01f64..0.5,
        ) {
            let target = vec![0.0; 8];
            let mut mask = vec![1.0; 8];
            mask[3] = 0.0;
            let mut moved = pred.clone();
            // Keep the sign of pred − target so |·| shifts by exactly delta.
            moved[3] += delta * pred[3].signum();
            let a = recon_loss(&Var::constant(t(&[1, 8], &pred)), &t(&[1, 8], &target), &t(&[1, 8], &mask), 1.0).unwrap();
            let b = recon_loss(&Var::constant(t(&[1, 8], &moved)), &t(&[1, 8], &target), &t(&[1, 8], &mask), 1.0).unwrap();
            prop_assert_eq!(a.l_masked.item(), b.l_masked.item());
            prop_assert!((b.l_global.item() - a.l_global.item() - delta / 8.0).abs() < 1e-12);
        }

        #[test]
        fn class_loss_shift_invariant(
            logits in prop::collection::vec(-5.0f64..5.0, 6),
            shift in -10.0f64..10.0,
            t0 in 0usize..3,
            t1 in 0usize..3,
        ) {
            let a = aux_class_loss(&Var::constant(t(&[2, 3], &logits)), &[t0, t1]).unwrap().item();
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let b = aux_class_loss(&Var::constant(t(&[2, 3], &shifted)), &[t0, t1]).unwrap().item();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn penalty_non_negative(u in prop::collection::vec(-2.0f64..2.0, 4), seed in 0u64..100) {
            let ut = t(&[1, 4], &u);
            let critic = |x: &Var<f64>| -> Result<Var<f64>> {
                Ok(x.mul_const(&Tensor::stack(&[ut.clone(), ut.clone()])?.reshape(&[2, 4])?)?.sum_rows()?)
            };
            let gp = gradient_penalty(critic, &Tensor::ones(&[2, 4]), &Tensor::zeros(&[2, 4]), 10.0, seed).unwrap().item();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(gp >= 0.0);
            prop_assert!((gp - 10.0 * (norm - 1.0).powi(2)).abs() < 1e-6);
        }
    }

    /// Affine critic `⟨x, u⟩ + b` on flattened samples.
    fn affine(u: Vec<f64>, n: usize) -> impl Fn(&Var<f64>) -> Result<Var<f64>> {
        move |x: &Var<f64>| {
            let per = u.len();
            let rep: Vec<f64> = (0..n).flat_map(|_| u.iter().copied()).collect();
            Ok(x.reshape(&[n, per])?.mul_const(&t(&[n, per], &rep))?.sum_rows()?.add_scalar(0.3))
        }
    }

    #[test]
    fn penalty_analytic_cases() {
        let real = t(&[3, 2, 2], &[0.1, 0.5, -0.3, 0.9, 0.2, 0.2, 0.4, -0.6, 0.0, 0.3, 0.8, -0.1]);
        let fake = real.map(|v| 0.5 - v);
        let unit = vec![0.5, 0.5, 0.5, 0.5];
        assert!(gradient_penalty(affine(unit, 3), &real, &fake, 10.0, 1).unwrap().item().abs() < 1e-6);
        let constant = |x: &Var<f64>| -> Result<Var<f64>> { Ok(x.reshape(&[3, 4])?.sum_rows()?.scale(0.0)) };
        assert!((gradient_penalty(constant, &real, &fake, 10.0, 1).unwrap().item() - 10.0).abs() < 1e-6);
        let three = vec![1.5, 1.5, 1.5, 1.5];
        assert!((gradient_penalty(affine(three, 3), &real, &fake, 7.0, 1).unwrap().item() - 28.0).abs() < 1e-6);
    }

    #[test]
    fn penalty_is_seeded_and_differentiable() {
        // x ↦ a·Σx²: the gradient norm depends on the interpolate, so ε matters.
        let a = Var::param(Tensor::scalar(0.7));
        let critic = |x: &Var<f64>| -> Result<Var<f64>> {
            Ok(x.square().reshape(&[2, 3])?.sum_rows()?.mul(&a.fill(&[2])?)?)
        };
        let real = t(&[2, 3], &[1.0, 0.5, -0.2, 0.3, 0.3, 0.9]);
        let fake = t(&[2, 3], &[0.0, -0.4, 0.6, 0.2, -0.8, 0.1]);
        let g1 = gradient_penalty(critic, &real, &fake, 10.0, 5).unwrap();
        let g2 = gradient_penalty(critic, &real, &fake, 10.0, 5).unwrap();
        assert_eq!(g1.item(), g2.item());
        assert_ne!(g1.item(), gradient_penalty(critic, &real, &fake, 10.0, 6).unwrap().item());
        // d/da of λ·mean((2a‖x̂‖ − 1)²) against finite differences.
        let analytic = grad(&g1, &[&a], false).unwrap()[0].item();
        let eps = gp_epsilons(2, 5);
        let pen = |av: f64| -> f64 {
            (0..2)
                .map(|i| {
                    let n: f64 = (0..3)
                        .map(|j| eps[i] * real.data()[i * 3 + j] + (1.0 - eps[i]) * fake.data()[i * 3 + j])
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt();
                    (2.0 * av * n - 1.0).powi(2)
                })
                .sum::<f64>()
                * 10.0
                / 2.0
        };
        assert!((g1.item() - pen(0.7)).abs() < 1e-9);
        let fd = (pen(0.7 + 1e-6) - pen(0.7 - 1e-6)) / 2e-6;
        assert!((fd - analytic).abs() < 1e-5 * fd.abs());
    }

    #[test]
    fn wgan_examples() {
        let v = |x: &[f64]| Var::constant(t(&[x.len()], x));
        assert_eq!(wgan_adv(&v(&[1.0, 1.0]), &v(&[0.0, 0.0]), &s(0.0)).unwrap().item(), 1.0);
        assert_eq!(wgan_adv(&v(&[0.4, -2.0]), &v(&[0.4, -2.0]), &s(0.0)).unwrap().item(), 0.0);
        assert_eq!(wgan_adv(&v(&[2.0, 4.0]), &v(&[1.0, 1.0]), &s(0.5)).unwrap().item(), 1.5);
        assert!(wgan_adv(&v(&[]), &v(&[1.0]), &s(0.0)).is_err());
    }

    #[test]
    fn class_loss_examples() {
        let l = |x: [f64; 3], target: usize| aux_class_loss(&Var::constant(t(&[1, 3], &x)), &[target]).unwrap().item();
        for target in 0..3 {
            assert!((l([0.0; 3], target) - 3f64.ln()).abs() < 1e-12);
        }
        assert!(l([20.0, -20.0, -20.0], 0) < 1e-8);
        assert!((l([1.0, 2.0, 3.0], 1) - 1.4076).abs() < 1e-4);
        assert!(aux_class_loss(&Var::constant(t(&[1, 3], &[0.0; 3])), &[3]).is_err());
    }

    #[test]
    fn weighted_cross_entropy() {
        let logits = Var::constant(t(&[3, 2], &[0.2, -0.4, 1.0, 0.5, -0.3, 0.8]));
        let plain = cross_entropy(&logits, &[0, 1, 1], None).unwrap().item();
        let unit = cross_entropy(&logits, &[0, 1, 1], Some(&[1.0, 1.0])).unwrap().item();
        assert!((plain - unit).abs() < 1e-12);
        let one = Var::constant(t(&[1, 2], &[0.0, 0.0]));
        let w = cross_entropy(&one, &[1], Some(&[1.0, 2.0])).unwrap().item();
        assert!((w - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&one, &[1], Some(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn objective_examples() {
        let w = LossWeights::default();
        assert!((critic_objective(&s(1.5), &s(0.7), &w).unwrap().item() + 0.8).abs() < 1e-12);
        let no_cls = LossWeights { lambda_cls_d: 0.0, ..w.clone() };
        assert_eq!(critic_objective(&s(1.5), &s(0.7), &no_cls).unwrap().item(), -1.5);
        assert_eq!(critic_objective(&s(1.5), &s(0.0), &w).unwrap().item(), -1.5);
        assert!((generator_objective(&s(1.5), &s(1.1), &s(0.2), &w).unwrap().item() - 1.6).abs() < 1e-12);
        let zero = LossWeights { lambda_cls_g: 0.0, lambda_recon: 0.0, ..w };
        assert_eq!(generator_objective(&s(1.5), &s(1.1), &s(0.2), &zero).unwrap().item(), -1.5);
    }

    /// Two-parameter generator `pred = a·x + b` scored by a fixed affine
    /// critic; the full generator objective is checked against central
    /// differences in (a, b).
    #[test]
    fn generator_objective_gradient_matches_finite_differences() {
        let x = t(&[2, 3], &[0.2, -0.5, 0.9, 0.1, 0.4, -0.7]);
        let target = t(&[2, 3], &[0.0, 0.3, 0.5, -0.2, 0.6, 0.1]);
        let mask = t(&[2, 3], &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        let w = LossWeights::default();
        let objective = |a: &Var<f64>, b: &Var<f64>| -> Var<f64> {
            let pred = Var::constant(x.clone()).mul(&a.fill(&[2, 3]).unwrap()).unwrap().add(&b.fill(&[2, 3]).unwrap()).unwrap();
            let recon = recon_loss(&pred, &target, &mask, w.lambda1).unwrap();
            let scores = pred.mul_const(&t(&[2, 3], &[0.3, -0.2, 0.5, 0.3, -0.2, 0.5])).unwrap().sum_rows().unwrap();
            let logits = Var::concat(&[scores.reshape(&[2, 1]).unwrap(), scores.scale(-0.5).reshape(&[2, 1]).unwrap(), pred.narrow(1, 0, 1).unwrap()], 1).unwrap();
            let cls = aux_class_loss(&logits, &[2, 1]).unwrap();
            generator_objective(&scores.mean(), &cls, &recon.l_recon, &w).unwrap()
        };
        let (a0, b0) = (0.8, -0.1);
        let (a, b) = (Var::param(Tensor::scalar(a0)), Var::param(Tensor::scalar(b0)));
        let g = grad(&objective(&a, &b), &[&a, &b], false).unwrap();
        let f = |av: f64, bv: f64| objective(&s(av), &s(bv)).item();
        let h = 1e-6;
        let fa = (f(a0 + h, b0) - f(a0 - h, b0)) / (2.0 * h);
        let fb = (f(a0, b0 + h) - f(a0, b0 - h)) / (2.0 * h);
        assert!((fa - g[0].item()).abs() < 1e-3 * fa.abs().max(1e-6));
        assert!((fb - g[1].item()).abs() < 1e-3 * fb.abs().max(1e-6));
    }

    #[test]
    fn report_names_first_bad_term() {
        let mut r = LossReport::default();
        assert_eq!(r.first_non_finite(), None);
        r.gp_local = f64::NAN;
        r.l_g_total = f64::INFINITY;
        assert_eq!(r.first_non_finite(), Some("gp_local"));
    }
}
