//! Focal loss, binary cross-entropy, and the weighted multitask joint loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_term, focal_term, Graph, Var};
use crate::error::{MarnError, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda_d: f64,
    pub lambda_s: f64,
    pub prob_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.999,
            gamma: 2.0,
            lambda_d: 0.7,
            lambda_s: 0.3,
            prob_eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(MarnError::Config(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0) {
            return Err(MarnError::Config(format!("gamma must be ≥ 0, got {}", self.gamma)));
        }
        if !(self.lambda_d >= 0.0 && self.lambda_s >= 0.0) {
            return Err(MarnError::Config("branch weights must be ≥ 0".into()));
        }
        if !(self.prob_eps > 0.0 && self.prob_eps < 0.5) {
            return Err(MarnError::Config(format!("prob_eps must lie in (0,0.5), got {}", self.prob_eps)));
        }
        Ok(())
    }
}

fn check(probs: &[f64], targets: &[f64]) -> Result<()> {
    if probs.len() != targets.len() {
        return Err(MarnError::Dimension {
            kernel: "loss",
            lhs: vec![probs.len()],
            rhs: vec![targets.len()],
        });
    }
    if let Some(y) = targets.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(MarnError::Input(format!("targets must be 0 or 1, got {y}")));
    }
    Ok(())
}

/// Σ_i −y·α(1−ŷ)^γ·ln ŷ − (1−y)(1−α)ŷ^γ·ln(1−ŷ), with ŷ clamped to [ε, 1−ε].
pub fn focal_loss(probs: &[f64], targets: &[f64], cfg: &LossConfig) -> Result<f64> {
    check(probs, targets)?;
    Ok(probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| focal_term(p, y, cfg.alpha, cfg.gamma, cfg.prob_eps))
        .sum())
}

pub fn bce_loss(probs: &[f64], targets: &[f64], eps: f64) -> Result<f64> {
    check(probs, targets)?;
    Ok(probs.iter().zip(targets).map(|(&p, &y)| bce_term(p, y, eps)).sum())
}

pub fn joint_loss(icd: f64, ccs: f64, cfg: &LossConfig) -> f64 {
    cfg.lambda_d * icd + cfg.lambda_s * ccs
}

/// Batch loss of one branch: per-document sum over codes, mean over the
/// `batch` documents. `probs` is batch×d_m.
pub fn branch_loss<T: Real>(
    g: &mut Graph<T>,
    probs: Var,
    targets: &[f64],
    cfg: &LossConfig,
    focal: bool,
) -> Result<Var> {
    let batch = g.shape(probs).first().copied().unwrap_or(1);
    let y: Vec<T> = targets.iter().map(|&v| T::lit(v)).collect();
    let eps = T::lit(cfg.prob_eps);
    let total = if focal {
        g.focal_loss(probs, &y, T::lit(cfg.alpha), T::lit(cfg.gamma), eps)?
    } else {
        g.bce_loss(probs, &y, eps)?
    };
    g.scale(total, T::lit(1.0 / batch as f64))
}

/// λ_d·icd + λ_s·ccs; a missing CCS term contributes nothing.
pub fn joint_loss_node<T: Real>(g: &mut Graph<T>, icd: Var, ccs: Option<Var>, cfg: &LossConfig) -> Result<Var> {
    let d = g.scale(icd, T::lit(cfg.lambda_d))?;
    match ccs {
        Some(c) if cfg.lambda_s != 0.0 => {
            let s = g.scale(c, T::lit(cfg.lambda_s))?;
            g.add(d, s)
        }
        _ => Ok(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bce_oracle(p: f64, y: f64) -> f64 {
        -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
    }

    #[test]
    fn perfect_predictions_approach_zero() {
        let cfg = LossConfig::default();
        assert!(focal_loss(&[1.0 - 1e-9], &[1.0], &cfg).unwrap() < 1e-12);
        assert!(focal_loss(&[1e-9], &[0.0], &cfg).unwrap() < 1e-12);
        assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0], 1e-7).unwrap() < 1e-6);
    }

    #[test]
    fn gamma_zero_alpha_half_is_half_bce() {
        let cfg = LossConfig {
            alpha: 0.5,
            gamma: 0.0,
            ..LossConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let p: f64 = rng.gen_range(0.001..0.999);
            let y = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
            let f = focal_loss(&[p], &[y], &cfg).unwrap();
            approx::assert_abs_diff_eq!(f, 0.5 * bce_oracle(p, y), epsilon = 1e-12);
        }
    }

    #[test]
    fn confident_positive_example() {
        let cfg = LossConfig::default();
        let f = focal_loss(&[0.9], &[1.0], &cfg).unwrap();
        approx::assert_abs_diff_eq!(f, 0.999 * 0.01 * -(0.9f64.ln()), epsilon = 1e-15);
    }

    #[test]
    fn bce_at_one_half_is_ln2_per_code() {
        let l = bce_loss(&[0.5; 7], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0], 1e-7).unwrap();
        approx::assert_abs_diff_eq!(l, 7.0 * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn bce_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<f64> = (0..20).map(|_| rng.gen_range(0.01..0.99)).collect();
        let y: Vec<f64> = (0..20).map(|_| f64::from(rng.gen_bool(0.3) as u8)).collect();
        let expect: f64 = p.iter().zip(&y).map(|(&p, &y)| bce_oracle(p, y)).sum();
        approx::assert_abs_diff_eq!(bce_loss(&p, &y, 1e-7).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn non_binary_target_is_rejected() {
        let cfg = LossConfig::default();
        assert!(matches!(focal_loss(&[0.3], &[0.5], &cfg), Err(MarnError::Input(_))));
        assert!(matches!(bce_loss(&[0.3], &[2.0], 1e-7), Err(MarnError::Input(_))));
    }

    #[test]
    fn joint_is_weighted_sum() {
        let cfg = LossConfig::default();
        assert_eq!(joint_loss(2.0, 1.0, &cfg), 0.7 * 2.0 + 0.3 * 1.0);
        approx::assert_abs_diff_eq!(joint_loss(2.0, 1.0, &cfg), 1.7, epsilon = 1e-15);
        let single = LossConfig {
            lambda_s: 0.0,
            ..cfg
        };
        assert_eq!(joint_loss(2.0, 5.0, &single), 0.7 * 2.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        for bad in [
            LossConfig {
                alpha: 1.0,
                ..Default::default()
            },
            LossConfig {
                gamma: -1.0,
                ..Default::default()
            },
            LossConfig {
                lambda_s: -0.1,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(MarnError::Config(_))));
        }
    }

    #[test]
    fn graph_loss_is_batch_mean_and_differentiable() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let targets: Vec<f64> = (0..12).map(|i| f64::from((i % 3 == 0) as u8)).collect();
        for focal in [true, false] {
            let mut g = Graph::<f64>::new(0);
            let x = g.param(logits.clone());
            let p = g.sigmoid(x).unwrap();
            let l = branch_loss(&mut g, p, &targets, &cfg, focal).unwrap();
            let probs = g.value(p).data().to_vec();
            let expect = if focal {
                focal_loss(&probs, &targets, &cfg).unwrap()
            } else {
                bce_loss(&probs, &targets, cfg.prob_eps).unwrap()
            } / 3.0;
            approx::assert_abs_diff_eq!(g.value(l).data()[0], expect, epsilon = 1e-12);
            let report = check_gradients(
                |g, xs| {
                    let p = g.sigmoid(xs[0])?;
                    branch_loss(g, p, &targets, &cfg, focal)
                },
                &[logits.clone()],
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "{report:?}");
        }
    }

    #[test]
    fn joint_gradient_is_weighted_sum_of_branch_gradients() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let ya = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let yb = [0.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let grad_of = |which: u8| {
            let mut g = Graph::<f64>::new(0);
            let x = g.param(w.clone());
            let t = g.tanh(x).unwrap();
            let pa = g.sigmoid(t).unwrap();
            let sq = g.mul(t, t).unwrap();
            let pb = g.sigmoid(sq).unwrap();
            let la = branch_loss(&mut g, pa, &ya, &cfg, true).unwrap();
            let lb = branch_loss(&mut g, pb, &yb, &cfg, true).unwrap();
            let l = match which {
                0 => la,
                1 => lb,
                _ => joint_loss_node(&mut g, la, Some(lb), &cfg).unwrap(),
            };
            g.backward(l).unwrap();
            g.grad(x).into_data()
        };
        let (ga, gb, gj) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..6 {
            approx::assert_abs_diff_eq!(gj[i], 0.7 * ga[i] + 0.3 * gb[i], epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn focal_is_nonnegative(p in 0.0f64..=1.0, pos in any::<bool>()) {
            let y = f64::from(pos as u8);
            prop_assert!(focal_loss(&[p], &[y], &LossConfig::default()).unwrap() >= 0.0);
        }

        #[test]
        fn focal_is_monotone_in_the_prediction(a in 0.001f64..0.999, b in 0.001f64..0.999) {
            prop_assume!((a - b).abs() > 1e-6);
            let cfg = LossConfig::default();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(focal_loss(&[lo], &[1.0], &cfg).unwrap() > focal_loss(&[hi], &[1.0], &cfg).unwrap());
            prop_assert!(focal_loss(&[lo], &[0.0], &cfg).unwrap() < focal_loss(&[hi], &[0.0], &cfg).unwrap());
        }

        #[test]
        fn focal_over_bce_is_the_modulating_factor(p in 0.01f64..0.99) {
            let cfg = LossConfig::default();
            let ratio = focal_loss(&[p], &[1.0], &cfg).unwrap() / bce_oracle(p, 1.0);
            prop_assert!((ratio - 0.999 * (1.0 - p).powi(2)).abs() < 1e-12);
        }
    }
}
