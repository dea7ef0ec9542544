//! Task-relation order parameters and the phase boundary they predict.
//!
//! Given two tasks, a handful of scalars built from the stationary kernel
//! blocks summarize how the pair interacts under sequential training: input
//! subspace overlap, relevant-feature similarity, rule similarity, and the
//! combined similarity that sets the critical load of the multi-head phase
//! diagram. All formulas work on P-dimensional kernel quadratic forms, never
//! on feature-space objects.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::{KernelConfig, Lambda};
use crate::data::Dataset;
use crate::kernel::gp_kernel;
use crate::linalg::SpdFactor;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct OrderParameters {
    pub gamma_feature: f64,
    pub gamma_rf: f64,
    pub gamma_rule: f64,
    /// `gamma_rf - gamma_rule`; equals half the predicted short-term
    /// forgetting for symmetric pairs.
    pub conflict: f64,
    pub gamma_sim: f64,
    pub depth_used: usize,
    pub pair: (String, String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Fr,
    Of,
    G,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Fr => "FR",
            Regime::Of => "OF",
            Regime::G => "G",
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PhasePoint {
    pub alpha: f64,
    pub gamma_sim: f64,
    pub regime: Regime,
    /// Critical load; `f64::INFINITY` when no transition exists.
    pub alpha_c: f64,
}

/// Stationary same-branch kernel blocks for a task pair, with cached
/// factorizations of the two diagonal blocks.
pub(crate) struct PairKernels {
    pub f11: SpdFactor,
    pub f22: SpdFactor,
    /// K(X1, X2), shape P1 x P2.
    pub k12: DMatrix<f64>,
    pub y1: DVector<f64>,
    pub y2: DVector<f64>,
}

impl PairKernels {
    pub fn new(d1: &Dataset, d2: &Dataset, cfg: &KernelConfig) -> Result<Self> {
        let cfg = KernelConfig {
            lambda: Lambda::Infinite,
            ..cfg.clone()
        };
        let k11 = gp_kernel(&d1.x, &d1.x, 1, 1, &cfg)?.k1;
        let k22 = gp_kernel(&d2.x, &d2.x, 1, 1, &cfg)?.k1;
        let k12 = gp_kernel(&d1.x, &d2.x, 1, 1, &cfg)?.k1;
        Ok(Self {
            f11: SpdFactor::new(&k11, "task-1 kernel")?,
            f22: SpdFactor::new(&k22, "task-2 kernel")?,
            k12,
            y1: d1.y.clone(),
            y2: d2.y.clone(),
        })
    }

    fn k21(&self) -> DMatrix<f64> {
        self.k12.transpose()
    }

    fn require_equal_p(&self, what: &'static str) -> Result<usize> {
        let (p1, p2) = (self.y1.len(), self.y2.len());
        if p1 != p2 {
            return Err(Error::DimensionMismatch {
                what,
                left: p1,
                right: p2,
            });
        }
        Ok(p1)
    }

    /// (1/P) Tr(K22^-1 K21 K11^-1 K12).
    pub fn gamma_feature(&self) -> Result<f64> {
        let p = self.require_equal_p("gamma_feature task sizes")?;
        let a = self.f22.solve_mat(&self.k21());
        let b = self.f11.solve_mat(&self.k12);
        let trace = a.transpose().component_mul(&b).sum();
        Ok(trace / p as f64)
    }

    pub fn gamma_rf_rule(&self) -> Result<(f64, f64)> {
        let ny1 = self.y1.norm();
        let ny2 = self.y2.norm();
        if ny1 == 0.0 || ny2 == 0.0 {
            return Err(Error::InvalidConfig("order parameters need nonzero labels".into()));
        }
        let k21 = self.k21();
        // u = K12 K22^-1 Y2 lives in task-1 sample space.
        let u = &self.k12 * self.f22.solve_vec(&self.y2);
        let v = self.f11.solve_vec(&u);
        let rf = 0.5 * (u.norm_squared() + (&k21 * &v).norm_squared()) / ny2.powi(2);

        let a = self.f11.solve_vec(&self.y1);
        let c = self.f22.solve_vec(&(&k21 * a));
        let rule = u.dot(&(&self.k12 * c)) / (ny1 * ny2);
        Ok((rf, rule))
    }

    pub fn f21_full(&self) -> Result<f64> {
        let ny1 = self.y1.norm_squared();
        if ny1 == 0.0 {
            return Err(Error::InvalidConfig("f21_full needs nonzero first-task labels".into()));
        }
        let r = &self.y2 - self.k21() * self.f11.solve_vec(&self.y1);
        let s = self.f22.solve_vec(&r);
        Ok((&self.k12 * s).norm_squared() / ny1)
    }

    /// Combined similarity on internally label-normalized data.
    pub fn gamma_sim(&self) -> Result<f64> {
        let p = self.require_equal_p("gamma_sim task sizes")? as f64;
        let q1 = self.y1.dot(&self.f11.solve_vec(&self.y1)) / p;
        let q2 = self.y2.dot(&self.f22.solve_vec(&self.y2)) / p;
        if q1 <= 0.0 || q2 <= 0.0 {
            return Err(Error::InvalidConfig(
                "gamma_sim normalization needs positive label quadratic forms".into(),
            ));
        }
        let y1 = &self.y1 / q1.sqrt();
        let y2 = &self.y2 / q2.sqrt();
        let gf = self.gamma_feature()?;
        // w = K22^-1 K21 K11^-1 Y1 reused by both label terms.
        let a = self.f11.solve_vec(&y1);
        let w = self.f22.solve_vec(&(self.k21() * a));
        let c = y2.dot(&w) / p;
        let q = (&self.k12 * &w).dot(&self.f11.solve_vec(&y1)) / p;
        Ok(gf + c * c - q)
    }
}

/// Input-subspace overlap of two tasks through depth-L stationary kernels.
pub fn gamma_feature(d1: &Dataset, d2: &Dataset, cfg: &KernelConfig) -> Result<f64> {
    PairKernels::new(d1, d2, cfg)?.gamma_feature()
}

/// Relevant-feature similarity and rule similarity (symmetric-task forms).
pub fn gamma_rf_rule(d1: &Dataset, d2: &Dataset, cfg: &KernelConfig) -> Result<(f64, f64)> {
    PairKernels::new(d1, d2, cfg)?.gamma_rf_rule()
}

/// Short-term forgetting predicted from the order parameters alone.
pub fn predict_f21(ops: &OrderParameters) -> f64 {
    2.0 * (ops.gamma_rf - ops.gamma_rule)
}

/// Exact quadratic-form expression for the forgetting of task 1 right after
/// learning task 2 (random-feature regime).
pub fn f21_full(d1: &Dataset, d2: &Dataset, cfg: &KernelConfig) -> Result<f64> {
    PairKernels::new(d1, d2, cfg)?.f21_full()
}

/// Combined similarity; always evaluated on depth-1 stationary kernels with
/// unit prior variance and internally normalized labels.
pub fn gamma_sim(d1: &Dataset, d2: &Dataset, cfg: &KernelConfig) -> Result<f64> {
    let cfg = KernelConfig {
        depth: 1,
        sigma_sq: 1.0,
        ..cfg.clone()
    };
    PairKernels::new(d1, d2, &cfg)?.gamma_sim()
}

/// Critical load predicted by the combined similarity.
pub fn alpha_c(gamma_sim: f64) -> f64 {
    if gamma_sim > 0.0 {
        gamma_sim.powi(-2)
    } else {
        f64::INFINITY
    }
}

/// Phase classification. The interpolation threshold belongs to the
/// overfitting side, the critical load to the generalizing side.
pub fn classify_regime(alpha: f64, gamma_sim: f64) -> PhasePoint {
    let ac = alpha_c(gamma_sim);
    let regime = if alpha < 1.0 {
        Regime::Fr
    } else if alpha < ac {
        Regime::Of
    } else {
        Regime::G
    };
    PhasePoint {
        alpha,
        gamma_sim,
        regime,
        alpha_c: ac,
    }
}

/// All order parameters for one pair in a single pass, sharing kernel
/// factorizations. `gamma_sim` still uses its own depth-1 kernels.
pub fn order_parameters(d1: &Dataset, d2: &Dataset, cfg: &KernelConfig) -> Result<OrderParameters> {
    let pair = PairKernels::new(d1, d2, cfg)?;
    let gf = pair.gamma_feature()?;
    let (rf, rule) = pair.gamma_rf_rule()?;
    let gs = gamma_sim(d1, d2, cfg)?;
    Ok(OrderParameters {
        gamma_feature: gf,
        gamma_rf: rf,
        gamma_rule: rule,
        conflict: rf - rule,
        gamma_sim: gs,
        depth_used: cfg.depth,
        pair: (d1.task_id.clone(), d2.task_id.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Nonlinearity;
    use crate::data::Split;
    use crate::rng::keyed_rng;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_dataset(p: usize, n0: usize, purpose: &str) -> Dataset {
        let mut rng = keyed_rng(21, 0, purpose);
        let x = DMatrix::from_fn(p, n0, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(p, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
        Dataset::new(x, y, purpose, Split::Train).unwrap()
    }

    fn cfg(depth: usize, nl: Nonlinearity, n0: usize) -> KernelConfig {
        KernelConfig {
            depth,
            nonlinearity: nl,
            sigma_sq: 1.0,
            lambda: Lambda::Infinite,
            input_dim: n0,
        }
    }

    #[test]
    fn identical_tasks_are_maximally_similar() {
        let d = random_dataset(24, 12, "ident");
        let c = cfg(2, Nonlinearity::Relu, 12);
        let ops = order_parameters(&d, &d, &c).unwrap();
        assert_relative_eq!(ops.gamma_feature, 1.0, epsilon = 1e-8);
        assert_relative_eq!(ops.gamma_rf, 1.0, epsilon = 1e-8);
        assert_relative_eq!(ops.gamma_rule, 1.0, epsilon = 1e-8);
        assert_relative_eq!(ops.gamma_sim, 1.0, epsilon = 1e-8);
        assert!(f21_full(&d, &d, &c).unwrap() < 1e-12);
        assert!(predict_f21(&ops).abs() < 1e-8);
    }

    #[test]
    fn label_flip_inverts_rule_similarity_only() {
        let d1 = random_dataset(16, 10, "flip");
        let mut d2 = d1.clone();
        d2.y = -d2.y.clone();
        let c = cfg(1, Nonlinearity::Relu, 10);
        let ops = order_parameters(&d1, &d2, &c).unwrap();
        assert_relative_eq!(ops.gamma_rf, 1.0, epsilon = 1e-8);
        assert_relative_eq!(ops.gamma_rule, -1.0, epsilon = 1e-8);
        assert_relative_eq!(ops.conflict, 2.0, epsilon = 1e-8);
        assert_relative_eq!(predict_f21(&ops), 4.0, epsilon = 1e-7);
    }

    #[test]
    fn disjoint_linear_subspaces_decouple() {
        let mut rng = keyed_rng(5, 0, "subspace");
        let p = 10;
        let x1 = DMatrix::from_fn(p, 12, |_, j| {
            if j < 6 { rng.sample::<f64, _>(StandardNormal) } else { 0.0 }
        });
        let x2 = DMatrix::from_fn(p, 12, |_, j| {
            if j >= 6 { rng.sample::<f64, _>(StandardNormal) } else { 0.0 }
        });
        let y = DVector::from_fn(p, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        let d1 = Dataset::new(x1, y.clone(), "s1", Split::Train).unwrap();
        let d2 = Dataset::new(x2, y, "s2", Split::Train).unwrap();
        let c = cfg(1, Nonlinearity::Linear, 12);
        let ops = order_parameters(&d1, &d2, &c).unwrap();
        assert_relative_eq!(ops.gamma_feature, 0.0, epsilon = 1e-12);
        assert_relative_eq!(ops.gamma_rf, 0.0, epsilon = 1e-12);
        assert_relative_eq!(ops.gamma_rule, 0.0, epsilon = 1e-12);
        assert!(f21_full(&d1, &d2, &c).unwrap() < 1e-12);
    }

    #[test]
    fn rule_similarity_bounded_by_feature_similarity() {
        let c = cfg(1, Nonlinearity::Relu, 9);
        for k in 0..6 {
            let d1 = random_dataset(14, 9, &format!("cs-a{k}"));
            let d2 = random_dataset(14, 9, &format!("cs-b{k}"));
            let (rf, rule) = gamma_rf_rule(&d1, &d2, &c).unwrap();
            assert!(rule.abs() <= rf + 1e-10, "rf {rf}, rule {rule}");
        }
    }

    #[test]
    fn gamma_sim_ignores_label_scale() {
        let d1 = random_dataset(12, 8, "scale-a");
        let d2 = random_dataset(12, 8, "scale-b");
        let c = cfg(3, Nonlinearity::Relu, 8);
        let base = gamma_sim(&d1, &d2, &c).unwrap();
        let mut d1s = d1.clone();
        let mut d2s = d2.clone();
        d1s.y *= 7.5;
        d2s.y *= 0.03;
        assert_relative_eq!(gamma_sim(&d1s, &d2s, &c).unwrap(), base, epsilon = 1e-10);
    }

    #[test]
    fn critical_load_from_similarity() {
        assert_relative_eq!(alpha_c(0.81), 1.0 / (0.81 * 0.81), epsilon = 1e-12);
        assert_relative_eq!(alpha_c(0.56), 1.0 / (0.56 * 0.56), epsilon = 1e-12);
        assert!(alpha_c(-0.2).is_infinite());
        assert!(alpha_c(0.0).is_infinite());
    }

    #[test]
    fn regime_boundaries_follow_the_closed_left_convention() {
        assert_eq!(classify_regime(0.5, -0.3).regime, Regime::Fr);
        assert_eq!(classify_regime(2.0, 0.81).regime, Regime::G);
        assert_eq!(classify_regime(2.0, -0.1).regime, Regime::Of);
        assert_eq!(classify_regime(1.0, 0.5).regime, Regime::Of);
        let ac = alpha_c(0.5);
        assert_eq!(classify_regime(ac, 0.5).regime, Regime::G);
        assert_eq!(classify_regime(ac - 1e-9, 0.5).regime, Regime::Of);
    }
}
