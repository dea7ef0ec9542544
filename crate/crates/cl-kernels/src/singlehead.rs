//! Sequential mean predictor and its fluctuations for a single shared
//! readout.
//!
//! Training tasks one after another leaves the network function a sum of
//! kernel regressors, one per task, whose coefficients solve a triangular
//! recursion: each task only has to fit what earlier tasks left unexplained.
//! The same cached factorizations then drive an iterative covariance
//! recursion that yields the predictor variance at any query points.
//!
//! At infinite coupling the effective cross-time kernels degenerate; the
//! kernel module hands back their rescaled limits (tangent kernel between
//! post-first tasks, prior-scaled stationary kernel against task 1), and the
//! coefficients stored here are the correspondingly rescaled ones. All
//! formulas below are written against those effective blocks, so finite and
//! infinite coupling share one code path.

use nalgebra::{DMatrix, DVector};

use crate::config::{KernelConfig, Lambda};
use crate::data::Dataset;
use crate::kernel::{gp_diag, gp_kernel};
use crate::linalg::SpdFactor;
use crate::temporal::temporal_factors;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Time-dependent effective kernels with all temporal prefactors.
    FullGibbs,
    /// Every effective kernel replaced by the stationary same-branch kernel.
    RandomFeature,
}

pub struct SingleHeadSolution {
    /// Regression coefficients per task, in task order. At infinite coupling
    /// these are the coupling-rescaled coefficients matching the rescaled
    /// effective kernels.
    pub v_means: Vec<DVector<f64>>,
    pub mode: Mode,
    pub cfg: KernelConfig,
    seq: Vec<Dataset>,
    /// Cached factorizations of the diagonal effective blocks.
    factors: Vec<SpdFactor>,
}

/// Normalized squared error `sum (pred - y)^2 / |y|^2`.
pub fn loss(pred: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    let n = y.norm_squared();
    if n == 0.0 {
        return Err(Error::InvalidConfig("loss normalization needs nonzero labels".into()));
    }
    if pred.len() != y.len() {
        return Err(Error::DimensionMismatch {
            what: "prediction vs label length",
            left: pred.len(),
            right: y.len(),
        });
    }
    Ok((pred - y).norm_squared() / n)
}

/// Solves the sequential-coefficient recursion for a task sequence.
pub fn fit_sequence(seq: &[Dataset], cfg: &KernelConfig, mode: Mode) -> Result<SingleHeadSolution> {
    if seq.is_empty() {
        return Err(Error::InvalidConfig("fit_sequence needs at least one task".into()));
    }
    let (p, n0) = (seq[0].p(), seq[0].n0());
    for d in seq {
        if d.p() != p || d.n0() != n0 {
            return Err(Error::DimensionMismatch {
                what: "task sizes within a sequence",
                left: d.p().max(d.n0()),
                right: p.max(n0),
            });
        }
    }
    let sol_cfg = cfg.clone();
    let mut sol = SingleHeadSolution {
        v_means: Vec::with_capacity(seq.len()),
        mode,
        cfg: sol_cfg,
        seq: seq.to_vec(),
        factors: Vec::with_capacity(seq.len()),
    };
    for t in 1..=seq.len() {
        let xt = &seq[t - 1].x;
        let mut rhs = seq[t - 1].y.clone();
        for tp in 1..t {
            let block = sol.block(xt, t, &seq[tp - 1].x, tp)?;
            rhs -= block * &sol.v_means[tp - 1];
        }
        let diag = sol.block(xt, t, xt, t)?;
        let factor = SpdFactor::new(&diag, "diagonal effective kernel")?;
        sol.v_means.push(factor.solve_vec(&rhs));
        sol.factors.push(factor);
    }
    Ok(sol)
}

impl SingleHeadSolution {
    pub fn tasks(&self) -> &[Dataset] {
        &self.seq
    }

    /// Effective kernel block between rows of `xa` at time `ta` and rows of
    /// `xb` at time `tb`.
    fn block(&self, xa: &DMatrix<f64>, ta: usize, xb: &DMatrix<f64>, tb: usize) -> Result<DMatrix<f64>> {
        match self.mode {
            Mode::FullGibbs => Ok(gp_kernel(xa, xb, ta, tb, &self.cfg)?.ktilde),
            Mode::RandomFeature => {
                let cfg = KernelConfig {
                    lambda: Lambda::Infinite,
                    ..self.cfg.clone()
                };
                Ok(gp_kernel(xa, xb, 1, 1, &cfg)?.k1)
            }
        }
    }

    /// Mean predictor after the full sequence.
    pub fn predict(&self, x_query: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.predict_at(self.seq.len(), x_query)
    }

    /// Mean predictor as it stood right after task `t` (1-based).
    pub fn predict_at(&self, t: usize, x_query: &DMatrix<f64>) -> Result<DVector<f64>> {
        if t == 0 || t > self.seq.len() {
            return Err(Error::InvalidConfig(format!("predict_at time {t} outside 1..={}", self.seq.len())));
        }
        let mut out = DVector::zeros(x_query.nrows());
        for tp in 1..=t {
            let block = self.block(x_query, t, &self.seq[tp - 1].x, tp)?;
            out += block * &self.v_means[tp - 1];
        }
        Ok(out)
    }

    /// Predictor variance at the query points after the full sequence.
    /// Requires the full time-dependent mode.
    pub fn predictor_variance(&self, x_query: &DMatrix<f64>) -> Result<DVector<f64>> {
        if self.mode != Mode::FullGibbs {
            return Err(Error::Unsupported(
                "predictor variance is defined for the full time-dependent mode".into(),
            ));
        }
        let tt = self.seq.len();
        let cfg = &self.cfg;
        let infinite = cfg.lambda.is_infinite();

        // Effective diagonal-inverse couplings between coefficient and
        // conjugate fluctuations, upper triangle only (zero below).
        // a[t][tp] with 1-based times stored at [t-1][tp-1].
        let mut a: Vec<Vec<Option<DMatrix<f64>>>> = vec![vec![None; tt]; tt];
        // Same-pair effective blocks, cached for reuse.
        let mut ktil: Vec<Vec<Option<DMatrix<f64>>>> = vec![vec![None; tt]; tt];
        for t in 1..=tt {
            for tp in 1..=tt {
                if ktil[t - 1][tp - 1].is_none() {
                    let b = self.block(&self.seq[t - 1].x, t, &self.seq[tp - 1].x, tp)?;
                    ktil[tp - 1][t - 1] = Some(b.transpose());
                    ktil[t - 1][tp - 1] = Some(b);
                }
            }
        }
        let kt = |t: usize, tp: usize| ktil[t - 1][tp - 1].as_ref().unwrap();

        for tp in 1..=tt {
            a[tp - 1][tp - 1] = Some(self.factors[tp - 1].solve_mat(&DMatrix::identity(
                self.seq[tp - 1].p(),
                self.seq[tp - 1].p(),
            )));
            for t in (1..tp).rev() {
                let mut acc = DMatrix::zeros(self.seq[t - 1].p(), self.seq[tp - 1].p());
                for tau in (t + 1)..=tp {
                    acc += kt(t, tau) * a[tau - 1][tp - 1].as_ref().unwrap();
                }
                a[t - 1][tp - 1] = Some(-self.factors[t - 1].solve_mat(&acc));
            }
        }
        let ap = |t: usize, tp: usize| a[t - 1][tp - 1].as_ref().unwrap();

        // Coefficient-coefficient covariances, t <= tp; the first row is the
        // conjugate-coupling row because the first task has no anchor.
        let mut v: Vec<Vec<Option<DMatrix<f64>>>> = vec![vec![None; tt]; tt];
        v[0][0] = Some(ap(1, 1).clone());
        for tp in 2..=tt {
            v[0][tp - 1] = Some(ap(1, tp).clone());
            for t in 2..=tp {
                let pt = self.seq[t - 1].p();
                let mut acc = DMatrix::zeros(pt, self.seq[tp - 1].p());
                for tau in 2..t {
                    acc += kt(t, tau) * v[tau - 1][tp - 1].as_ref().unwrap();
                }
                for tau in 2..=tp {
                    let m0 = temporal_factors(cfg, t, tau).m0;
                    if m0 != 0.0 {
                        let ks = gp_kernel(&self.seq[t - 1].x, &self.seq[tau - 1].x, t, tau, cfg)?;
                        acc += ks.k0 * m0 * ap(tau, tp);
                    }
                }
                if !infinite {
                    acc -= kt(t, t) * ap(t, tp);
                }
                let m1 = temporal_factors(cfg, t, 1).m1;
                let k1 = gp_kernel(&self.seq[t - 1].x, &self.seq[0].x, t, 1, cfg)?.k1;
                acc += k1 * m1 * ap(1, tp);
                v[t - 1][tp - 1] = Some(-self.factors[t - 1].solve_mat(&acc));
            }
        }
        let vc = |t: usize, tp: usize| v[t - 1][tp - 1].as_ref().unwrap();

        // Query-side blocks at the final time.
        let mut ktq = Vec::with_capacity(tt);
        let mut k0q = Vec::with_capacity(tt);
        for t in 1..=tt {
            ktq.push(self.block(x_query, tt, &self.seq[t - 1].x, t)?);
            let ks = gp_kernel(x_query, &self.seq[t - 1].x, tt, t, cfg)?;
            let m0 = temporal_factors(cfg, t, tt).m0;
            k0q.push(ks.k0 * m0);
        }

        let m1_diag = temporal_factors(cfg, tt, tt).m1;
        let mut var = gp_diag(x_query, tt, cfg)? * m1_diag;

        // Quadratic coefficient-fluctuation term, symmetric in (t, tp).
        for t in 1..=tt {
            for tp in t..=tt {
                let m = &ktq[t - 1] * vc(t, tp);
                let contrib = m.component_mul(&ktq[tp - 1]).column_sum();
                let w = if t == tp { 1.0 } else { 2.0 };
                var -= contrib * w;
            }
        }
        // Cross term between conjugate and coefficient fluctuations.
        for tp in 1..=tt {
            for t in 2..=tp {
                let m = &k0q[t - 1] * ap(t, tp);
                var -= m.component_mul(&ktq[tp - 1]).column_sum() * 2.0;
            }
        }
        Ok(var)
    }
}

/// Losses of the evolving predictor on every task: entry (t, tp) is the loss
/// after task t+1 evaluated on task tp+1 (both 0-based in the matrix, tasks
/// 1-based in the text). With `test` sequences, also returns generalization
/// losses normalized per task by its single-task test loss.
pub struct SequenceReport {
    pub f: DMatrix<f64>,
    pub g: Option<DMatrix<f64>>,
}

pub fn forgetting_matrix(
    train: &[Dataset],
    test: Option<&[Dataset]>,
    cfg: &KernelConfig,
    mode: Mode,
) -> Result<SequenceReport> {
    let sol = fit_sequence(train, cfg, mode)?;
    let tt = train.len();
    let mut f = DMatrix::zeros(tt, tt);
    for t in 1..=tt {
        for tp in 1..=tt {
            let pred = sol.predict_at(t, &train[tp - 1].x)?;
            f[(t - 1, tp - 1)] = loss(&pred, &train[tp - 1].y)?;
        }
    }
    let g = match test {
        None => None,
        Some(test) => {
            if test.len() != tt {
                return Err(Error::DimensionMismatch {
                    what: "test sequence length vs train",
                    left: test.len(),
                    right: tt,
                });
            }
            let mut g = DMatrix::zeros(tt, tt);
            for tp in 1..=tt {
                let alone = fit_sequence(&train[tp - 1..tp], cfg, mode)?;
                let base = loss(&alone.predict(&test[tp - 1].x)?, &test[tp - 1].y)?;
                for t in 1..=tt {
                    let pred = sol.predict_at(t, &test[tp - 1].x)?;
                    g[(t - 1, tp - 1)] = loss(&pred, &test[tp - 1].y)? / base;
                }
            }
            Some(g)
        }
    };
    Ok(SequenceReport { f, g })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Nonlinearity;
    use crate::data::Split;
    use crate::orderparams;
    use crate::rng::keyed_rng;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn dataset(p: usize, n0: usize, purpose: &str) -> Dataset {
        let mut rng = keyed_rng(31, 0, purpose);
        let mut x = DMatrix::from_fn(p, n0, |_, _| rng.sample::<f64, _>(StandardNormal));
        for mut row in x.row_iter_mut() {
            let norm = row.norm();
            row *= (n0 as f64).sqrt() / norm;
        }
        let y = DVector::from_fn(p, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
        Dataset::new(x, y, purpose, Split::Train).unwrap()
    }

    fn queries(p: usize, n0: usize, purpose: &str) -> DMatrix<f64> {
        dataset(p, n0, purpose).x
    }

    fn cfg(depth: usize, nl: Nonlinearity, sigma_sq: f64, lambda: Lambda, n0: usize) -> KernelConfig {
        KernelConfig {
            depth,
            nonlinearity: nl,
            sigma_sq,
            lambda,
            input_dim: n0,
        }
    }

    #[test]
    fn single_task_is_kernel_regression() {
        let d = dataset(18, 9, "sh-t1");
        let xq = queries(7, 9, "sh-t1-q");
        let c = cfg(2, Nonlinearity::Relu, 1.3, Lambda::Finite(0.7), 9);
        let sol = fit_sequence(std::slice::from_ref(&d), &c, Mode::FullGibbs).unwrap();
        let on_train = sol.predict(&d.x).unwrap();
        assert!((on_train - &d.y).amax() < 1e-6);
        // Direct stationary-kernel regression; prior scale cancels.
        let k = gp_kernel(&d.x, &d.x, 1, 1, &c).unwrap().k1;
        let kq = gp_kernel(&xq, &d.x, 1, 1, &c).unwrap().k1;
        let direct = &kq * SpdFactor::new(&k, "t").unwrap().solve_vec(&d.y);
        assert_relative_eq!(sol.predict(&xq).unwrap(), direct, epsilon = 1e-8);
    }

    #[test]
    fn repeating_a_task_adds_nothing_at_infinite_coupling() {
        let d = dataset(14, 8, "sh-rep");
        let c = cfg(1, Nonlinearity::Relu, 1.0, Lambda::Infinite, 8);
        let seq = vec![d.clone(), d.clone()];
        let sol = fit_sequence(&seq, &c, Mode::FullGibbs).unwrap();
        assert!(sol.v_means[1].amax() < 1e-8 * sol.v_means[0].amax());
        let rep = forgetting_matrix(&seq, None, &c, Mode::FullGibbs).unwrap();
        assert!(rep.f[(1, 0)] < 1e-10);
    }

    #[test]
    fn final_task_is_always_interpolated() {
        let seq: Vec<_> = (0..3).map(|k| dataset(10, 12, &format!("sh-seq{k}"))).collect();
        for lambda in [Lambda::Finite(0.4), Lambda::Infinite] {
            let c = cfg(2, Nonlinearity::Relu, 1.1, lambda, 12);
            let rep = forgetting_matrix(&seq, None, &c, Mode::FullGibbs).unwrap();
            for t in 0..3 {
                assert!(rep.f[(t, t)] < 1e-10, "F[{t},{t}] = {}", rep.f[(t, t)]);
            }
        }
    }

    #[test]
    fn coefficients_satisfy_the_recursion() {
        let seq: Vec<_> = (0..3).map(|k| dataset(9, 7, &format!("sh-res{k}"))).collect();
        let c = cfg(1, Nonlinearity::Relu, 0.9, Lambda::Finite(1.5), 7);
        let sol = fit_sequence(&seq, &c, Mode::FullGibbs).unwrap();
        for t in 1..=3 {
            let mut lhs = DVector::zeros(9);
            for tp in 1..=t {
                let b = gp_kernel(&seq[t - 1].x, &seq[tp - 1].x, t, tp, &c).unwrap().ktilde;
                lhs += b * &sol.v_means[tp - 1];
            }
            let resid = (lhs - &seq[t - 1].y).norm();
            assert!(resid < 1e-8 * seq[t - 1].y.norm(), "task {t} residual {resid}");
        }
    }

    #[test]
    fn random_feature_forgetting_equals_quadratic_form() {
        let d1 = dataset(16, 10, "sh-rf1");
        let d2 = dataset(16, 10, "sh-rf2");
        let c = cfg(1, Nonlinearity::Relu, 1.0, Lambda::Infinite, 10);
        let rep = forgetting_matrix(&[d1.clone(), d2.clone()], None, &c, Mode::RandomFeature).unwrap();
        let direct = orderparams::f21_full(&d1, &d2, &c).unwrap();
        assert_relative_eq!(rep.f[(1, 0)], direct, epsilon = 1e-8);
    }

    #[test]
    fn single_task_variance_is_scaled_posterior() {
        let d = dataset(12, 8, "sh-var1");
        let xq = queries(6, 8, "sh-var1-q");
        let c = cfg(2, Nonlinearity::Relu, 1.4, Lambda::Finite(2.0), 8);
        let sol = fit_sequence(std::slice::from_ref(&d), &c, Mode::FullGibbs).unwrap();
        let var = sol.predictor_variance(&xq).unwrap();
        let k = gp_kernel(&d.x, &d.x, 1, 1, &c).unwrap().k1;
        let kq = gp_kernel(&xq, &d.x, 1, 1, &c).unwrap().k1;
        let kf = SpdFactor::new(&k, "t").unwrap();
        let dq = gp_diag(&xq, 1, &c).unwrap();
        for i in 0..6 {
            let row = kq.row(i).transpose();
            let posterior = dq[i] - row.dot(&kf.solve_vec(&row));
            assert_relative_eq!(var[i], c.sigma_sq * posterior, max_relative = 1e-8);
        }
    }

    #[test]
    fn variance_vanishes_where_the_last_task_pins_the_function() {
        let d1 = dataset(10, 9, "sh-pin1");
        let d2 = dataset(10, 9, "sh-pin2");
        let c = cfg(1, Nonlinearity::Relu, 1.0, Lambda::Finite(0.8), 9);
        let sol = fit_sequence(&[d1, d2.clone()], &c, Mode::FullGibbs).unwrap();
        let var_on_last = sol.predictor_variance(&d2.x).unwrap();
        let scale = sol.predictor_variance(&queries(5, 9, "sh-pin-q")).unwrap().amax();
        assert!(var_on_last.amax() < 1e-8 * scale.max(1e-12), "residual {}", var_on_last.amax());
    }

    #[test]
    fn variance_follows_exact_power_of_prior_scale_at_infinite_coupling() {
        let seq: Vec<_> = (0..2).map(|k| dataset(8, 10, &format!("sh-pow{k}"))).collect();
        let xq = queries(5, 10, "sh-pow-q");
        for depth in [1usize, 2] {
            let mut vars = Vec::new();
            for s in [0.01, 0.1] {
                let c = cfg(depth, Nonlinearity::Relu, s * s, Lambda::Infinite, 10);
                let sol = fit_sequence(&seq, &c, Mode::FullGibbs).unwrap();
                vars.push(sol.predictor_variance(&xq).unwrap());
            }
            let expect = 10f64.powi(2 * (depth as i32 + 1));
            for i in 0..5 {
                assert_relative_eq!(vars[1][i] / vars[0][i], expect, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn large_finite_coupling_approaches_the_infinite_path() {
        // Linear networks approach the frozen-coupling limit at rate 1/lambda.
        // For the rectifier the same-point branch overlap enters through
        // acos(1 - delta), so the approach slows to 1/sqrt(lambda); the
        // tolerances below encode those measured rates with ~10x margin.
        let cases = [
            (Nonlinearity::Relu, 8usize, 6usize, 1e8, 1e-3, 1e-4),
            (Nonlinearity::Linear, 4, 9, 1e6, 1e-4, 1e-4),
        ];
        for (nl, p, n0, lam, tol_mean, tol_var) in cases {
            let seq: Vec<_> = (0..3).map(|k| dataset(p, n0, &format!("sh-lim{k}"))).collect();
            let xq = queries(6, n0, "sh-lim-q");
            let cf = cfg(1, nl, 1.0, Lambda::Finite(lam), n0);
            let ci = cfg(1, nl, 1.0, Lambda::Infinite, n0);
            let sf = fit_sequence(&seq, &cf, Mode::FullGibbs).unwrap();
            let si = fit_sequence(&seq, &ci, Mode::FullGibbs).unwrap();
            let dp = (sf.predict(&xq).unwrap() - si.predict(&xq).unwrap()).amax();
            assert!(dp < tol_mean, "{nl:?}: mean gap {dp}");
            let vf = sf.predictor_variance(&xq).unwrap();
            let vi = si.predictor_variance(&xq).unwrap();
            let dv = (vf - &vi).amax() / vi.amax();
            assert!(dv < tol_var, "{nl:?}: variance gap {dv}");
        }
    }

    #[test]
    fn variance_requires_the_full_mode() {
        let d = dataset(6, 5, "sh-mode");
        let c = cfg(1, Nonlinearity::Relu, 1.0, Lambda::Infinite, 5);
        let sol = fit_sequence(std::slice::from_ref(&d), &c, Mode::RandomFeature).unwrap();
        assert!(sol.predictor_variance(&d.x).is_err());
    }

    #[test]
    fn generalization_is_normalized_per_task() {
        let train: Vec<_> = (0..2).map(|k| dataset(10, 7, &format!("sh-g{k}"))).collect();
        let test: Vec<_> = (0..2).map(|k| dataset(10, 7, &format!("sh-gt{k}"))).collect();
        let c = cfg(1, Nonlinearity::Relu, 1.0, Lambda::Infinite, 7);
        let rep = forgetting_matrix(&train, Some(&test), &c, Mode::FullGibbs).unwrap();
        let g = rep.g.unwrap();
        // Right after task 1 the sequence predictor equals the single-task
        // predictor, so its normalized generalization is exactly 1.
        assert_relative_eq!(g[(0, 0)], 1.0, epsilon = 1e-10);
        assert!(g.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}
