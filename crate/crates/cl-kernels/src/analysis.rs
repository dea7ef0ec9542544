//! Curve analysis: saturating-exponential fits of long-term forgetting,
//! variance decomposition across the order parameters, and boundary
//! estimation from solver or simulation curves.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

// ---------------------------------------------------------------------------
// saturating-exponential fit

/// Fit of `F(t) = f_max * (1 - exp(-(t - 1) / tau_f))`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExpFit {
    pub f_max: f64,
    pub tau_f: f64,
    /// Root-mean-square misfit over the (possibly truncated) series.
    pub residual: f64,
    /// False when the series is identically zero and `tau_f` carries no
    /// information.
    pub tau_defined: bool,
}

/// Least-squares fit of a saturating exponential to a forgetting series.
///
/// The series is truncated after its last maximum (declining tails of
/// seed-averaged curves are not described by the model). For each start
/// `tau in {0.5, 2, 8, 32}` the amplitude is profiled out exactly and the
/// timescale optimized on a log scale; the best of the four local fits is
/// returned.
pub fn fit_exponential(series: &[(f64, f64)]) -> Result<ExpFit> {
    if series.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "exponential fit needs at least 3 points, got {}",
            series.len()
        )));
    }
    // Truncate after the last point attaining the maximum, so saturated
    // plateaus survive and declining tails are dropped.
    let cut = series
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let pts = &series[..=cut];
    if pts.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "exponential fit: only {} points remain after truncating at the maximum",
            pts.len()
        )));
    }
    if pts.iter().all(|&(_, f)| f == 0.0) {
        return Ok(ExpFit {
            f_max: 0.0,
            tau_f: 0.0,
            residual: 0.0,
            tau_defined: false,
        });
    }

    // Amplitude profiled at fixed tau; returns (sse, f_max).
    let profile = |tau: f64| -> (f64, f64) {
        let mut ww = 0.0;
        let mut wf = 0.0;
        for &(t, f) in pts {
            let w = 1.0 - (-(t - 1.0) / tau).exp();
            ww += w * w;
            wf += w * f;
        }
        let f_max = if ww > 0.0 { (wf / ww).max(0.0) } else { 0.0 };
        let sse = pts
            .iter()
            .map(|&(t, f)| {
                let w = 1.0 - (-(t - 1.0) / tau).exp();
                (f_max * w - f).powi(2)
            })
            .sum::<f64>();
        (sse, f_max)
    };

    let mut best: Option<(f64, f64, f64)> = None;
    for start in [0.5_f64, 2.0, 8.0, 32.0] {
        // Golden-section on ln(tau) around the start.
        let mut lo = start.ln() - 4.0;
        let mut hi = start.ln() + 4.0;
        let phi = 0.5 * (5.0_f64.sqrt() - 1.0);
        let mut a = hi - phi * (hi - lo);
        let mut b = lo + phi * (hi - lo);
        let mut fa = profile(a.exp()).0;
        let mut fb = profile(b.exp()).0;
        for _ in 0..90 {
            if fa < fb {
                hi = b;
                b = a;
                fb = fa;
                a = hi - phi * (hi - lo);
                fa = profile(a.exp()).0;
            } else {
                lo = a;
                a = b;
                fa = fb;
                b = lo + phi * (hi - lo);
                fb = profile(b.exp()).0;
            }
        }
        let tau = (0.5 * (lo + hi)).exp();
        let (sse, f_max) = profile(tau);
        if best.map_or(true, |(s, _, _)| sse < s) {
            best = Some((sse, f_max, tau));
        }
    }
    let (sse, f_max, tau_f) = best.unwrap();
    Ok(ExpFit {
        f_max,
        tau_f,
        residual: (sse / pts.len() as f64).sqrt(),
        tau_defined: true,
    })
}

// ---------------------------------------------------------------------------
// proportion of variance explained

/// Variance decomposition of a forgetting statistic over the three order
/// parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PveResult {
    pub r2_full: f64,
    /// Keys `gamma_feature`, `gamma_rf`, `gamma_rule`.
    pub pve: BTreeMap<String, f64>,
    pub normalized: bool,
}

const OP_NAMES: [&str; 3] = ["gamma_feature", "gamma_rf", "gamma_rule"];

/// R^2 of an intercept-plus-columns regression, rank-deficiency tolerated.
fn r_squared(y: &DVector<f64>, cols: &[DVector<f64>]) -> f64 {
    let n = y.len();
    let mut x = DMatrix::zeros(n, cols.len() + 1);
    for i in 0..n {
        x[(i, 0)] = 1.0;
    }
    for (j, c) in cols.iter().enumerate() {
        x.set_column(j + 1, c);
    }
    let beta = x
        .clone()
        .svd(true, true)
        .solve(y, 1e-12)
        .expect("svd solve is infallible with both factors");
    let resid = y - x * beta;
    let mean = y.mean();
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if sst <= 0.0 {
        return 0.0;
    }
    1.0 - resid.norm_squared() / sst
}

/// Leave-one-out proportion of variance explained per order parameter.
///
/// Each entry is `(R2_full - R2_without_that_column) / R2_full`, with tiny
/// collinearity negatives clamped to zero before normalizing the three
/// entries to sum to one. A constant column explains nothing and gets 0.
pub fn pve(dependent: &DVector<f64>, ops_table: &DMatrix<f64>) -> Result<PveResult> {
    let n = dependent.len();
    if ops_table.nrows() != n {
        return Err(Error::DimensionMismatch {
            what: "pve rows",
            left: ops_table.nrows(),
            right: n,
        });
    }
    if ops_table.ncols() != 3 {
        return Err(Error::DimensionMismatch {
            what: "pve op columns",
            left: ops_table.ncols(),
            right: 3,
        });
    }
    if n < 5 {
        return Err(Error::InvalidConfig(format!(
            "pve needs at least 5 rows, got {n}"
        )));
    }
    let cols: Vec<DVector<f64>> = (0..3).map(|j| ops_table.column(j).into_owned()).collect();
    let r2_full = r_squared(dependent, &cols);
    // Unrelated-dependent gate: the adjusted R^2, which is nonpositive
    // exactly when the raw R^2 sits at or below the chance level of three
    // regressors.
    let adjusted = 1.0 - (1.0 - r2_full) * (n as f64 - 1.0) / (n as f64 - 4.0);
    if adjusted <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "pve: the dependent variable is unrelated to the order parameters \
             (full-model R^2 = {r2_full:.3e}, adjusted {adjusted:.3e})"
        )));
    }
    let mut raw = [0.0; 3];
    for i in 0..3 {
        let reduced: Vec<DVector<f64>> = cols
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, c)| c.clone())
            .collect();
        raw[i] = ((r2_full - r_squared(dependent, &reduced)) / r2_full).max(0.0);
    }
    let total: f64 = raw.iter().sum();
    let mut pve = BTreeMap::new();
    for (name, &v) in OP_NAMES.iter().zip(&raw) {
        let share = if total > 0.0 { v / total } else { 0.0 };
        pve.insert((*name).into(), share);
    }
    Ok(PveResult {
        r2_full,
        pve,
        normalized: total > 0.0,
    })
}

// ---------------------------------------------------------------------------
// empirical boundary estimation

/// How to read the critical load off a measured curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryMethod {
    /// Steepest centered slope of forgetting versus load.
    SteepestF21,
    /// First crossing of the half-range of the generalization curve.
    GMidpoint,
}

/// Estimate the critical load from a `(alpha, value)` curve, using only the
/// points with `alpha > 1`.
pub fn estimate_alpha_c(curve: &[(f64, f64)], method: BoundaryMethod) -> Result<f64> {
    let pts: Vec<(f64, f64)> = curve.iter().copied().filter(|&(a, _)| a > 1.0).collect();
    if pts.len() < 5 {
        return Err(Error::InvalidConfig(format!(
            "boundary estimation needs at least 5 grid points above alpha = 1, got {}",
            pts.len()
        )));
    }
    if pts.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::InvalidConfig(
            "boundary estimation needs strictly increasing alpha".into(),
        ));
    }
    let lo = pts.iter().map(|&(_, v)| v).fold(f64::INFINITY, f64::min);
    let hi = pts.iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 1e-12 * hi.abs().max(1.0)) {
        return Err(Error::InvalidConfig(
            "no transition detected: the curve is flat over alpha > 1".into(),
        ));
    }
    match method {
        BoundaryMethod::SteepestF21 => {
            let mut best = (0.0, pts[1].0);
            for i in 1..pts.len() - 1 {
                let slope = (pts[i + 1].1 - pts[i - 1].1) / (pts[i + 1].0 - pts[i - 1].0);
                if slope.abs() > best.0 {
                    best = (slope.abs(), pts[i].0);
                }
            }
            Ok(best.1)
        }
        BoundaryMethod::GMidpoint => {
            let mid = 0.5 * (hi + lo);
            for w in pts.windows(2) {
                let (a0, v0) = w[0];
                let (a1, v1) = w[1];
                if (v0 - mid) == 0.0 {
                    return Ok(a0);
                }
                if (v0 - mid) * (v1 - mid) < 0.0 {
                    // Linear interpolation inside the crossing cell.
                    return Ok(a0 + (mid - v0) / (v1 - v0) * (a1 - a0));
                }
            }
            Ok(pts[pts.len() - 1].0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    use crate::rng::keyed_rng;

    fn model(f_max: f64, tau: f64, t: f64) -> f64 {
        f_max * (1.0 - (-(t - 1.0) / tau).exp())
    }

    #[test]
    fn exact_series_recovers_its_parameters() {
        let series: Vec<(f64, f64)> = (1..=20).map(|t| (t as f64, model(0.5, 3.0, t as f64))).collect();
        let fit = fit_exponential(&series).unwrap();
        assert!((fit.f_max - 0.5).abs() < 1e-6);
        assert!((fit.tau_f - 3.0).abs() < 1e-6);
        assert!(fit.residual < 1e-8);
        assert!(fit.tau_defined);
    }

    #[test]
    fn zero_series_flags_the_timescale() {
        let series: Vec<(f64, f64)> = (1..=10).map(|t| (t as f64, 0.0)).collect();
        let fit = fit_exponential(&series).unwrap();
        assert_eq!(fit.f_max, 0.0);
        assert!(!fit.tau_defined);
        assert!(matches!(
            fit_exponential(&series[..2]),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn noisy_series_recovers_within_five_percent() {
        let mut rng = keyed_rng(59, 0, "fit-noise");
        let series: Vec<(f64, f64)> = (1..=40)
            .map(|t| {
                let noise: f64 = rng.sample(StandardNormal);
                (t as f64, model(0.8, 6.0, t as f64) + 0.01 * noise)
            })
            .collect();
        let fit = fit_exponential(&series).unwrap();
        assert!((fit.f_max - 0.8).abs() < 0.05 * 0.8, "f_max {}", fit.f_max);
        assert!((fit.tau_f - 6.0).abs() < 0.05 * 6.0, "tau {}", fit.tau_f);
    }

    #[test]
    fn fits_are_scale_equivariant() {
        let series: Vec<(f64, f64)> = (1..=15)
            .map(|t| (t as f64, model(0.31, 2.2, t as f64) + 0.004 * ((t * 7 % 5) as f64 - 2.0)))
            .collect();
        let scaled: Vec<(f64, f64)> = series.iter().map(|&(t, f)| (t, 100.0 * f)).collect();
        let a = fit_exponential(&series).unwrap();
        let b = fit_exponential(&scaled).unwrap();
        assert!((b.f_max - 100.0 * a.f_max).abs() < 1e-8 * b.f_max.abs().max(1.0));
        assert!((b.tau_f - a.tau_f).abs() < 1e-8 * a.tau_f);
    }

    #[test]
    fn declining_tails_are_truncated_at_the_maximum() {
        let mut series: Vec<(f64, f64)> = (1..=12).map(|t| (t as f64, model(0.5, 3.0, t as f64))).collect();
        for t in 13..=20 {
            series.push((t as f64, 0.45 - 0.01 * (t - 12) as f64));
        }
        let fit = fit_exponential(&series).unwrap();
        let manual = fit_exponential(&series[..12]).unwrap();
        assert_eq!(fit.tau_f, manual.tau_f);
        assert!((fit.f_max - 0.5).abs() < 1e-6);
        assert!((fit.tau_f - 3.0).abs() < 1e-5);
    }

    fn ops_table(n: usize) -> DMatrix<f64> {
        let mut rng = keyed_rng(59, 1, "pve-ops");
        DMatrix::from_fn(n, 3, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn single_variable_dependence_takes_all_the_variance() {
        let ops = ops_table(24);
        let dep = ops.column(1).into_owned();
        let res = pve(&dep, &ops).unwrap();
        assert!(res.r2_full > 1.0 - 1e-10);
        assert!((res.pve["gamma_rf"] - 1.0).abs() < 1e-6);
        assert!(res.pve["gamma_feature"] < 1e-6);
        assert!(res.pve["gamma_rule"] < 1e-6);
        let total: f64 = res.pve.values().sum();
        assert!((total - 1.0).abs() < 1e-8);
        assert!(res.normalized);
    }

    #[test]
    fn conflict_style_dependence_ignores_the_feature_overlap() {
        let ops = ops_table(30);
        let dep = ops.column(1) - ops.column(2);
        let res = pve(&dep, &ops).unwrap();
        assert!(res.pve["gamma_feature"] < 1e-6);
        assert!(res.pve["gamma_rf"] > 0.2);
        assert!(res.pve["gamma_rule"] > 0.2);
    }

    #[test]
    fn unrelated_dependents_and_short_tables_are_rejected() {
        let ops = ops_table(40);
        let mut rng = keyed_rng(59, 2, "pve-noise");
        let noise = DVector::from_fn(40, |_, _| rng.sample(StandardNormal));
        assert!(matches!(pve(&noise, &ops), Err(Error::InvalidConfig(_))));
        let dep = ops.column(0).into_owned();
        assert!(matches!(
            pve(&dep.rows(0, 4).into_owned(), &ops.rows(0, 4).into_owned()),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn constant_columns_explain_nothing() {
        let mut ops = ops_table(20);
        for i in 0..20 {
            ops[(i, 0)] = 2.0;
        }
        let dep = ops.column(1) + 0.5 * ops.column(2);
        let res = pve(&dep, &ops).unwrap();
        assert!(res.pve["gamma_feature"] < 1e-9);
    }

    fn step_curve(alpha_c: f64) -> Vec<(f64, f64)> {
        let mut curve = Vec::new();
        let mut a = 0.8;
        while a < 3.0 {
            let v = if a > alpha_c { 0.4 * (a - alpha_c) / (3.0 - alpha_c) + 0.1 } else { 0.0 };
            curve.push((a, v));
            a += 0.05;
        }
        curve
    }

    #[test]
    fn steepest_slope_lands_within_one_grid_step() {
        for target in [1.32, 1.52, 2.11] {
            let est = estimate_alpha_c(&step_curve(target), BoundaryMethod::SteepestF21).unwrap();
            assert!((est - target).abs() <= 0.051, "target {target}, est {est}");
        }
    }

    #[test]
    fn midpoint_crossing_lands_within_one_grid_step() {
        let mut curve = Vec::new();
        let mut a = 1.05;
        while a < 2.6 {
            let v = if a < 1.5 { 100.0 } else { 1.0 };
            curve.push((a, v));
            a += 0.05;
        }
        let est = estimate_alpha_c(&curve, BoundaryMethod::GMidpoint).unwrap();
        assert!((est - 1.5).abs() <= 0.051, "est {est}");
    }

    #[test]
    fn flat_curves_are_rejected() {
        let curve: Vec<(f64, f64)> = (0..20).map(|i| (1.05 + 0.05 * i as f64, 0.7)).collect();
        for m in [BoundaryMethod::SteepestF21, BoundaryMethod::GMidpoint] {
            assert!(matches!(
                estimate_alpha_c(&curve, m),
                Err(Error::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn points_at_or_below_one_are_ignored() {
        let mut curve = vec![(0.5, 5.0), (0.9, 5.0), (1.0, 5.0)];
        curve.extend(step_curve(1.4).into_iter().filter(|&(a, _)| a > 1.0));
        let est = estimate_alpha_c(&curve, BoundaryMethod::SteepestF21).unwrap();
        assert!((est - 1.4).abs() <= 0.051);
    }
}
