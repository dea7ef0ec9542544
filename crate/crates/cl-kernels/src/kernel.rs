//! Two-time kernels of deep linear and ReLU networks.
//!
//! Training a wide network on a task sequence correlates the weights seen at
//! two times t and t'. The resulting input-output covariances are captured by
//! a pair of depth-recursive kernels per layer: a same-branch block `k1` and a
//! cross-branch block `k0`, combined with temporal prefactors into the
//! effective kernel `ktilde` that drives all predictor formulas. Under
//! infinite coupling the effective cross-time kernel degenerates and its
//! rescaled limit is the tangent kernel, computed here by the same recursion.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::config::{KernelConfig, Nonlinearity};
use crate::temporal::temporal_factors;
use crate::{Error, Result};

/// The four kernel blocks for one ordered pair of time indices.
#[derive(Clone, Debug)]
pub struct KernelSet {
    /// Same-branch depth-L kernel block.
    pub k1: DMatrix<f64>,
    /// Cross-branch depth-L kernel block.
    pub k0: DMatrix<f64>,
    /// Effective kernel. Finite coupling: `m1*k1 - m0*k0` with the temporal
    /// prefactors of `(t, t_prime)`. Infinite coupling: the exact limit,
    /// which is `sigma_sq * k1` when either time index is 1 and the
    /// coupling-rescaled tangent kernel when both exceed 1 (the plain
    /// difference vanishes in that limit).
    pub ktilde: DMatrix<f64>,
    /// `k1 - k0`.
    pub kdelta: DMatrix<f64>,
    pub t: usize,
    pub t_prime: usize,
    /// Identifiers of the row and column datasets, for provenance.
    pub sources: (String, String),
}

impl KernelSet {
    pub fn with_sources(mut self, rows: impl Into<String>, cols: impl Into<String>) -> Self {
        self.sources = (rows.into(), cols.into());
        self
    }
}

/// Arc-cosine curve: `(pi - theta) cos(theta) + sin(theta)`.
fn j_curve(theta: f64) -> f64 {
    (PI - theta) * theta.cos() + theta.sin()
}

/// One ReLU layer step for an off-diagonal entry. `a`, `b` are the two
/// prefactored self-overlaps, `c` the prefactored cross overlap.
fn relu_cross(a: f64, b: f64, c: f64) -> f64 {
    let ab = a * b;
    if ab <= 0.0 {
        return 0.0;
    }
    let s = ab.sqrt();
    // Roundoff can push the cosine past +-1; clamp before acos.
    let theta = (c / s).clamp(-1.0, 1.0).acos();
    s / (2.0 * PI) * j_curve(theta)
}

fn check_inputs(xa: &DMatrix<f64>, xb: &DMatrix<f64>, cfg: &KernelConfig) -> Result<()> {
    if xa.ncols() != cfg.input_dim || xb.ncols() != cfg.input_dim {
        return Err(Error::DimensionMismatch {
            what: "kernel input columns vs configured input_dim",
            left: xa.ncols().max(xb.ncols()),
            right: cfg.input_dim,
        });
    }
    if xa.iter().any(|v| !v.is_finite()) || xb.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("kernel inputs contain non-finite values".into()));
    }
    Ok(())
}

/// Result of the layer-by-layer two-time recursion.
struct Blocks {
    cross1: DMatrix<f64>,
    cross0: DMatrix<f64>,
    /// Tangent kernel accumulator (infinite coupling only).
    q: Option<DMatrix<f64>>,
}

/// Runs the depth recursion for times `(t, t_prime)`. With `want_tangent`,
/// also accumulates the tangent kernel alongside (valid at infinite
/// coupling, where every temporal prefactor equals sigma_sq).
fn run_recursion(
    xa: &DMatrix<f64>,
    xb: &DMatrix<f64>,
    t: usize,
    t_prime: usize,
    cfg: &KernelConfig,
    want_tangent: bool,
) -> Blocks {
    let n0 = cfg.input_dim as f64;
    let s2 = cfg.sigma_sq;
    let ma = temporal_factors(cfg, t, t).m1;
    let mb = temporal_factors(cfg, t_prime, t_prime).m1;
    let mx = temporal_factors(cfg, t, t_prime);

    let mut diag_a = DVector::from_fn(xa.nrows(), |i, _| xa.row(i).norm_squared() / n0);
    let mut diag_b = DVector::from_fn(xb.nrows(), |i, _| xb.row(i).norm_squared() / n0);
    let mut cross1 = xa * xb.transpose() / n0;
    let mut cross0 = cross1.clone();
    let mut q = want_tangent.then(|| cross1.clone());

    for _ in 0..cfg.depth {
        match cfg.nonlinearity {
            Nonlinearity::Linear => {
                if let Some(q) = q.as_mut() {
                    // New same-branch block first, then q <- gp + s2 * q.
                    cross1 *= mx.m1;
                    *q = &cross1 + &*q * s2;
                } else {
                    cross1 *= mx.m1;
                }
                cross0 *= mx.m0;
                diag_a *= ma;
                diag_b *= mb;
            }
            Nonlinearity::Relu => {
                let next1 = DMatrix::from_fn(cross1.nrows(), cross1.ncols(), |i, j| {
                    relu_cross(ma * diag_a[i], mb * diag_b[j], mx.m1 * cross1[(i, j)])
                });
                let next0 = DMatrix::from_fn(cross0.nrows(), cross0.ncols(), |i, j| {
                    relu_cross(ma * diag_a[i], mb * diag_b[j], mx.m0 * cross0[(i, j)])
                });
                if let Some(q) = q.as_mut() {
                    // Derivative factor uses the pre-update (previous layer)
                    // same-branch kernel angle.
                    let kdot = DMatrix::from_fn(cross1.nrows(), cross1.ncols(), |i, j| {
                        let ab = diag_a[i] * diag_b[j];
                        if ab <= 0.0 {
                            return 0.0;
                        }
                        let theta = (cross1[(i, j)] / ab.sqrt()).clamp(-1.0, 1.0).acos();
                        (PI - theta) / (2.0 * PI)
                    });
                    *q = &next1 + (s2 * kdot).component_mul(q);
                }
                cross1 = next1;
                cross0 = next0;
                diag_a *= ma / 2.0;
                diag_b *= mb / 2.0;
            }
        }
    }
    Blocks { cross1, cross0, q }
}

/// Computes the four kernel blocks between `xa` at time `t` and `xb` at time
/// `t_prime`, both P x N0 with rows as examples.
pub fn gp_kernel(
    xa: &DMatrix<f64>,
    xb: &DMatrix<f64>,
    t: usize,
    t_prime: usize,
    cfg: &KernelConfig,
) -> Result<KernelSet> {
    check_inputs(xa, xb, cfg)?;
    let stationary_pair = cfg.lambda.is_infinite() && t.min(t_prime) >= 2;
    let blocks = run_recursion(xa, xb, t, t_prime, cfg, stationary_pair);
    let mx = temporal_factors(cfg, t, t_prime);
    let ktilde = match blocks.q {
        Some(q) => q,
        // Covers all finite couplings, and the infinite-coupling pairs with a
        // time index of 1 where m0 = 0 and the limit stays O(1).
        None => &blocks.cross1 * mx.m1 - &blocks.cross0 * mx.m0,
    };
    let kdelta = &blocks.cross1 - &blocks.cross0;
    Ok(KernelSet {
        k1: blocks.cross1,
        k0: blocks.cross0,
        ktilde,
        kdelta,
        t,
        t_prime,
        sources: (String::new(), String::new()),
    })
}

/// Diagonal of the same-branch kernel at equal times `t`: the vector of
/// `k1(x, x)` over the rows of `x`.
pub fn gp_diag(x: &DMatrix<f64>, t: usize, cfg: &KernelConfig) -> Result<DVector<f64>> {
    check_inputs(x, x, cfg)?;
    let n0 = cfg.input_dim as f64;
    let m = temporal_factors(cfg, t, t).m1;
    let step = match cfg.nonlinearity {
        Nonlinearity::Linear => m,
        Nonlinearity::Relu => m / 2.0,
    };
    let mut d = DVector::from_fn(x.nrows(), |i, _| x.row(i).norm_squared() / n0);
    d *= step.powi(cfg.depth as i32);
    Ok(d)
}

/// Tangent kernel at infinite coupling: the parameter-gradient inner-product
/// kernel of the depth-L network, equal to the coupling-rescaled effective
/// kernel in the stationary regime.
pub fn ntk_kernel(xa: &DMatrix<f64>, xb: &DMatrix<f64>, cfg: &KernelConfig) -> Result<DMatrix<f64>> {
    if !cfg.lambda.is_infinite() {
        return Err(Error::InvalidConfig(
            "tangent kernel is defined at infinite coupling; use gp_kernel's ktilde for finite values".into(),
        ));
    }
    check_inputs(xa, xb, cfg)?;
    let blocks = run_recursion(xa, xb, 1, 1, cfg, true);
    Ok(blocks.q.expect("tangent accumulator requested"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    use crate::config::Lambda;
    use crate::rng::keyed_rng;

    fn gaussian_inputs(p: usize, n0: usize, purpose: &str) -> DMatrix<f64> {
        let mut rng = keyed_rng(11, 0, purpose);
        DMatrix::from_fn(p, n0, |_, _| {
            // Box-Muller keeps this free of distribution dependencies.
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
        })
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
    fn linear_blocks_have_closed_form() {
        let xa = gaussian_inputs(7, 12, "lin-a");
        let xb = gaussian_inputs(5, 12, "lin-b");
        let c = cfg(3, Nonlinearity::Linear, 2.0, Lambda::Finite(0.5), 12);
        let ks = gp_kernel(&xa, &xb, 4, 2, &c).unwrap();
        let mx = temporal_factors(&c, 4, 2);
        let base = &xa * xb.transpose() / 12.0;
        assert_relative_eq!(&ks.k1 - &base * mx.m1.powi(3), DMatrix::zeros(7, 5), epsilon = 1e-12);
        assert_relative_eq!(&ks.k0 - &base * mx.m0.powi(3), DMatrix::zeros(7, 5), epsilon = 1e-12);
        let ktilde = &ks.k1 * mx.m1 - &ks.k0 * mx.m0;
        assert_relative_eq!(&ks.ktilde - ktilde, DMatrix::zeros(7, 5), epsilon = 1e-14);
        assert_relative_eq!(&ks.kdelta - (&ks.k1 - &ks.k0), DMatrix::zeros(7, 5), epsilon = 1e-14);
    }

    #[test]
    fn relu_orthogonal_pair_single_layer() {
        let xa = DMatrix::from_row_slice(1, 2, &[2f64.sqrt(), 0.0]);
        let xb = DMatrix::from_row_slice(1, 2, &[0.0, 2f64.sqrt()]);
        let c = cfg(1, Nonlinearity::Relu, 1.0, Lambda::Infinite, 2);
        let ks = gp_kernel(&xa, &xb, 1, 1, &c).unwrap();
        assert_relative_eq!(ks.k1[(0, 0)], 1.0 / (2.0 * PI), epsilon = 1e-14);
    }

    #[test]
    fn relu_diag_halves_per_layer() {
        let x = gaussian_inputs(4, 9, "diag");
        let c = cfg(5, Nonlinearity::Relu, 1.3, Lambda::Finite(2.0), 9);
        let d0 = DVector::from_fn(4, |i, _| x.row(i).norm_squared() / 9.0);
        let m = temporal_factors(&c, 3, 3).m1;
        let expect = d0 * (m / 2.0).powi(5);
        let got = gp_diag(&x, 3, &c).unwrap();
        assert_relative_eq!(got, expect, epsilon = 1e-12);
        let ks = gp_kernel(&x, &x, 3, 3, &c).unwrap();
        for i in 0..4 {
            assert_relative_eq!(ks.k1[(i, i)], got[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn linear_tangent_kernel_depth_factor() {
        let xa = gaussian_inputs(6, 10, "ntk-a");
        let xb = gaussian_inputs(3, 10, "ntk-b");
        let base = &xa * xb.transpose() / 10.0;
        for depth in [1usize, 2, 5] {
            for s2 in [1.0, 1.7] {
                let c = cfg(depth, Nonlinearity::Linear, s2, Lambda::Infinite, 10);
                let q = ntk_kernel(&xa, &xb, &c).unwrap();
                let expect = &base * ((depth as f64 + 1.0) * s2.powi(depth as i32));
                assert_relative_eq!(&q - expect, DMatrix::zeros(6, 3), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn relu_tangent_kernel_unit_self_overlap() {
        // Normalized input against itself, one layer: gp part 1/2 and
        // derivative part 1/2 sum to 1.
        let x = DMatrix::from_row_slice(1, 4, &[2.0, 0.0, 0.0, 0.0]);
        let c = cfg(1, Nonlinearity::Relu, 1.0, Lambda::Infinite, 4);
        let q = ntk_kernel(&x, &x, &c).unwrap();
        assert_relative_eq!(q[(0, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn depth_zero_tangent_kernel_is_input_overlap() {
        let xa = gaussian_inputs(3, 6, "edge-a");
        let c = cfg(0, Nonlinearity::Relu, 1.0, Lambda::Infinite, 6);
        let q = ntk_kernel(&xa, &xa, &c).unwrap();
        assert_relative_eq!(&q - &xa * xa.transpose() / 6.0, DMatrix::zeros(3, 3), epsilon = 1e-15);
    }

    #[test]
    fn blocks_transpose_under_argument_swap() {
        let xa = gaussian_inputs(5, 8, "sym-a");
        let xb = gaussian_inputs(4, 8, "sym-b");
        let c = cfg(3, Nonlinearity::Relu, 1.2, Lambda::Finite(0.7), 8);
        let ab = gp_kernel(&xa, &xb, 4, 2, &c).unwrap();
        let ba = gp_kernel(&xb, &xa, 2, 4, &c).unwrap();
        assert_eq!(ab.k1, ba.k1.transpose());
        assert_eq!(ab.k0, ba.k0.transpose());
        assert_eq!(ab.ktilde, ba.ktilde.transpose());
    }

    #[test]
    fn same_time_relu_kernel_is_psd() {
        let x = gaussian_inputs(20, 6, "psd");
        let c = cfg(2, Nonlinearity::Relu, 1.0, Lambda::Finite(1.0), 6);
        let ks = gp_kernel(&x, &x, 2, 2, &c).unwrap();
        let eigs = ks.k1.clone().symmetric_eigen().eigenvalues;
        let floor = -1e-10 * ks.k1.trace() / 20.0;
        assert!(eigs.iter().all(|&e| e >= floor), "min eig {}", eigs.min());
    }

    #[test]
    fn infinite_coupling_blocks_are_stationary() {
        let xa = gaussian_inputs(4, 7, "stat-a");
        let xb = gaussian_inputs(4, 7, "stat-b");
        let c = cfg(2, Nonlinearity::Relu, 1.1, Lambda::Infinite, 7);
        let early = gp_kernel(&xa, &xb, 3, 2, &c).unwrap();
        let late = gp_kernel(&xa, &xb, 9, 5, &c).unwrap();
        assert_eq!(early.k1, late.k1);
        assert_eq!(early.k0, late.k0);
        assert_eq!(early.ktilde, late.ktilde);
        assert_eq!(early.k1, early.k0);
        assert_eq!(early.kdelta, DMatrix::zeros(4, 4));
    }

    #[test]
    fn stationary_ktilde_equals_tangent_kernel() {
        let xa = gaussian_inputs(4, 7, "tk-a");
        let xb = gaussian_inputs(5, 7, "tk-b");
        for nl in [Nonlinearity::Linear, Nonlinearity::Relu] {
            let c = cfg(3, nl, 1.4, Lambda::Infinite, 7);
            let ks = gp_kernel(&xa, &xb, 4, 3, &c).unwrap();
            let q = ntk_kernel(&xa, &xb, &c).unwrap();
            assert_eq!(ks.ktilde, q);
        }
    }

    #[test]
    fn first_time_column_keeps_gp_limit() {
        let xa = gaussian_inputs(4, 7, "col-a");
        let xb = gaussian_inputs(4, 7, "col-b");
        let c = cfg(2, Nonlinearity::Relu, 1.6, Lambda::Infinite, 7);
        let ks = gp_kernel(&xa, &xb, 5, 1, &c).unwrap();
        assert_relative_eq!(&ks.ktilde - &ks.k1 * 1.6, DMatrix::zeros(4, 4), epsilon = 1e-14);
    }

    #[test]
    fn tangent_kernel_rejects_finite_coupling() {
        let xa = gaussian_inputs(2, 4, "rej");
        let c = cfg(1, Nonlinearity::Relu, 1.0, Lambda::Finite(3.0), 4);
        assert!(ntk_kernel(&xa, &xa, &c).is_err());
    }

    #[test]
    fn dimension_mismatch_is_caught() {
        let xa = gaussian_inputs(2, 4, "dim");
        let c = cfg(1, Nonlinearity::Linear, 1.0, Lambda::Infinite, 5);
        assert!(gp_kernel(&xa, &xa, 1, 1, &c).is_err());
    }
}
