//! Two-task solver with a fresh readout head per task.
//!
//! With per-task readouts the hidden weights are the only variables coupled
//! across time, and the readout statistics renormalize the kernels instead of
//! the temporal factors: the effective kernel of the second task is
//! `u1*K1 - u0*K0`, where `u1` and `u0` are second moments of the new head
//! determined self-consistently together with the cross moment `u12`.
//!
//! Behaviour splits into three regimes as the load `alpha = P/N` grows:
//!
//! - frozen (`Fr`, alpha < 1): the hidden weights do not move, the factors
//!   have a closed form and transfer is purely through the prior kernel;
//! - overfitting (`Of`, 1 <= alpha < alpha_c): at infinite coupling the
//!   factors diverge like sqrt(coupling) while their gap shrinks like
//!   1/sqrt(coupling); predictions of the old head keep their frozen form
//!   but the new head's variance diverges off the training set;
//! - generalizing (`G`, alpha >= alpha_c): factors are finite again, the gap
//!   shrinks like 1/coupling, and the learned features move enough to both
//!   generalize and overwrite the first task.
//!
//! At infinite coupling the solver never forms large-coupling floats: each
//! quantity is tracked as a coefficient times an integer power of
//! sqrt(coupling) and assembled with dominant-power arithmetic, so finite
//! coupling and all three limits share one code path.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::{KernelConfig, Lambda};
use crate::data::Dataset;
use crate::kernel::{gp_diag, gp_kernel};
use crate::linalg::{quad_form, trace_solve, SpdFactor};
use crate::orderparams::{self, Regime};
use crate::{Error, Result};

const MAX_ITERS: usize = 10_000;
const TOL: f64 = 1e-9;
const DAMPING: f64 = 0.5;

/// Whether the hidden-weight coupling is finite or taken to infinity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LambdaMode {
    Finite,
    Infinite,
}

/// Configuration of the two-task renormalization solver.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadConfig {
    /// Kernel configuration; the renormalization theory is single-layer.
    pub kernel: KernelConfig,
    /// Load ratio P/N shared by both tasks.
    pub alpha: f64,
    /// Solve the overfitting branch and its scale equation with all
    /// second-task blocks treated as rescaled copies of one matrix. Exact
    /// for linear activations; for ReLU it is the standard closure. When
    /// false the overfitting branch runs a fixed point on the raw blocks.
    #[serde(default = "default_true")]
    pub magnitude_approx: bool,
}

fn default_true() -> bool {
    true
}

impl MultiHeadConfig {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if self.kernel.depth != 1 {
            return Err(Error::Unsupported(
                "two-task renormalization is derived for depth 1".into(),
            ));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "alpha must be positive and finite, got {}",
                self.alpha
            )));
        }
        if self.kernel.lambda.is_infinite() && self.alpha == 1.0 {
            return Err(Error::InvalidConfig(
                "alpha = 1 sits exactly on the interpolation threshold; \
                 the infinite-coupling factors are singular there"
                    .into(),
            ));
        }
        Ok(())
    }

    fn lambda_mode(&self) -> LambdaMode {
        if self.kernel.lambda.is_infinite() {
            LambdaMode::Infinite
        } else {
            LambdaMode::Finite
        }
    }
}

/// Readout second moments of the two-head problem.
///
/// At finite coupling all fields are plain numbers. At infinite coupling the
/// stored values are the leading coefficients of the regime's power laws:
///
/// - `Fr`: everything is finite and stored literally; `gap = u22_1 - u22_0`.
/// - `Of`: `u22_1` and `u22_0` grow like sqrt(coupling) and share the same
///   leading coefficient (stored in both fields), while `gap` holds the
///   coefficient of 1/sqrt(coupling).
/// - `G`: `u22_1` and `u22_0` are finite and equal at leading order; `gap`
///   holds the coefficient of 1/coupling.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RenormFactors {
    /// Second moment of the first head, `<|a_1|^2>/N`.
    pub u11: f64,
    /// Cross moment of the two heads, `<a_1 . a_2>/N`.
    pub u12: f64,
    /// Same-time second moment of the new head.
    pub u22_1: f64,
    /// Lagged second moment of the new head.
    pub u22_0: f64,
    /// `u22_1 - u22_0`, stored as the coefficient of its power law.
    pub gap: f64,
    pub regime: Regime,
    pub lambda_mode: LambdaMode,
    pub alpha: f64,
}

/// The load separating overfitting from generalizing, by two routes.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AlphaCritical {
    /// Root of the boundary condition on the raw task pair.
    pub from_boundary: f64,
    /// `gamma_sim^{-2}` from the similarity order parameter.
    pub from_similarity: f64,
}

// ---------------------------------------------------------------------------
// training-set kernel blocks

struct TrainBlocks {
    p: usize,
    k11f: SpdFactor,
    k22f: SpdFactor,
    k21: DMatrix<f64>,
    k22_1: DMatrix<f64>,
    k22_0: DMatrix<f64>,
    /// Difference block in the new head's effective kernel. At finite
    /// coupling this is the literal `K1 - K0`; at infinite coupling it is
    /// the rescaled limit `coupling * (K1 - K0)`, which stays finite.
    dk: DMatrix<f64>,
    y2: DVector<f64>,
    /// `K11^{-1} Y1`.
    w1: DVector<f64>,
    /// `K21 K11^{-1} Y1`.
    b1: DVector<f64>,
    /// `K21 K11^{-1} K12`.
    cross: DMatrix<f64>,
    q1: f64,
    q2: f64,
    c: f64,
    q1x: f64,
    gf: f64,
}

fn train_blocks(d1: &Dataset, d2: &Dataset, kc: &KernelConfig) -> Result<TrainBlocks> {
    if d1.p() == 0 || d2.p() == 0 {
        return Err(Error::InvalidConfig(
            "both tasks need at least one training example".into(),
        ));
    }
    if d1.p() != d2.p() {
        return Err(Error::DimensionMismatch {
            what: "two-task solver assumes equal set sizes",
            left: d1.p(),
            right: d2.p(),
        });
    }
    let p = d1.p();
    let ks11 = gp_kernel(&d1.x, &d1.x, 1, 1, kc)?;
    let ks21 = gp_kernel(&d2.x, &d1.x, 2, 1, kc)?;
    let ks22 = gp_kernel(&d2.x, &d2.x, 2, 2, kc)?;
    let dk = if kc.lambda.is_infinite() {
        (&ks22.ktilde - &ks22.k1) / kc.sigma_sq
    } else {
        ks22.kdelta.clone()
    };
    let k11f = SpdFactor::new(&ks11.k1, "K11")?;
    let k22f = SpdFactor::new(&ks22.k1, "K22")?;
    let w1 = k11f.solve_vec(&d1.y);
    let b1 = &ks21.k1 * &w1;
    let cross = &ks21.k1 * k11f.solve_mat(&ks21.k1.transpose());
    let pf = p as f64;
    let q1 = d1.y.dot(&w1) / pf;
    let w2 = k22f.solve_vec(&d2.y);
    let q2 = d2.y.dot(&w2) / pf;
    let c = b1.dot(&w2) / pf;
    let q1x = quad_form(&k22f, &b1, &b1) / pf;
    let gf = trace_solve(&k22f, &cross) / pf;
    Ok(TrainBlocks {
        p,
        k11f,
        k22f,
        k21: ks21.k1,
        k22_1: ks22.k1,
        k22_0: ks22.k0,
        dk,
        y2: d2.y.clone(),
        w1,
        b1,
        cross,
        q1,
        q2,
        c,
        q1x,
        gf,
    })
}

impl TrainBlocks {
    /// `1/N = alpha/P`.
    fn an(&self, alpha: f64) -> f64 {
        alpha / self.p as f64
    }

    fn residual(&self, u12: f64, u11: f64) -> DVector<f64> {
        &self.y2 - &self.b1 * (u12 / u11)
    }
}

/// `Tr(A B)` for equal-size square matrices.
fn tr_prod(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(&b.transpose()).sum()
}

// ---------------------------------------------------------------------------
// scalar factor equations

fn u11_closed(alpha: f64, sigma_sq: f64, q1: f64) -> f64 {
    let one_minus = 1.0 - alpha;
    0.5 * sigma_sq * (one_minus + (one_minus * one_minus + 4.0 * alpha * q1 / sigma_sq).sqrt())
}

/// First-head second moment from its quadratic stationarity condition.
/// Independent of the coupling and of the second task.
pub fn solve_u11(d1: &Dataset, cfg: &MultiHeadConfig) -> Result<f64> {
    cfg.validate()?;
    let ks11 = gp_kernel(&d1.x, &d1.x, 1, 1, &cfg.kernel)?;
    let f = SpdFactor::new(&ks11.k1, "K11")?;
    let q1 = quad_form(&f, &d1.y, &d1.y) / d1.p() as f64;
    Ok(u11_closed(cfg.alpha, cfg.kernel.sigma_sq, q1))
}

/// Critical load of a task pair, from the exact boundary condition and from
/// the similarity order parameter. The boundary root uses the pair's raw
/// kernels and labels; the similarity route normalizes labels first, so the
/// two coincide for normalized data and bracket each other otherwise.
pub fn alpha_critical(d1: &Dataset, d2: &Dataset, cfg: &MultiHeadConfig) -> Result<AlphaCritical> {
    cfg.validate()?;
    let mut kc = cfg.kernel.clone();
    kc.lambda = Lambda::Infinite;
    let b = train_blocks(d1, d2, &kc)?;
    let gs = orderparams::gamma_sim(d1, d2, &cfg.kernel)?;
    let from_similarity = orderparams::alpha_c(gs);

    let lhs = b.q1x - b.c * b.c / b.q2;
    let bound = |alpha: f64| -> f64 {
        lhs - u11_closed(alpha, kc.sigma_sq, b.q1) * (b.gf - alpha.powf(-0.5))
    };
    // Overfitting persists while bound > 0; scan for the sign change.
    let mut lo = 1.0 + 1e-9;
    let mut hi = f64::INFINITY;
    if bound(lo) <= 0.0 {
        return Ok(AlphaCritical {
            from_boundary: 1.0,
            from_similarity,
        });
    }
    let mut a = lo;
    for k in 1..=1200 {
        let next = lo * 10f64.powf(k as f64 / 100.0);
        if bound(next) <= 0.0 {
            hi = next;
            break;
        }
        a = next;
    }
    if !hi.is_finite() {
        return Ok(AlphaCritical {
            from_boundary: f64::INFINITY,
            from_similarity,
        });
    }
    lo = a;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if bound(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(AlphaCritical {
        from_boundary: 0.5 * (lo + hi),
        from_similarity,
    })
}

// ---------------------------------------------------------------------------
// regime branches

struct BranchOut {
    u12: f64,
    u22_1: f64,
    u22_0: f64,
    gap: f64,
}

/// Frozen branch: the effective kernel collapses onto the same-time block,
/// both heads become kernel regressions on frozen features, and the factor
/// equations close in one pass.
fn fr_closed(b: &TrainBlocks, alpha: f64, sigma_sq: f64, u11: f64) -> BranchOut {
    let gap = sigma_sq * (1.0 - alpha);
    let u12 = alpha * b.c / (1.0 - alpha * b.gf + alpha * b.q1x / u11);
    let r = b.residual(u12, u11);
    let qr = quad_form(&b.k22f, &r, &r) / b.p as f64;
    let u0 = (u12 * u12 / u11 * (1.0 - alpha * b.gf) + alpha * qr) / (1.0 - alpha);
    BranchOut {
        u12,
        u22_1: u0 + gap,
        u22_0: u0,
        gap,
    }
}

fn of_magnitude(b: &TrainBlocks, alpha: f64, sigma_sq: f64, u11: f64) -> Result<BranchOut> {
    let beta = alpha.powf(-0.5) - b.gf + b.q1x / u11;
    let u12 = if b.c == 0.0 {
        0.0
    } else {
        if beta <= 0.0 {
            return Err(Error::NoConvergence {
                iters: 0,
                residual: beta,
            });
        }
        b.c / beta
    };
    let big_c = sigma_sq * alpha.sqrt() / u11
        * (alpha.powf(-0.5) * u12 * u12 - b.gf * u12 * u12 + u11 * b.q2 - 2.0 * u12 * b.c
            + u12 * u12 * b.q1x / u11);
    let ratio = sigma_sq * (alpha.sqrt() - 1.0);
    if big_c <= 0.0 || ratio <= 0.0 {
        return Err(Error::NoConvergence {
            iters: 0,
            residual: big_c.min(ratio),
        });
    }
    let gap = (big_c / ratio).sqrt();
    let u0 = ratio * gap;
    Ok(BranchOut {
        u12,
        u22_1: u0,
        u22_0: u0,
        gap,
    })
}

fn rel_step(old: f64, new: f64) -> f64 {
    (new - old).abs() / new.abs().max(old.abs()).max(1e-8)
}

/// Cross moment from its stationarity condition, which is linear in `u12`
/// once the effective kernel is frozen. `gap_eff` multiplies the inverse
/// effective kernel with all coupling powers already cancelled.
fn u12_update(b: &TrainBlocks, f: &SpdFactor, an: f64, gap_eff: f64, u11: f64, u12: f64) -> f64 {
    let tr_cross = trace_solve(f, &b.cross);
    let e_y2 = f.solve_vec(&b.y2);
    let e_b1 = f.solve_vec(&b.b1);
    let den = 1.0 - gap_eff * an * tr_cross + gap_eff * an * b.b1.dot(&e_b1) / u11;
    if den.abs() > 1e-12 {
        gap_eff * an * b.b1.dot(&e_y2) / den
    } else {
        let r = b.residual(u12, u11);
        gap_eff * an * (u12 * tr_cross + b.b1.dot(&f.solve_vec(&r)))
    }
}

/// Overfitting branch on the raw blocks: the gap coefficient comes from the
/// quadratic trace condition, the diverging moment from the next-order
/// balance. Initialized from the magnitude solution.
fn of_exact(
    b: &TrainBlocks,
    alpha: f64,
    sigma_sq: f64,
    u11: f64,
    init: &BranchOut,
) -> Result<BranchOut> {
    let an = b.an(alpha);
    let (mut u12, mut u0, mut gap) = (init.u12, init.u22_0, init.gap);
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITERS {
        let e = gap * &b.k22_1 + u0 * &b.dk;
        let f = SpdFactor::new(&e, "effective K22")?;
        let u12_new = u12_update(b, &f, an, gap, u11, u12);
        let s_k1 = f.solve_mat(&b.k22_1);
        let gap_new = 1.0 / (an * tr_prod(&s_k1, &s_k1)).sqrt();
        let r = b.residual(u12_new, u11);
        let w = u12_new * u12_new / u11;
        let u0_new = sigma_sq
            * (w / gap_new - w * an * trace_solve(&f, &b.cross) + an * quad_form(&f, &r, &r));
        let u0_new = u0_new.max(0.0);
        residual = rel_step(u12, u12_new)
            .max(rel_step(u0, u0_new))
            .max(rel_step(gap, gap_new));
        u12 += DAMPING * (u12_new - u12);
        u0 += DAMPING * (u0_new - u0);
        gap += DAMPING * (gap_new - gap);
        if residual < TOL {
            return Ok(BranchOut {
                u12,
                u22_1: u0,
                u22_0: u0,
                gap,
            });
        }
    }
    Err(Error::NoConvergence {
        iters: MAX_ITERS,
        residual,
    })
}

/// Generalizing branch at infinite coupling: finite moments, gap coefficient
/// of 1/coupling. All difference blocks enter through the rescaled limit.
fn g_fixed_point(
    b: &TrainBlocks,
    alpha: f64,
    u11: f64,
    init: (f64, f64, f64),
) -> Result<BranchOut> {
    let an = b.an(alpha);
    let (mut u12, mut u0, mut gap) = init;
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITERS {
        let e = gap * &b.k22_1 + u0 * &b.dk;
        let f = SpdFactor::new(&e, "effective K22")?;
        let u12_new = u12_update(b, &f, an, gap, u11, u12);
        let r = b.residual(u12_new, u11);
        let m2 = f.solve_vec(&r);
        let s_k1 = f.solve_mat(&b.k22_1);
        let s_dk = f.solve_mat(&b.dk);
        let s_cross = f.solve_mat(&b.cross);
        let w = u12_new * u12_new / u11;
        let den_gap = an
            * (trace_solve(&f, &b.k22_1) - u0 * tr_prod(&s_dk, &s_k1)
                + w * tr_prod(&s_cross, &s_dk)
                - m2.dot(&(&b.dk * &m2)));
        if !(den_gap > 0.0) {
            return Err(Error::NoConvergence {
                iters: 0,
                residual: den_gap,
            });
        }
        let gap_new = 1.0 / den_gap;
        let den = 1.0 / (gap_new * gap_new) - an * tr_prod(&s_k1, &s_k1);
        let num = w / (gap_new * gap_new) - w * an * tr_prod(&s_cross, &s_k1)
            + an * m2.dot(&(&b.k22_1 * &m2));
        let u0_new = if den.abs() > 1e-14 { (num / den).max(0.0) } else { u0 };
        residual = rel_step(u12, u12_new)
            .max(rel_step(u0, u0_new))
            .max(rel_step(gap, gap_new));
        u12 += DAMPING * (u12_new - u12);
        u0 += DAMPING * (u0_new - u0);
        gap += DAMPING * (gap_new - gap);
        if residual < TOL {
            return Ok(BranchOut {
                u12,
                u22_1: u0,
                u22_0: u0,
                gap,
            });
        }
    }
    Err(Error::NoConvergence {
        iters: MAX_ITERS,
        residual,
    })
}

/// Stationarity residuals of the finite-coupling factor equations in
/// `(u12, gap, u0)` coordinates, scaled so that every component is order one
/// across the whole coupling range. The effective kernel is assembled from
/// the gap and the difference block, which stays well conditioned when the
/// two moments nearly coincide.
fn finite_residuals(
    b: &TrainBlocks,
    an: f64,
    sig_inv: f64,
    u11: f64,
    x: [f64; 3],
) -> Result<[f64; 3]> {
    let [u12, gap, u0] = x;
    let e = gap * &b.k22_1 + u0 * &b.dk;
    let f = SpdFactor::new(&e, "effective K22")?;
    let w = u12 * u12 / u11;
    let r = b.residual(u12, u11);
    let e_r = f.solve_vec(&r);
    let s_k0 = f.solve_mat(&b.k22_0);
    let s_dk = f.solve_mat(&b.dk);
    let s_cross = f.solve_mat(&b.cross);
    let r1 = u12 - gap * an * (u12 * trace_solve(&f, &b.cross) + b.b1.dot(&e_r));
    let q_gap = sig_inv + an * trace_solve(&f, &b.k22_1) - u0 * an * tr_prod(&s_dk, &s_k0)
        + w * an * tr_prod(&s_cross, &s_dk)
        - an * e_r.dot(&(&b.dk * &e_r));
    let r2 = 1.0 - gap * q_gap;
    let r3 = (u0 - w)
        - gap
            * gap
            * (u0 * an * tr_prod(&s_k0, &s_k0) - w * an * tr_prod(&s_cross, &s_k0)
                + an * e_r.dot(&(&b.k22_0 * &e_r)));
    Ok([r1 / u12.abs().max(1.0), r2, r3 / u0.abs().max(1.0)])
}

/// Finite-coupling factors by damped Newton on the stationarity residuals,
/// with a finite-difference Jacobian and positivity kept by the line search.
fn finite_fixed_point(
    b: &TrainBlocks,
    alpha: f64,
    sigma_sq: f64,
    u11: f64,
    init: (f64, f64, f64),
) -> Result<BranchOut> {
    let an = b.an(alpha);
    let sig_inv = 1.0 / sigma_sq;
    let mut x = [init.0, (init.1 - init.2).max(1e-10 * sigma_sq), init.2.max(0.0)];
    let mut r = finite_residuals(b, an, sig_inv, u11, x)?;
    let norm = |r: &[f64; 3]| (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    let mut best = norm(&r);
    for _ in 0..200 {
        if best < 1e-11 {
            return Ok(BranchOut {
                u12: x[0],
                u22_1: x[2] + x[1],
                u22_0: x[2],
                gap: x[1],
            });
        }
        // Forward-difference Jacobian; floors keep zero moments perturbable
        // while the strictly positive gap sets its own step scale.
        let floors = [sigma_sq, 0.0, sigma_sq];
        let mut j = DMatrix::zeros(3, 3);
        for k in 0..3 {
            let h = 1e-7 * x[k].abs().max(floors[k]);
            let mut xp = x;
            xp[k] += h;
            let rp = finite_residuals(b, an, sig_inv, u11, xp)?;
            for i in 0..3 {
                j[(i, k)] = (rp[i] - r[i]) / h;
            }
        }
        let rhs = DVector::from_column_slice(&[-r[0], -r[1], -r[2]]);
        let delta = j
            .lu()
            .solve(&rhs)
            .ok_or(Error::NoConvergence {
                iters: 0,
                residual: best,
            })?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = [x[0] + t * delta[0], x[1] + t * delta[1], x[2] + t * delta[2]];
            if cand[1] > 0.0 && cand[2] >= 0.0 {
                if let Ok(rc) = finite_residuals(b, an, sig_inv, u11, cand) {
                    let nc = norm(&rc);
                    if nc < best * (1.0 - 0.2 * t) || nc < 1e-11 {
                        x = cand;
                        r = rc;
                        best = nc;
                        accepted = true;
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::NoConvergence {
                iters: 0,
                residual: best,
            });
        }
    }
    Err(Error::NoConvergence {
        iters: 200,
        residual: best,
    })
}

fn solve_infinite(
    b: &TrainBlocks,
    cfg: &MultiHeadConfig,
    regime: Regime,
    u11: f64,
) -> Result<BranchOut> {
    let (alpha, sig) = (cfg.alpha, cfg.kernel.sigma_sq);
    match regime {
        Regime::Fr => Ok(fr_closed(b, alpha, sig, u11)),
        Regime::Of => {
            let mag = of_magnitude(b, alpha, sig, u11)?;
            if cfg.magnitude_approx {
                Ok(mag)
            } else {
                of_exact(b, alpha, sig, u11, &mag)
            }
        }
        Regime::G => {
            let q2 = b.q2.max(1e-3);
            let inits = [
                (0.0, alpha * q2, sig),
                (0.0, alpha * q2, 10.0 * sig),
                (0.0, 5.0 * alpha * q2, 0.1 * sig),
            ];
            let mut last = None;
            for init in inits {
                match g_fixed_point(b, alpha, u11, init) {
                    Ok(out) => return Ok(out),
                    Err(e) => last = Some(e),
                }
            }
            Err(last.unwrap())
        }
    }
}

/// Solve the coupled factor equations for a task pair.
pub fn solve_renorm(d1: &Dataset, d2: &Dataset, cfg: &MultiHeadConfig) -> Result<RenormFactors> {
    cfg.validate()?;
    let gs = orderparams::gamma_sim(d1, d2, &cfg.kernel)?;
    let regime = orderparams::classify_regime(cfg.alpha, gs).regime;
    match cfg.lambda_mode() {
        LambdaMode::Infinite => {
            let b = train_blocks(d1, d2, &cfg.kernel)?;
            let u11 = u11_closed(cfg.alpha, cfg.kernel.sigma_sq, b.q1);
            let out = solve_infinite(&b, cfg, regime, u11)?;
            Ok(RenormFactors {
                u11,
                u12: out.u12,
                u22_1: out.u22_1,
                u22_0: out.u22_0,
                gap: out.gap,
                regime,
                lambda_mode: LambdaMode::Infinite,
                alpha: cfg.alpha,
            })
        }
        LambdaMode::Finite => {
            let lam = cfg.kernel.lambda.finite().unwrap();
            let b = train_blocks(d1, d2, &cfg.kernel)?;
            let u11 = u11_closed(cfg.alpha, cfg.kernel.sigma_sq, b.q1);
            // Initialize from the asymptotic branch of the same pair.
            let mut inf_cfg = cfg.clone();
            inf_cfg.kernel.lambda = Lambda::Infinite;
            if cfg.alpha == 1.0 {
                inf_cfg.alpha = 0.95;
            }
            let init = match solve_renorm(d1, d2, &inf_cfg) {
                Ok(f) => match f.regime {
                    Regime::Fr => (f.u12, f.u22_1, f.u22_0),
                    Regime::Of => {
                        let u0 = f.u22_0 * lam.sqrt();
                        (f.u12, u0 + f.gap / lam.sqrt().max(1.0), u0)
                    }
                    Regime::G => (f.u12, f.u22_0 + f.gap / lam.max(1.0), f.u22_0),
                },
                Err(_) => (0.0, cfg.kernel.sigma_sq, 0.0),
            };
            let sig = cfg.kernel.sigma_sq;
            let out = finite_fixed_point(&b, cfg.alpha, sig, u11, init)
                .or_else(|_| finite_fixed_point(&b, cfg.alpha, sig, u11, (0.0, sig, 0.0)))?;
            Ok(RenormFactors {
                u11,
                u12: out.u12,
                u22_1: out.u22_1,
                u22_0: out.u22_0,
                gap: out.gap,
                regime,
                lambda_mode: LambdaMode::Finite,
                alpha: cfg.alpha,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// dominant-power accumulation

/// Sum of terms `value * coupling^(p/2)`, keyed by `p`. Adding keeps every
/// power; closing keeps the dominant one, which is the correct limit as the
/// coupling tends to infinity (at finite coupling everything sits at p = 0).
struct Tally<T> {
    terms: BTreeMap<i32, T>,
}

trait Accum: Clone {
    fn absorb(&mut self, other: &Self);
    fn peak(&self) -> f64;
}

impl Accum for DVector<f64> {
    fn absorb(&mut self, other: &Self) {
        *self += other;
    }
    fn peak(&self) -> f64 {
        if self.len() == 0 {
            0.0
        } else {
            self.amax()
        }
    }
}

impl Accum for DMatrix<f64> {
    fn absorb(&mut self, other: &Self) {
        *self += other;
    }
    fn peak(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.amax()
        }
    }
}

impl<T: Accum> Tally<T> {
    fn new() -> Self {
        Tally {
            terms: BTreeMap::new(),
        }
    }

    fn add(&mut self, p: i32, v: T) {
        // A structurally zero term must not decide the dominant power.
        if v.peak() == 0.0 {
            return;
        }
        self.terms
            .entry(p)
            .and_modify(|t| t.absorb(&v))
            .or_insert(v);
    }

    fn close(self, zero: T) -> (T, i32) {
        match self.terms.into_iter().next_back() {
            Some((p, v)) => (v, p),
            None => (zero, 0),
        }
    }
}

// ---------------------------------------------------------------------------
// assembled solution

/// Effective second-task kernel with the coupling powers of every piece.
struct Eff {
    f: SpdFactor,
    /// Inverse effective kernel carries coupling^(pinv/2).
    pinv: i32,
    /// Difference blocks carry coupling^(pdk/2) relative to their stored value.
    pdk: i32,
    u0: (f64, i32),
    u1: (f64, i32),
    gap: (f64, i32),
    /// `E^{-1} R`; the physical solve carries an extra coupling^(pinv/2).
    m2: DVector<f64>,
}

fn make_eff(b: &TrainBlocks, fac: &RenormFactors) -> Result<Eff> {
    let (e, pinv, pdk, u0, u1, gap) = match (fac.lambda_mode, fac.regime) {
        (LambdaMode::Finite, _) => (
            fac.u22_1 * &b.k22_1 - fac.u22_0 * &b.k22_0,
            0,
            0,
            (fac.u22_0, 0),
            (fac.u22_1, 0),
            (fac.gap, 0),
        ),
        (LambdaMode::Infinite, Regime::Fr) => (
            fac.gap * &b.k22_1,
            0,
            -2,
            (fac.u22_0, 0),
            (fac.u22_1, 0),
            (fac.gap, 0),
        ),
        (LambdaMode::Infinite, Regime::Of) => (
            fac.gap * &b.k22_1 + fac.u22_0 * &b.dk,
            1,
            -2,
            (fac.u22_0, 1),
            (fac.u22_1, 1),
            (fac.gap, -1),
        ),
        (LambdaMode::Infinite, Regime::G) => (
            fac.gap * &b.k22_1 + fac.u22_0 * &b.dk,
            2,
            -2,
            (fac.u22_0, 0),
            (fac.u22_1, 0),
            (fac.gap, -2),
        ),
    };
    let f = SpdFactor::new(&e, "effective K22")?;
    let r = b.residual(fac.u12, fac.u11);
    let m2 = f.solve_vec(&r);
    Ok(Eff {
        f,
        pinv,
        pdk,
        u0,
        u1,
        gap,
        m2,
    })
}

/// Kernel rows between query points (as the second task) and a training set.
struct QueryBlocks {
    k21: DMatrix<f64>,
    k22_1: DMatrix<f64>,
    k22_0: DMatrix<f64>,
    dk: DMatrix<f64>,
    diag: DVector<f64>,
}

/// Per-point posterior variances of the two heads on a query set.
#[derive(Clone, Debug)]
pub struct PredictorVariances {
    pub head1: DVector<f64>,
    pub head2: DVector<f64>,
    /// True when the new head's variance grows like sqrt(coupling); `head2`
    /// then holds the coefficient of that divergence.
    pub head2_diverges: bool,
}

/// Generalization loss with a divergence marker.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct GenLoss {
    pub value: f64,
    /// True when the variance part diverges with the coupling; `value` then
    /// combines the finite mean error with the divergence coefficient.
    pub diverges: bool,
}

/// Solved two-task system: factors plus everything needed for predictions.
pub struct MultiHeadSolution {
    pub factors: RenormFactors,
    cfg: MultiHeadConfig,
    x1: DMatrix<f64>,
    x2: DMatrix<f64>,
    y1: DVector<f64>,
    b: TrainBlocks,
    eff: Eff,
}

/// `diag(A B)` for `A` (n x m) and `B` (m x n).
fn pair_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(a.nrows(), |i, _| {
        a.row(i)
            .iter()
            .zip(b.column(i).iter())
            .map(|(x, y)| x * y)
            .sum()
    })
}

fn outer(a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    a * b.transpose()
}

impl MultiHeadSolution {
    pub fn solve(d1: &Dataset, d2: &Dataset, cfg: &MultiHeadConfig) -> Result<Self> {
        let factors = solve_renorm(d1, d2, cfg)?;
        let b = train_blocks(d1, d2, &cfg.kernel)?;
        let eff = make_eff(&b, &factors)?;
        Ok(MultiHeadSolution {
            factors,
            cfg: cfg.clone(),
            x1: d1.x.clone(),
            x2: d2.x.clone(),
            y1: d1.y.clone(),
            b,
            eff,
        })
    }

    fn qblocks(&self, xq: &DMatrix<f64>) -> Result<QueryBlocks> {
        let kc = &self.cfg.kernel;
        let ks21 = gp_kernel(xq, &self.x1, 2, 1, kc)?;
        let ks22 = gp_kernel(xq, &self.x2, 2, 2, kc)?;
        let dk = if kc.lambda.is_infinite() {
            (&ks22.ktilde - &ks22.k1) / kc.sigma_sq
        } else {
            ks22.kdelta.clone()
        };
        Ok(QueryBlocks {
            k21: ks21.k1,
            k22_1: ks22.k1,
            k22_0: ks22.k0,
            dk,
            diag: gp_diag(xq, 2, kc)?,
        })
    }

    /// Effective query kernel `u1*k1 - u0*k0` as coefficient and power.
    fn kt_query(&self, q: &QueryBlocks) -> (DMatrix<f64>, i32) {
        let e = &self.eff;
        let mut t = Tally::new();
        t.add(e.gap.1, e.gap.0 * &q.k22_1);
        t.add(e.u0.1 + e.pdk, e.u0.0 * &q.dk);
        t.close(DMatrix::zeros(q.k22_1.nrows(), q.k22_1.ncols()))
    }

    /// Posterior mean predictions `(head1, head2)` on query points.
    pub fn mean_predictors(&self, xq: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let q = self.qblocks(xq)?;
        let e = &self.eff;
        let fac = &self.factors;
        let nq = xq.nrows();

        let mut f1 = Tally::new();
        f1.add(e.pdk + e.pinv, fac.u12 * (&q.dk * &e.m2));
        f1.add(0, &q.k21 * &self.b.w1);
        let (head1, _) = f1.close(DVector::zeros(nq));

        let (ktq, pkt) = self.kt_query(&q);
        let mut f2 = Tally::new();
        f2.add(pkt + e.pinv, &ktq * &e.m2);
        f2.add(0, (&q.k21 * &self.b.w1) * (fac.u12 / fac.u11));
        let (head2, p2) = f2.close(DVector::zeros(nq));
        debug_assert!(p2 <= 0);
        Ok((head1, head2))
    }

    /// Posterior variances of both heads on query points.
    pub fn predictor_variances(&self, xq: &DMatrix<f64>) -> Result<PredictorVariances> {
        let q = self.qblocks(xq)?;
        let e = &self.eff;
        let fac = &self.factors;
        let nq = xq.nrows();
        let u12 = fac.u12;

        let s_dk = e.f.solve_mat(&q.dk.transpose());
        let s_k0 = e.f.solve_mat(&q.k22_0.transpose());

        // Old head: prior at its own moment, minus what the two oriented
        // couplings (direct to task 1, through the difference block) explain.
        let mut v1 = Tally::new();
        v1.add(0, fac.u11 * &q.diag);
        v1.add(
            2 * e.pdk + e.pinv,
            -u12 * u12 * pair_diag(&q.dk, &s_dk),
        );
        let mut s1 = Tally::new();
        s1.add(0, fac.u11 * &q.k21);
        s1.add(
            e.pdk + e.pinv,
            -(u12 * u12) * (q.dk.clone() * e.f.solve_mat(&self.b.k21)),
        );
        let (s1v, ps1) = s1.close(DMatrix::zeros(nq, self.b.p));
        let t1 = self.b.k11f.solve_mat(&s1v.transpose());
        v1.add(2 * ps1, -pair_diag(&s1v, &t1) / fac.u11);
        v1.add(
            e.pdk + e.pinv,
            -2.0 * u12 * u12 * pair_diag(&q.dk, &s_k0),
        );
        v1.add(
            e.u0.1 + 2 * e.pdk + 2 * e.pinv,
            u12 * u12 * e.u0.0 * pair_diag(&(&self.b.k22_0 * &s_dk).transpose(), &s_dk),
        );
        let (head1, p1) = v1.close(DVector::zeros(nq));
        debug_assert!(p1 <= 0);
        let head1 = if p1 == 0 { head1 } else { DVector::zeros(nq) };

        // New head: prior at u1, minus its own interpolation and the
        // first-task coupling, plus the lagged-moment corrections.
        let (ktq, pkt) = self.kt_query(&q);
        let s_kt = e.f.solve_mat(&ktq.transpose());
        let mut v2 = Tally::new();
        v2.add(e.u1.1, e.u1.0 * &q.diag);
        v2.add(2 * pkt + e.pinv, -pair_diag(&ktq, &s_kt));
        let mut s2 = Tally::new();
        s2.add(0, u12 * &q.k21);
        s2.add(
            pkt + e.pinv,
            -u12 * (ktq.clone() * e.f.solve_mat(&self.b.k21)),
        );
        let (s2v, ps2) = s2.close(DMatrix::zeros(nq, self.b.p));
        let t2 = self.b.k11f.solve_mat(&s2v.transpose());
        v2.add(2 * ps2, -pair_diag(&s2v, &t2) / fac.u11);
        v2.add(
            e.u0.1 + pkt + e.pinv,
            -2.0 * e.u0.0 * pair_diag(&ktq, &s_k0),
        );
        v2.add(
            e.u0.1 + 2 * pkt + 2 * e.pinv,
            e.u0.0 * pair_diag(&(&self.b.k22_0 * &s_kt).transpose(), &s_kt),
        );
        let (head2, p2) = v2.close(DVector::zeros(nq));
        let head2_diverges = p2 > 0;
        let head2 = if p2 >= 0 { head2 } else { DVector::zeros(nq) };

        Ok(PredictorVariances {
            head1,
            head2,
            head2_diverges,
        })
    }

    /// Forgetting: loss of the old head's mean prediction on its own
    /// training set, normalized by the label norm.
    pub fn forgetting(&self) -> Result<f64> {
        let (f1, _) = self.mean_predictors(&self.x1.clone_owned())?;
        crate::singlehead::loss(&f1, &self.y1)
    }

    /// Generalization of the new head on held-out data: squared mean error
    /// plus posterior variance, normalized by the label norm.
    pub fn generalization(&self, test: &Dataset) -> Result<GenLoss> {
        let (_, f2) = self.mean_predictors(&test.x)?;
        let vars = self.predictor_variances(&test.x)?;
        let err = (&f2 - &test.y).norm_squared() + vars.head2.sum();
        let norm = test.y.norm_squared();
        if norm == 0.0 {
            return Err(Error::InvalidConfig("test labels are all zero".into()));
        }
        Ok(GenLoss {
            value: err / norm,
            diverges: vars.head2_diverges,
        })
    }

    /// Contractions `left <dv2 dv2> right^T` split into the four covariance
    /// pieces of the new head's weights, each with its coupling power.
    fn v22_pieces(
        &self,
        la: &DMatrix<f64>,
        pa: i32,
        lb: &DMatrix<f64>,
        pb: i32,
    ) -> Vec<(DMatrix<f64>, i32)> {
        let e = &self.eff;
        let sa = e.f.solve_mat(&la.transpose());
        let sb = e.f.solve_mat(&lb.transpose());
        let base = pa + pb;
        vec![
            (-outer(&(la * &e.m2), &(lb * &e.m2)), base + 2 * e.pinv),
            (la * &sb, base + e.pinv),
            (
                -e.u0.0 * (sa.transpose() * (&self.b.k22_0 * &sb)),
                base + e.u0.1 + 2 * e.pinv,
            ),
            (
                (self.factors.u12 * self.factors.u12 / self.factors.u11)
                    * (sa.transpose() * (&self.b.cross * &sb)),
                base + 2 * e.pinv,
            ),
        ]
    }

    /// Similarity kernel of the post-second-task features between two query
    /// sets, and its learned part (the deviation from the prior kernel).
    pub fn hidden_kernel(
        &self,
        xa: &DMatrix<f64>,
        xb: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let qa = self.qblocks(xa)?;
        let qb = self.qblocks(xb)?;
        let prior = gp_kernel(xa, xb, 2, 2, &self.cfg.kernel)?.k1;
        let e = &self.eff;
        let fac = &self.factors;
        let (na, nb) = (xa.nrows(), xb.nrows());
        let m1 = &self.b.w1 / fac.u11;

        let mut t = Tally::new();
        // First-head weight covariance through the cross blocks.
        let a1 = &qa.k21 * &m1;
        let b1v = &qb.k21 * &m1;
        t.add(0, -fac.u11 * outer(&a1, &b1v));
        t.add(0, &qa.k21 * e_solve(&self.b.k11f, &qb.k21));
        // New-head covariance through the difference blocks.
        for (v, p) in self.v22_pieces(&qa.dk, e.pdk, &qb.dk, e.pdk) {
            t.add(p + e.u0.1, e.u0.0 * v);
        }
        // Cross covariances between the heads.
        let da_m2 = &qa.dk * &e.m2;
        let db_m2 = &qb.dk * &e.m2;
        t.add(e.pdk + e.pinv, -fac.u12 * outer(&a1, &db_m2));
        let k12_e_db = e_solve(&self.b.k11f, &self.b.k21.transpose()).transpose()
            * e.f.solve_mat(&qb.dk.transpose());
        t.add(
            e.pdk + e.pinv,
            -(fac.u12 * fac.u12 / fac.u11) * (&qa.k21 * k12_e_db),
        );
        t.add(e.pdk + e.pinv, -fac.u12 * outer(&da_m2, &b1v));
        let da_e_k21 = e.f.solve_mat(&qa.dk.transpose()).transpose() * &self.b.k21;
        t.add(
            e.pdk + e.pinv,
            -(fac.u12 * fac.u12 / fac.u11)
                * (da_e_k21 * e_solve(&self.b.k11f, &qb.k21)),
        );
        // Response terms coupling the lagged block to the difference block.
        t.add(
            e.u0.1 + e.pinv + e.pdk,
            e.u0.0 * (&qa.k22_0 * e.f.solve_mat(&qb.dk.transpose())),
        );
        t.add(
            e.u0.1 + e.pinv + e.pdk,
            e.u0.0 * (&qa.dk * e.f.solve_mat(&qb.k22_0.transpose())),
        );
        // Gap-weighted covariance, rewritten so that the exact cancellation
        // of the same-time and lagged parts is explicit before powers are
        // compared.
        for (v, p) in self.v22_pieces(&qa.dk, e.pdk, &qb.k22_0, 0) {
            t.add(p + e.gap.1, e.gap.0 * v);
        }
        for (v, p) in self.v22_pieces(&qa.k22_0, 0, &qb.dk, e.pdk) {
            t.add(p + e.gap.1, e.gap.0 * v);
        }
        for (v, p) in self.v22_pieces(&qa.dk, e.pdk, &qb.dk, e.pdk) {
            t.add(p + e.gap.1, e.gap.0 * v);
        }

        let (sum, p) = t.close(DMatrix::zeros(na, nb));
        if p > 0 {
            return Err(Error::Unsupported(
                "hidden kernel diverges; the factor solution is inconsistent".into(),
            ));
        }
        let an = self.b.an(fac.alpha);
        let learned = if p == 0 {
            -an * sum
        } else {
            DMatrix::zeros(na, nb)
        };
        Ok((&prior + &learned, learned))
    }

    /// Squared feature displacement kernel between the two task posteriors,
    /// per regime, at infinite coupling.
    pub fn repr_change(&self, xa: &DMatrix<f64>, xb: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if self.factors.lambda_mode == LambdaMode::Finite {
            return Err(Error::Unsupported(
                "feature displacement is only resolved in the infinite-coupling limit".into(),
            ));
        }
        let (na, nb) = (xa.nrows(), xb.nrows());
        match self.factors.regime {
            Regime::Fr => Ok(DMatrix::zeros(na, nb)),
            Regime::Of | Regime::G => {
                let qa = self.qblocks(xa)?;
                let qb = self.qblocks(xb)?;
                let e = &self.eff;
                let u0 = e.u0.0;
                let sa = e.f.solve_mat(&qa.dk.transpose());
                let sb = e.f.solve_mat(&qb.dk.transpose());
                let mut out = (u0 * u0) * (sa.transpose() * (&self.b.k22_0 * &sb));
                if self.factors.regime == Regime::G {
                    out += u0 * outer(&(&qa.dk * &e.m2), &(&qb.dk * &e.m2));
                }
                Ok(out)
            }
        }
    }
}

/// `A K11^{-1} B^T`-style helper: solve against the rows of `b`.
fn e_solve(f: &SpdFactor, b: &DMatrix<f64>) -> DMatrix<f64> {
    f.solve_mat(&b.transpose())
}

#[cfg(test)]
fn h_eff(
    b: &TrainBlocks,
    alpha: f64,
    sigma_sq: f64,
    u11: f64,
    u12: f64,
    u1: f64,
    u0: f64,
) -> f64 {
    let gap = u1 - u0;
    let e = u1 * &b.k22_1 - u0 * &b.k22_0;
    let f = SpdFactor::new(&e, "effective K22").unwrap();
    let r = b.residual(u12, u11);
    let w = u12 * u12 / u11;
    let an = b.an(alpha);
    sigma_sq.recip() * u11 - (1.0 - alpha) * u11.ln() + alpha * b.q1 / u11
        - gap.ln()
        - (u0 - w) / gap
        + sigma_sq.recip() * u1
        + an * (f.ln_det()
            + u0 * trace_solve(&f, &b.k22_0)
            - w * trace_solve(&f, &b.cross)
            + quad_form(&f, &r, &r))
}
