//! Two-time temporal factors.
//!
//! Under the sequential Gibbs posterior, each layer's weights at task times
//! (t, t') are jointly Gaussian. Integrating them out renormalizes every
//! kernel contraction by one of two scalars: `m1` for same-replica
//! contractions and `m0` for cross-replica ones. Both are geometric in
//! `lambda_tilde = lambda / (lambda + sigma^{-2})`, the fraction of a
//! weight's posterior mean inherited from the previous task.

use crate::config::{KernelConfig, Lambda};

/// Temporal renormalization pair for an ordered task pair `t >= t_prime >= 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalFactors {
    /// Same-replica factor.
    pub m1: f64,
    /// Cross-replica factor; zero whenever `t_prime == 1`.
    pub m0: f64,
    pub lambda_tilde: f64,
    pub t: usize,
    pub t_prime: usize,
}

/// `lambda / (lambda + sigma^{-2})`, taken symbolically to 1 at infinite
/// coupling.
pub fn lambda_tilde(lambda: Lambda, sigma_sq: f64) -> f64 {
    match lambda {
        Lambda::Infinite => 1.0,
        Lambda::Finite(l) => l / (l + sigma_sq.recip()),
    }
}

/// Temporal factors for task times `t` and `t_prime` (1-indexed, order-free).
///
/// Closed forms, with `lt = lambda_tilde` and `s2 = sigma_sq`, for `t >= t'`:
/// - `t' == 1`: `m1 = s2 * lt^(t-1)`, `m0 = 0`;
/// - `t >= t' >= 2`: `m1 = s2/(1+lt) * (lt^(t-t') + lt^(t+t'-1))` and
///   `m0 = s2/(1+lt) * (lt^(t-t'+2) + lt^(t+t'-1))`.
///
/// At infinite coupling both factors collapse to `s2` (to `s2` and `0` when
/// `t' == 1`), making every kernel time-invariant.
pub fn temporal_factors(cfg: &KernelConfig, t: usize, t_prime: usize) -> TemporalFactors {
    assert!(t >= 1 && t_prime >= 1, "task times are 1-indexed");
    let (hi, lo) = if t >= t_prime { (t, t_prime) } else { (t_prime, t) };
    let s2 = cfg.sigma_sq;
    let lt = lambda_tilde(cfg.lambda, s2);
    let (m1, m0) = if lo == 1 {
        (s2 * lt.powi(hi as i32 - 1), 0.0)
    } else {
        let shared = lt.powi((hi + lo) as i32 - 1);
        let pre = s2 / (1.0 + lt);
        (
            pre * (lt.powi((hi - lo) as i32) + shared),
            pre * (lt.powi((hi - lo) as i32 + 2) + shared),
        )
    };
    TemporalFactors {
        m1,
        m0,
        lambda_tilde: lt,
        t,
        t_prime,
    }
}
