//! Finite-width Monte-Carlo oracles for the analytic kernels.
//!
//! Wide-network kernels are self-averaging: a single random network of large
//! width already concentrates near the analytic value. These estimators draw
//! networks at a configurable width, average the empirical kernels over
//! samples, and report the spread, so analytic formulas can be validated
//! against direct simulation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{KernelConfig, Nonlinearity};
use crate::rng::keyed_rng;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct McEstimate {
    pub mean: DMatrix<f64>,
    /// Standard error over samples (zero matrix when n_samples < 2).
    pub stderr: DMatrix<f64>,
}

/// Hidden-layer weights of one sampled network; entries N(0, sigma_sq),
/// applied with 1/sqrt(fan-in) forward scaling.
struct Net {
    ws: Vec<DMatrix<f64>>,
}

fn sample_net(cfg: &KernelConfig, width: usize, rng: &mut ChaCha8Rng) -> Net {
    let sd = cfg.sigma_sq.sqrt();
    let mut ws = Vec::with_capacity(cfg.depth);
    let mut fan_in = cfg.input_dim;
    for _ in 0..cfg.depth {
        ws.push(DMatrix::from_fn(width, fan_in, |_, _| {
            sd * rng.sample::<f64, _>(StandardNormal)
        }));
        fan_in = width;
    }
    Net { ws }
}

fn apply_nl(z: &mut DMatrix<f64>, nl: Nonlinearity) {
    if nl == Nonlinearity::Relu {
        z.apply(|v| *v = v.max(0.0));
    }
}

/// Activations per layer, index 0 = input. Each entry is P x dim.
fn forward(net: &Net, x: &DMatrix<f64>, nl: Nonlinearity) -> Vec<DMatrix<f64>> {
    let mut acts = Vec::with_capacity(net.ws.len() + 1);
    acts.push(x.clone());
    for w in &net.ws {
        let prev = acts.last().unwrap();
        let scale = 1.0 / (prev.ncols() as f64).sqrt();
        let mut z = prev * w.transpose() * scale;
        apply_nl(&mut z, nl);
        acts.push(z);
    }
    acts
}

struct Accumulator {
    sum: DMatrix<f64>,
    sumsq: DMatrix<f64>,
    n: usize,
}

impl Accumulator {
    fn new(rows: usize, cols: usize) -> Self {
        Self {
            sum: DMatrix::zeros(rows, cols),
            sumsq: DMatrix::zeros(rows, cols),
            n: 0,
        }
    }

    fn push(&mut self, k: DMatrix<f64>) {
        self.sumsq += k.map(|v| v * v);
        self.sum += k;
        self.n += 1;
    }

    fn finish(self) -> McEstimate {
        let n = self.n as f64;
        let mean = &self.sum / n;
        let stderr = if self.n < 2 {
            DMatrix::zeros(self.sum.nrows(), self.sum.ncols())
        } else {
            let var = (self.sumsq - mean.map(|v| v * v) * n) / (n - 1.0);
            var.map(|v| (v.max(0.0) / n).sqrt())
        };
        McEstimate { mean, stderr }
    }
}

fn check(xa: &DMatrix<f64>, xb: &DMatrix<f64>, cfg: &KernelConfig, width: usize) -> Result<()> {
    if width == 0 {
        return Err(Error::InvalidConfig("Monte-Carlo width must be positive".into()));
    }
    if xa.ncols() != cfg.input_dim || xb.ncols() != cfg.input_dim {
        return Err(Error::DimensionMismatch {
            what: "Monte-Carlo input columns vs configured input_dim",
            left: xa.ncols().max(xb.ncols()),
            right: cfg.input_dim,
        });
    }
    Ok(())
}

/// Empirical last-layer feature kernel `Phi(x) . Phi(x') / N` averaged over
/// weight draws; converges to the same-branch analytic kernel at equal times.
pub fn mc_gp_estimate(
    xa: &DMatrix<f64>,
    xb: &DMatrix<f64>,
    cfg: &KernelConfig,
    width: usize,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    check(xa, xb, cfg, width)?;
    let mut acc = Accumulator::new(xa.nrows(), xb.nrows());
    for s in 0..n_samples {
        let mut rng = keyed_rng(seed, s as u64, "mc-gp");
        let net = sample_net(cfg, width, &mut rng);
        let ha = forward(&net, xa, cfg.nonlinearity);
        let hb = forward(&net, xb, cfg.nonlinearity);
        let k = ha.last().unwrap() * hb.last().unwrap().transpose() / width as f64;
        acc.push(k);
    }
    Ok(acc.finish())
}

/// Empirical parameter-gradient inner-product kernel: with f ~ a.Phi/sqrt(N),
/// sums gradient overlaps over every hidden layer and the readout. Gradients
/// are computed layerwise in closed form, so the estimate is exact for each
/// sampled network.
pub fn mc_ntk_estimate(
    xa: &DMatrix<f64>,
    xb: &DMatrix<f64>,
    cfg: &KernelConfig,
    width: usize,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    check(xa, xb, cfg, width)?;
    let mut acc = Accumulator::new(xa.nrows(), xb.nrows());
    for s in 0..n_samples {
        let mut rng = keyed_rng(seed, s as u64, "mc-ntk");
        let net = sample_net(cfg, width, &mut rng);
        let a = DVector::from_fn(width, |_, _| {
            cfg.sigma_sq.sqrt() * rng.sample::<f64, _>(StandardNormal)
        });
        let ka = ntk_paths(&net, &a, xa, cfg);
        let kb = ntk_paths(&net, &a, xb, cfg);
        // Readout-gradient overlap plus per-layer weight-gradient overlaps.
        let mut k = ka.acts.last().unwrap() * kb.acts.last().unwrap().transpose() / width as f64;
        for l in 0..net.ws.len() {
            let fan_in = ka.acts[l].ncols() as f64;
            let grads = (&ka.sens[l] * kb.sens[l].transpose())
                .component_mul(&(&ka.acts[l] * kb.acts[l].transpose()))
                / fan_in;
            k += grads;
        }
        acc.push(k);
    }
    Ok(acc.finish())
}

struct Paths {
    /// Activations, index 0 = input.
    acts: Vec<DMatrix<f64>>,
    /// Pre-activation sensitivities of the output, one per hidden layer.
    sens: Vec<DMatrix<f64>>,
}

fn ntk_paths(net: &Net, a: &DVector<f64>, x: &DMatrix<f64>, cfg: &KernelConfig) -> Paths {
    let p = x.nrows();
    let depth = net.ws.len();
    let mut acts = Vec::with_capacity(depth + 1);
    let mut pre = Vec::with_capacity(depth);
    acts.push(x.clone());
    for w in &net.ws {
        let prev = acts.last().unwrap();
        let scale = 1.0 / (prev.ncols() as f64).sqrt();
        let z = prev * w.transpose() * scale;
        let mut h = z.clone();
        apply_nl(&mut h, cfg.nonlinearity);
        pre.push(z);
        acts.push(h);
    }
    let gate = |z: &DMatrix<f64>| -> DMatrix<f64> {
        match cfg.nonlinearity {
            Nonlinearity::Linear => DMatrix::from_element(z.nrows(), z.ncols(), 1.0),
            Nonlinearity::Relu => z.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        }
    };
    let width = a.len() as f64;
    let mut sens = vec![DMatrix::zeros(p, 0); depth];
    let mut d = gate(&pre[depth - 1]);
    for i in 0..p {
        for j in 0..a.len() {
            d[(i, j)] *= a[j] / width.sqrt();
        }
    }
    sens[depth - 1] = d;
    for l in (0..depth.saturating_sub(1)).rev() {
        let scale = 1.0 / (acts[l + 1].ncols() as f64).sqrt();
        let upstream = &sens[l + 1] * &net.ws[l + 1] * scale;
        sens[l] = gate(&pre[l]).component_mul(&upstream);
    }
    Paths { acts, sens }
}
