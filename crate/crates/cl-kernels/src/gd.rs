//! Full-batch gradient-descent training of finite-width MLPs.
//!
//! Four update rules cross-validate the kernel theory at finite width:
//! plain descent, a quadratic pull toward the previous task's weights, the
//! same pull gated per parameter by an accumulated curvature estimate, and a
//! multi-head variant that penalizes only the hidden weights while each task
//! gets a freshly drawn readout. The first task is always trained without a
//! penalty. Trajectories are deterministic given the seed.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::Nonlinearity;
use crate::data::Dataset;
use crate::rng::keyed_rng;
use crate::singlehead;
use crate::{Error, Result};

/// Weights of one finite-width network. Hidden layers apply 1/sqrt(fan-in)
/// forward scaling; the output is a.Phi/sqrt(N). `heads` holds one readout
/// per trained task in multi-head runs and exactly one otherwise.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub ws: Vec<DMatrix<f64>>,
    pub heads: Vec<DVector<f64>>,
    pub nonlinearity: Nonlinearity,
}

impl MlpParams {
    pub fn width(&self) -> usize {
        self.ws.last().map_or(0, |w| w.nrows())
    }

    pub fn depth(&self) -> usize {
        self.ws.len()
    }

    pub fn input_dim(&self) -> usize {
        self.ws.first().map_or(0, |w| w.ncols())
    }

    /// Last-layer activations, one row per input row.
    pub fn features(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_cache(x)?.acts.pop().unwrap())
    }

    /// Network outputs on `x` read through `heads[head]`.
    pub fn forward(&self, x: &DMatrix<f64>, head: usize) -> Result<DVector<f64>> {
        let a = self.heads.get(head).ok_or(Error::DimensionMismatch {
            what: "readout index vs trained heads",
            left: head,
            right: self.heads.len(),
        })?;
        let phi = self.features(x)?;
        Ok(phi * a / (self.width() as f64).sqrt())
    }

    fn forward_cache(&self, x: &DMatrix<f64>) -> Result<Cache> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "input columns vs first-layer fan-in",
                left: x.ncols(),
                right: self.input_dim(),
            });
        }
        let mut acts = Vec::with_capacity(self.ws.len() + 1);
        let mut pres = Vec::with_capacity(self.ws.len());
        acts.push(x.clone());
        for w in &self.ws {
            let prev = acts.last().unwrap();
            let scale = 1.0 / (prev.ncols() as f64).sqrt();
            let pre = prev * w.transpose() * scale;
            let mut act = pre.clone();
            if self.nonlinearity == Nonlinearity::Relu {
                act.apply(|v| *v = v.max(0.0));
            }
            pres.push(pre);
            acts.push(act);
        }
        Ok(Cache { acts, pres })
    }
}

struct Cache {
    /// Activations, index 0 = input.
    acts: Vec<DMatrix<f64>>,
    /// Pre-activations, one per hidden layer.
    pres: Vec<DMatrix<f64>>,
}

impl Cache {
    fn output(&self, a: &DVector<f64>) -> DVector<f64> {
        let phi = self.acts.last().unwrap();
        phi * a / (phi.ncols() as f64).sqrt()
    }
}

/// Per-parameter values shaped like the trainable weights: loss gradients,
/// penalty masks, and curvature accumulators all share this layout.
#[derive(Clone, Debug)]
pub struct GradSet {
    pub ws: Vec<DMatrix<f64>>,
    pub head: DVector<f64>,
}

impl GradSet {
    fn norm_squared(&self) -> f64 {
        self.ws.iter().map(|w| w.norm_squared()).sum::<f64>() + self.head.norm_squared()
    }

    fn len(&self) -> usize {
        self.ws.iter().map(|w| w.len()).sum::<usize>() + self.head.len()
    }

    /// self <- decay * self + other, the running-curvature update.
    fn decay_add(&mut self, decay: f64, other: &GradSet) {
        for (s, o) in self.ws.iter_mut().zip(&other.ws) {
            *s *= decay;
            *s += o;
        }
        self.head *= decay;
        self.head += &other.head;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Plain descent on the training loss.
    Vanilla,
    /// Adds -eta*kappa*(theta - previous task's weights) to every update.
    L2,
    /// Same pull, gated per parameter by the accumulated curvature of
    /// finished tasks; the running estimate decays by `gamma_decay` per task.
    OnlineEwc,
    /// Pull on hidden weights only; each task trains a fresh readout.
    MultiHeadWPenalty,
}

fn default_eta() -> f64 {
    1e-3
}
fn default_kappa() -> f64 {
    0.1
}
fn default_gamma() -> f64 {
    1.0
}
fn default_sigma0() -> f64 {
    1.0
}
fn default_stop_mse() -> f64 {
    1e-3
}
fn default_update_tol() -> f64 {
    1e-8
}
fn default_max_steps() -> usize {
    200_000
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Curvature decay per finished task; 1 keeps every task, 0 only the last.
    #[serde(default = "default_gamma")]
    pub gamma_decay: f64,
    /// Init std of all weights, and of each fresh multi-head readout.
    #[serde(default = "default_sigma0")]
    pub sigma0: f64,
    /// Unpenalized tasks stop once train MSE falls below this.
    #[serde(default = "default_stop_mse")]
    pub stop_mse: f64,
    /// Penalized tasks stop once |step| < update_tol * |theta|.
    #[serde(default = "default_update_tol")]
    pub update_tol: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    /// Record a StepRecord every this many steps; 0 disables the history.
    #[serde(default)]
    pub log_every: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: default_eta(),
            kappa: default_kappa(),
            gamma_decay: default_gamma(),
            sigma0: default_sigma0(),
            stop_mse: default_stop_mse(),
            update_tol: default_update_tol(),
            max_steps: default_max_steps(),
            log_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::InvalidConfig("eta must be positive".into()));
        }
        if !(self.stop_mse > 0.0) {
            return Err(Error::InvalidConfig("stop_mse must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma_decay) {
            return Err(Error::InvalidConfig("gamma_decay must lie in [0, 1]".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidConfig("max_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MseTarget,
    UpdateNorm,
    MaxSteps,
}

#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub step: usize,
    /// Train MSE before this step's update.
    pub train_mse: f64,
    /// |applied step| / |theta|.
    pub update_ratio: f64,
    /// Distance of (W, active head) from their values at task start.
    pub anchor_dist: f64,
}

#[derive(Clone, Debug)]
pub struct StepLog {
    pub steps: usize,
    pub final_train_mse: f64,
    pub final_update_ratio: f64,
    /// Hidden-weight part of the last applied step, relative to |W|.
    pub final_w_update_ratio: f64,
    pub stop: StopReason,
    pub history: Vec<StepRecord>,
}

/// Owns one network and its cross-task training state (previous-task anchor,
/// curvature accumulator, head bookkeeping). Tasks are fed in order.
pub struct Trainer {
    pub params: MlpParams,
    cfg: TrainConfig,
    mode: Mode,
    tasks_seen: usize,
    fisher_bar: Option<GradSet>,
}

impl Trainer {
    pub fn new(
        input_dim: usize,
        width: usize,
        depth: usize,
        nonlinearity: Nonlinearity,
        cfg: TrainConfig,
        mode: Mode,
    ) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 || width == 0 || depth == 0 {
            return Err(Error::InvalidConfig(
                "input_dim, width, and depth must all be positive".into(),
            ));
        }
        let mut rng = keyed_rng(cfg.seed, 0, "gd-init-w");
        let mut ws = Vec::with_capacity(depth);
        let mut fan_in = input_dim;
        for _ in 0..depth {
            ws.push(DMatrix::from_fn(width, fan_in, |_, _| {
                cfg.sigma0 * rng.sample::<f64, _>(StandardNormal)
            }));
            fan_in = width;
        }
        let head = sample_head(width, cfg.sigma0, cfg.seed, 0);
        Ok(Self {
            params: MlpParams {
                ws,
                heads: vec![head],
                nonlinearity,
            },
            cfg,
            mode,
            tasks_seen: 0,
            fisher_bar: None,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn tasks_seen(&self) -> usize {
        self.tasks_seen
    }

    /// Curvature accumulated from finished tasks (OnlineEwc only).
    pub fn fisher_bar(&self) -> Option<&GradSet> {
        self.fisher_bar.as_ref()
    }

    /// Readout used when evaluating task `task_idx` (0-based).
    pub fn head_for_task(&self, task_idx: usize) -> usize {
        match self.mode {
            Mode::MultiHeadWPenalty => task_idx.min(self.params.heads.len().saturating_sub(1)),
            _ => 0,
        }
    }

    /// Trains the next task in the sequence and advances the cross-task state.
    pub fn train_task(&mut self, d: &Dataset) -> Result<StepLog> {
        let task = self.tasks_seen + 1;
        if self.mode == Mode::MultiHeadWPenalty && task >= 2 {
            self.params.heads.push(sample_head(
                self.params.width(),
                self.cfg.sigma0,
                self.cfg.seed,
                (task - 1) as u64,
            ));
        }
        let head = self.params.heads.len() - 1;
        let penalized = task >= 2 && self.mode != Mode::Vanilla;
        let anchor = if penalized {
            Some((self.params.ws.clone(), self.params.heads[head].clone()))
        } else {
            None
        };
        let start = (self.params.ws.clone(), self.params.heads[head].clone());
        let mask = if self.mode == Mode::OnlineEwc {
            self.fisher_bar.clone()
        } else {
            None
        };
        let p = d.p() as f64;
        let mut history = Vec::new();
        let mut log = StepLog {
            steps: 0,
            final_train_mse: f64::NAN,
            final_update_ratio: f64::NAN,
            final_w_update_ratio: f64::NAN,
            stop: StopReason::MaxSteps,
            history: Vec::new(),
        };
        for step in 1..=self.cfg.max_steps {
            let cache = self.params.forward_cache(&d.x)?;
            let f = cache.output(&self.params.heads[head]);
            let resid = &f - &d.y;
            let mse = resid.norm_squared() / p;
            if !mse.is_finite() || mse > 1e6 {
                return Err(Error::NoConvergence {
                    iters: step - 1,
                    residual: mse,
                });
            }
            if !penalized && mse < self.cfg.stop_mse {
                log.steps = step - 1;
                log.final_train_mse = mse;
                log.stop = StopReason::MseTarget;
                break;
            }
            let mut g = backward(&self.params, &cache, &resid, head);
            if let Some((aw, ah)) = &anchor {
                add_penalty(&mut g, &self.params, head, aw, ah, self.mode, self.cfg.kappa, &mask);
            }
            let theta_sq = self.params.ws.iter().map(|w| w.norm_squared()).sum::<f64>()
                + self.params.heads[head].norm_squared();
            let step_sq = self.cfg.eta * self.cfg.eta * g.norm_squared();
            let w_sq = self.params.ws.iter().map(|w| w.norm_squared()).sum::<f64>();
            let gw_sq = g.ws.iter().map(|w| w.norm_squared()).sum::<f64>();
            for (w, gw) in self.params.ws.iter_mut().zip(&g.ws) {
                w.zip_apply(gw, |v, gv| *v -= self.cfg.eta * gv);
            }
            self.params.heads[head].axpy(-self.cfg.eta, &g.head, 1.0);
            let ratio = (step_sq / theta_sq.max(f64::MIN_POSITIVE)).sqrt();
            log.steps = step;
            log.final_train_mse = mse;
            log.final_update_ratio = ratio;
            log.final_w_update_ratio =
                self.cfg.eta * (gw_sq / w_sq.max(f64::MIN_POSITIVE)).sqrt();
            if self.cfg.log_every > 0 && step % self.cfg.log_every == 0 {
                let dist = self
                    .params
                    .ws
                    .iter()
                    .zip(&start.0)
                    .map(|(w, s)| (w - s).norm_squared())
                    .sum::<f64>()
                    + (&self.params.heads[head] - &start.1).norm_squared();
                history.push(StepRecord {
                    step,
                    train_mse: mse,
                    update_ratio: ratio,
                    anchor_dist: dist.sqrt(),
                });
            }
            if penalized && ratio < self.cfg.update_tol {
                log.stop = StopReason::UpdateNorm;
                break;
            }
        }
        if log.stop == StopReason::MaxSteps || log.stop == StopReason::UpdateNorm {
            let f = self.params.forward(&d.x, head)?;
            log.final_train_mse = (&f - &d.y).norm_squared() / p;
        }
        log.history = history;
        self.tasks_seen = task;
        if self.mode == Mode::OnlineEwc {
            let f = fisher_diag(&self.params, d)?;
            match &mut self.fisher_bar {
                Some(bar) => bar.decay_add(self.cfg.gamma_decay, &f),
                None => self.fisher_bar = Some(f),
            }
        }
        Ok(log)
    }
}

fn sample_head(width: usize, sigma0: f64, seed: u64, task_index: u64) -> DVector<f64> {
    let mut rng: ChaCha8Rng = keyed_rng(seed, task_index, "gd-head");
    DVector::from_fn(width, |_, _| sigma0 * rng.sample::<f64, _>(StandardNormal))
}

fn gate(pre: &DMatrix<f64>, nl: Nonlinearity) -> DMatrix<f64> {
    match nl {
        Nonlinearity::Linear => DMatrix::from_element(pre.nrows(), pre.ncols(), 1.0),
        Nonlinearity::Relu => pre.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
    }
}

/// Gradients of the summed square error L = |f - y|^2 / 2 with respect to
/// every hidden layer and the active readout. The sum convention keeps the
/// data term and the kappa-pull on the scales the published learning rates
/// assume; stopping criteria use the mean square error separately.
fn backward(params: &MlpParams, cache: &Cache, resid: &DVector<f64>, head: usize) -> GradSet {
    let n = params.width() as f64;
    let phi = cache.acts.last().unwrap();
    let g_head = phi.transpose() * resid / n.sqrt();
    let depth = params.ws.len();
    let a = &params.heads[head];
    let mut sens = (resid * a.transpose() / n.sqrt())
        .component_mul(&gate(&cache.pres[depth - 1], params.nonlinearity));
    let mut g_ws = vec![DMatrix::zeros(0, 0); depth];
    for l in (0..depth).rev() {
        let scale = 1.0 / (cache.acts[l].ncols() as f64).sqrt();
        g_ws[l] = sens.transpose() * &cache.acts[l] * scale;
        if l > 0 {
            sens = (&sens * &params.ws[l] * scale)
                .component_mul(&gate(&cache.pres[l - 1], params.nonlinearity));
        }
    }
    GradSet {
        ws: g_ws,
        head: g_head,
    }
}

fn add_penalty(
    g: &mut GradSet,
    params: &MlpParams,
    head: usize,
    anchor_ws: &[DMatrix<f64>],
    anchor_head: &DVector<f64>,
    mode: Mode,
    kappa: f64,
    mask: &Option<GradSet>,
) {
    match mode {
        Mode::Vanilla => {}
        Mode::L2 => {
            for (l, gw) in g.ws.iter_mut().enumerate() {
                *gw += (&params.ws[l] - &anchor_ws[l]) * kappa;
            }
            g.head.axpy(kappa, &(&params.heads[head] - anchor_head), 1.0);
        }
        Mode::OnlineEwc => {
            if let Some(m) = mask {
                for (l, gw) in g.ws.iter_mut().enumerate() {
                    *gw += (&params.ws[l] - &anchor_ws[l]).component_mul(&m.ws[l]) * kappa;
                }
                g.head += (&params.heads[head] - anchor_head).component_mul(&m.head) * kappa;
            }
        }
        Mode::MultiHeadWPenalty => {
            for (l, gw) in g.ws.iter_mut().enumerate() {
                *gw += (&params.ws[l] - &anchor_ws[l]) * kappa;
            }
        }
    }
}

/// Per-parameter squared loss-gradients, normalized by the root-mean of
/// fourth powers so the result is invariant to rescaling the loss. Uniform
/// gradient magnitudes map to sqrt(parameter count) in every entry.
pub fn fisher_diag(params: &MlpParams, d: &Dataset) -> Result<GradSet> {
    let head = params.heads.len() - 1;
    let cache = params.forward_cache(&d.x)?;
    let f = cache.output(&params.heads[head]);
    let resid = &f - &d.y;
    let mut g = backward(params, &cache, &resid, head);
    let quart: f64 = g
        .ws
        .iter()
        .flat_map(|w| w.iter())
        .chain(g.head.iter())
        .map(|v| v.powi(4))
        .sum();
    if quart == 0.0 {
        return Err(Error::InvalidConfig(
            "curvature normalization undefined: every loss gradient is zero".into(),
        ));
    }
    let denom = quart.sqrt() / g.len() as f64;
    for w in &mut g.ws {
        w.apply(|v| *v = *v * *v / denom);
    }
    g.head.apply(|v| *v = *v * *v / denom);
    Ok(g)
}

/// Per-time metrics of one sequential run. Row `t` of the tables covers
/// tasks 0..=t evaluated right after task `t` finished training; multi-head
/// evaluation pairs each task with its own frozen readout on the current
/// features.
#[derive(Clone, Debug)]
pub struct SeqMetrics {
    /// Relative test loss |f - y|^2 / |y|^2.
    pub test_loss: Vec<Vec<f64>>,
    /// Fraction of test predictions whose sign matches the label.
    pub sign_acc: Vec<Vec<f64>>,
    /// test_loss[t][0] - test_loss[0][0].
    pub first_task_forgetting: Vec<f64>,
    /// |active readout|^2 / N at the end of each task.
    pub readout_sq_norm: Vec<f64>,
    /// Final network outputs on each task's test inputs.
    pub final_outputs: Vec<DVector<f64>>,
    pub logs: Vec<StepLog>,
    /// Weights after the last task, for further probing.
    pub final_params: MlpParams,
}

pub fn run_cl_experiment(
    train: &[Dataset],
    test: &[Dataset],
    width: usize,
    depth: usize,
    nonlinearity: Nonlinearity,
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<SeqMetrics> {
    if train.is_empty() || train.len() != test.len() {
        return Err(Error::InvalidConfig(
            "need equal, nonzero counts of train and test datasets".into(),
        ));
    }
    let n0 = train[0].n0();
    let mut trainer = Trainer::new(n0, width, depth, nonlinearity, cfg.clone(), mode)?;
    let mut m = SeqMetrics {
        test_loss: Vec::new(),
        sign_acc: Vec::new(),
        first_task_forgetting: Vec::new(),
        readout_sq_norm: Vec::new(),
        final_outputs: Vec::new(),
        logs: Vec::new(),
        final_params: trainer.params.clone(),
    };
    for (t, d) in train.iter().enumerate() {
        let log = trainer.train_task(d)?;
        m.logs.push(log);
        let active = trainer.head_for_task(t);
        m.readout_sq_norm
            .push(trainer.params.heads[active].norm_squared() / width as f64);
        let mut loss_row = Vec::with_capacity(t + 1);
        let mut acc_row = Vec::with_capacity(t + 1);
        for (tp, dt) in test.iter().enumerate().take(t + 1) {
            let pred = trainer.params.forward(&dt.x, trainer.head_for_task(tp))?;
            loss_row.push(singlehead::loss(&pred, &dt.y)?);
            let hits = pred
                .iter()
                .zip(dt.y.iter())
                .filter(|(p, y)| (**p >= 0.0) == (**y >= 0.0))
                .count();
            acc_row.push(hits as f64 / dt.y.len() as f64);
        }
        m.test_loss.push(loss_row);
        m.sign_acc.push(acc_row);
        m.first_task_forgetting
            .push(m.test_loss[t][0] - m.test_loss[0][0]);
    }
    for (tp, dt) in test.iter().enumerate() {
        m.final_outputs
            .push(trainer.params.forward(&dt.x, trainer.head_for_task(tp))?);
    }
    m.final_params = trainer.params;
    Ok(m)
}
