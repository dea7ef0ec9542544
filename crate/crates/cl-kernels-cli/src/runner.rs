//! Pipeline execution: task generation, per-kind metric computation, and
//! the parallel sweep over grid points and seeds.

use anyhow::{ensure, Context};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use cl_kernels::gd;
use cl_kernels::multihead::{MultiHeadConfig, MultiHeadSolution};
use cl_kernels::orderparams::{self, Regime};
use cl_kernels::rng::keyed_rng;
use cl_kernels::singlehead::{self, SequenceReport};
use cl_kernels::tasks::load::LabeledPool;
use cl_kernels::tasks::{self, SplitMode};
use cl_kernels::{Dataset, Lambda, Split};

use crate::config::{ExperimentConfig, GeneratorKind, GridPoint, Kind};
use crate::output::Row;

/// Train sequence plus, when the generator defines a reusable rule, a test
/// sequence. Target-distractor labels are per-image assignments, so no test
/// split exists for them.
pub struct TaskData {
    pub train: Vec<Dataset>,
    pub test: Option<Vec<Dataset>>,
}

fn gaussian_matrix(rows: usize, cols: usize, seed: u64, purpose: &str) -> DMatrix<f64> {
    let mut rng = keyed_rng(seed, 0, purpose);
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn take_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

fn sign_labels(scores: &DVector<f64>) -> DVector<f64> {
    scores.map(|v| if v >= 0.0 { 1.0 } else { -1.0 })
}

/// Binary class dichotomy: the lower half of the sorted distinct classes
/// maps to +1, the rest to -1.
fn class_signs(labels: &[i64]) -> impl Fn(i64) -> f64 {
    let mut classes: Vec<i64> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let split = classes.len() / 2;
    let low: Vec<i64> = classes[..split.max(1)].to_vec();
    move |c| {
        if low.contains(&c) {
            1.0
        } else {
            -1.0
        }
    }
}

fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

fn regime_code(r: Regime) -> f64 {
    match r {
        Regime::Fr => 0.0,
        Regime::Of => 1.0,
        Regime::G => 2.0,
    }
}

// ---------------------------------------------------------------------------
// generation

fn td_data(cfg: &ExperimentConfig, point: &GridPoint, seed: u64) -> anyhow::Result<TaskData> {
    let gen = &cfg.generator;
    let params = gen.td_params(point, seed);
    let pool = gaussian_matrix(
        (gen.tasks + 1) * gen.p,
        cfg.kernel.input_dim,
        seed,
        "cli-pool",
    );
    let train = tasks::gen_target_distractor(&pool, &params)
        .context("task generation (tasks module)")?;
    Ok(TaskData { train, test: None })
}

fn permutation_data(
    cfg: &ExperimentConfig,
    point: &GridPoint,
    seed: u64,
    pool: Option<&LabeledPool>,
) -> anyhow::Result<TaskData> {
    let gen = &cfg.generator;
    let n0 = cfg.kernel.input_dim;
    let p = gen.p;
    let pt = gen.test_p();
    let ratio = point.ratio.or(gen.ratio).unwrap_or(0.0);

    let (base_train, base_test) = match pool {
        None => {
            let x = gaussian_matrix(p, n0, seed, "cli-train");
            let xt = gaussian_matrix(pt, n0, seed, "cli-test");
            let w = gaussian_matrix(n0, 1, seed, "cli-teacher").column(0).into_owned();
            let y = sign_labels(&(&x * &w));
            let yt = sign_labels(&(&xt * &w));
            (
                Dataset::new(x, y, "base", Split::Train)
                    .context("base task (data module)")?,
                Dataset::new(xt, yt, "base", Split::Test)
                    .context("base task (data module)")?,
            )
        }
        Some(pool) => {
            ensure!(
                pool.images.ncols() == n0,
                "kernel.input_dim = {} does not match the source image width {}",
                n0,
                pool.images.ncols()
            );
            let rows = pool.images.nrows();
            let need = p + pt;
            ensure!(
                rows >= need,
                "source pool has {rows} rows; {p} train plus {pt} test images needed"
            );
            let mut rng = keyed_rng(seed, 0, "cli-rows");
            let idx = rand::seq::index::sample(&mut rng, rows, need).into_vec();
            let sel = tasks::preprocess(&take_rows(&pool.images, &idx))
                .context("preprocessing (tasks module)")?;
            let to_sign = class_signs(&pool.labels);
            let y = DVector::from_fn(need, |i, _| to_sign(pool.labels[idx[i]]));
            (
                Dataset::new(
                    sel.rows(0, p).into_owned(),
                    y.rows(0, p).into_owned(),
                    "base",
                    Split::Train,
                )
                .context("base task (data module)")?,
                Dataset::new(
                    sel.rows(p, pt).into_owned(),
                    y.rows(p, pt).into_owned(),
                    "base",
                    Split::Test,
                )
                .context("base task (data module)")?,
            )
        }
    };

    let train = tasks::gen_permutation(&base_train, ratio, gen.tasks, seed, gen.permute_first)
        .context("task generation (tasks module)")?;
    let test = tasks::gen_permutation(&base_test, ratio, gen.tasks, seed, gen.permute_first)
        .context("task generation (tasks module)")?;
    Ok(TaskData {
        train,
        test: Some(test),
    })
}

fn split_data(
    cfg: &ExperimentConfig,
    seed: u64,
    pool: Option<&LabeledPool>,
) -> anyhow::Result<TaskData> {
    let gen = &cfg.generator;
    let pool = pool.context("split requires a loaded source pool")?;
    ensure!(
        pool.images.ncols() == cfg.kernel.input_dim,
        "kernel.input_dim = {} does not match the source image width {}",
        cfg.kernel.input_dim,
        pool.images.ncols()
    );
    let rows = pool.images.nrows();
    // 3x headroom over the nominal budget absorbs class imbalance in the
    // subsample; gen_split reports exhaustion per class group otherwise.
    let want = (3 * gen.tasks * (gen.p + gen.test_p())).min(rows);
    ensure!(want >= 4, "source pool has too few rows ({rows})");
    let mut rng = keyed_rng(seed, 0, "cli-rows");
    let idx = rand::seq::index::sample(&mut rng, rows, want).into_vec();
    let images = tasks::preprocess(&take_rows(&pool.images, &idx))
        .context("preprocessing (tasks module)")?;
    let labels: Vec<i64> = idx.iter().map(|&i| pool.labels[i]).collect();

    let n_train = (want * 4) / 5;
    let train_pool = LabeledPool {
        images: images.rows(0, n_train).into_owned(),
        labels: labels[..n_train].to_vec(),
    };
    let test_pool = LabeledPool {
        images: images.rows(n_train, want - n_train).into_owned(),
        labels: labels[n_train..].to_vec(),
    };
    let mode = match gen.split_percent {
        Some(x) => SplitMode::Partial(x),
        None => SplitMode::Disjoint,
    };
    let mut train = tasks::gen_split(&train_pool, mode, gen.p, seed)
        .context("task generation (tasks module)")?;
    let mut test = tasks::gen_split(&test_pool, mode, gen.test_p(), seed)
        .context("task generation (tasks module)")?;
    ensure!(
        train.len() >= gen.tasks && test.len() >= gen.tasks,
        "source classes support only {} tasks of p = {}, {} requested",
        train.len().min(test.len()),
        gen.p,
        gen.tasks
    );
    train.truncate(gen.tasks);
    test.truncate(gen.tasks);
    Ok(TaskData {
        train,
        test: Some(test),
    })
}

fn generate(
    cfg: &ExperimentConfig,
    point: &GridPoint,
    seed: u64,
    pool: Option<&LabeledPool>,
) -> anyhow::Result<TaskData> {
    match cfg.generator.kind {
        GeneratorKind::TargetDistractor => td_data(cfg, point, seed),
        GeneratorKind::Permutation => permutation_data(cfg, point, seed, pool),
        GeneratorKind::Split => split_data(cfg, seed, pool),
    }
}

// ---------------------------------------------------------------------------
// metric emission

struct Emit {
    rows: Vec<Row>,
    label: String,
    seed: u64,
    alpha: Option<f64>,
    lambda: Option<Lambda>,
}

impl Emit {
    fn push(&mut self, t: Option<u64>, metric: &'static str, value: f64) {
        self.rows.push(Row {
            experiment: self.label.clone(),
            seed: self.seed,
            t,
            alpha: self.alpha,
            lambda: self.lambda,
            metric,
            value,
        });
    }
}

/// Grid coordinates without a dedicated CSV column become metric rows.
fn coordinate_rows(e: &mut Emit, point: &GridPoint) {
    if let Some(v) = point.ratio {
        e.push(None, "ratio", v);
    }
    if let Some(v) = point.rho_shared {
        e.push(None, "rho_shared", v);
    }
    if let Some(v) = point.rho_target {
        e.push(None, "rho_target", v);
    }
    if let Some(v) = point.rho_flip {
        e.push(None, "rho_flip", v);
    }
}

fn sequence_rows(e: &mut Emit, rep: &SequenceReport, with_fit: bool) -> anyhow::Result<()> {
    let tt = rep.f.nrows();
    for t in 1..=tt {
        e.push(Some(t as u64), "loss_t1", rep.f[(t - 1, 0)]);
        e.push(Some(t as u64), "f_t1", rep.f[(t - 1, 0)] - rep.f[(0, 0)]);
        if let Some(g) = &rep.g {
            e.push(Some(t as u64), "g_tt", g[(t - 1, t - 1)]);
        }
    }
    if with_fit && tt >= 3 {
        let series: Vec<(f64, f64)> = (1..=tt)
            .map(|t| (t as f64, rep.f[(t - 1, 0)] - rep.f[(0, 0)]))
            .collect();
        // Saturating-exponential fit of the per-seed forgetting curve. Short
        // series can leave too few points after truncation; the raw f_t1
        // rows are always present, so a failed fit is skipped, not fatal.
        if let Ok(fit) = cl_kernels::analysis::fit_exponential(&series) {
            e.push(None, "fit_f_max", fit.f_max);
            e.push(None, "fit_tau", fit.tau_f);
            e.push(None, "fit_residual", fit.residual);
            e.push(None, "fit_tau_defined", if fit.tau_defined { 1.0 } else { 0.0 });
        }
    }
    Ok(())
}

fn ops_rows(e: &mut Emit, cfg: &ExperimentConfig, data: &TaskData) -> anyhow::Result<()> {
    let (d1, d2) = (&data.train[0], &data.train[1]);
    let ops = orderparams::order_parameters(d1, d2, &cfg.kernel)
        .context("order parameters (orderparams module)")?;
    e.push(None, "gamma_feature", ops.gamma_feature);
    e.push(None, "gamma_rf", ops.gamma_rf);
    e.push(None, "gamma_rule", ops.gamma_rule);
    e.push(None, "conflict", ops.conflict);
    e.push(None, "f21_predicted", orderparams::predict_f21(&ops));
    e.push(None, "gamma_sim", ops.gamma_sim);
    let full = orderparams::f21_full(d1, d2, &cfg.kernel)
        .context("full forgetting (orderparams module)")?;
    e.push(None, "f21_full", full);
    Ok(())
}

fn multihead_rows(
    e: &mut Emit,
    cfg: &ExperimentConfig,
    point: &GridPoint,
    data: &TaskData,
) -> anyhow::Result<()> {
    let alpha = point.alpha.expect("multi-head-phase grid carries alpha");
    let (d1, d2) = (&data.train[0], &data.train[1]);
    let mh = MultiHeadConfig {
        kernel: cfg.kernel,
        alpha,
        magnitude_approx: true,
    };
    let sol = MultiHeadSolution::solve(d1, d2, &mh)
        .context("two-task renormalization (multihead module)")?;
    let f = &sol.factors;
    e.push(None, "f21", sol.forgetting().context("forgetting (multihead module)")?);
    e.push(None, "u11", f.u11);
    e.push(None, "u12", f.u12);
    e.push(None, "u22_1", f.u22_1);
    e.push(None, "u22_0", f.u22_0);
    e.push(None, "gap", f.gap);
    e.push(None, "regime", regime_code(f.regime));
    if let Some(test) = &data.test {
        let g = sol
            .generalization(&test[1])
            .context("generalization (multihead module)")?;
        e.push(None, "g22", g.value);
        e.push(None, "g22_diverges", if g.diverges { 1.0 } else { 0.0 });
    }

    // The critical load does not depend on alpha; emit it once per pair, on
    // the first alpha of the grid.
    let first_alpha = cfg.grid.alpha.as_ref().map(|a| a[0]);
    if first_alpha == Some(alpha) {
        let ac = orderparams::alpha_c(
            orderparams::gamma_sim(d1, d2, &cfg.kernel)
                .context("similarity (orderparams module)")?,
        );
        let boundary = cl_kernels::multihead::alpha_critical(d1, d2, &mh)
            .context("critical load (multihead module)")?;
        let keep = e.alpha.take();
        e.push(None, "alpha_c_boundary", boundary.from_boundary);
        e.push(None, "alpha_c_similarity", ac);
        e.alpha = keep;
    }
    Ok(())
}

fn gd_rows(e: &mut Emit, cfg: &ExperimentConfig, data: &TaskData, seed: u64) -> anyhow::Result<()> {
    let spec = cfg.gd.as_ref().expect("gd-crosscheck carries a gd section");
    let test_seq: Vec<Dataset> = match &data.test {
        Some(t) => t.clone(),
        None => data.train.clone(),
    };
    let mut tcfg = spec.train.clone();
    tcfg.seed = seed;
    let metrics = gd::run_cl_experiment(
        &data.train,
        &test_seq,
        spec.width,
        cfg.kernel.depth,
        cfg.kernel.nonlinearity,
        &tcfg,
        spec.mode,
    )
    .context("network training (gd module)")?;

    let tt = data.train.len();
    for t in 1..=tt {
        e.push(Some(t as u64), "gd_loss_t1", metrics.test_loss[t - 1][0]);
        e.push(Some(t as u64), "gd_f_t1", metrics.first_task_forgetting[t - 1]);
        e.push(Some(t as u64), "gd_sign_acc_t1", metrics.sign_acc[t - 1][0]);
        e.push(Some(t as u64), "gd_readout_sq_norm", metrics.readout_sq_norm[t - 1]);
        e.push(Some(t as u64), "gd_train_mse", metrics.logs[t - 1].final_train_mse);
        e.push(Some(t as u64), "gd_update_ratio", metrics.logs[t - 1].final_update_ratio);
        e.push(Some(t as u64), "gd_steps", metrics.logs[t - 1].steps as f64);
        let stop = match metrics.logs[t - 1].stop {
            gd::StopReason::MseTarget => 0.0,
            gd::StopReason::UpdateNorm => 1.0,
            gd::StopReason::MaxSteps => 2.0,
        };
        e.push(Some(t as u64), "gd_stop", stop);
    }

    let queries = gaussian_matrix(spec.queries, cfg.kernel.input_dim, seed, "cli-queries");
    match spec.mode {
        gd::Mode::MultiHeadWPenalty => {
            let alpha = cfg.generator.p as f64 / spec.width as f64;
            let mh = MultiHeadConfig {
                kernel: cfg.kernel,
                alpha,
                magnitude_approx: true,
            };
            let sol = MultiHeadSolution::solve(&data.train[0], &data.train[1], &mh)
                .context("two-task renormalization (multihead module)")?;
            e.alpha = Some(alpha);
            e.push(None, "theory_f21", sol.forgetting().context("forgetting (multihead module)")?);
            e.push(None, "theory_u22_1", sol.factors.u22_1);
            e.push(None, "gd_u22", metrics.readout_sq_norm[tt - 1]);
            let (_, th2) = sol
                .mean_predictors(&queries)
                .context("mean predictors (multihead module)")?;
            let gd2 = metrics
                .final_params
                .forward(&queries, tt - 1)
                .context("query forward pass (gd module)")?;
            e.push(None, "cosine", cosine(&gd2, &th2));
        }
        _ => {
            let sol = singlehead::fit_sequence(&data.train, &cfg.kernel, cfg.approximation.mode())
                .context("sequence predictor (singlehead module)")?;
            for t in 1..=tt {
                let pred = sol
                    .predict_at(t, &test_seq[0].x)
                    .context("sequence predictor (singlehead module)")?;
                let loss = singlehead::loss(&pred, &test_seq[0].y)
                    .context("loss (singlehead module)")?;
                e.push(Some(t as u64), "theory_loss_t1", loss);
            }
            let th = sol
                .predict(&queries)
                .context("sequence predictor (singlehead module)")?;
            let gdq = metrics
                .final_params
                .forward(&queries, 0)
                .context("query forward pass (gd module)")?;
            e.push(None, "cosine", cosine(&gdq, &th));
        }
    }
    Ok(())
}

fn run_point(
    cfg: &ExperimentConfig,
    label: String,
    point: &GridPoint,
    seed: u64,
    pool: Option<&LabeledPool>,
) -> anyhow::Result<Vec<Row>> {
    let mut e = Emit {
        rows: Vec::new(),
        label,
        seed,
        alpha: point.alpha,
        lambda: point.lambda,
    };
    coordinate_rows(&mut e, point);
    match cfg.kind {
        Kind::OpsSweep => {
            let data = generate(cfg, point, seed, pool)?;
            ops_rows(&mut e, cfg, &data)?;
        }
        Kind::SingleHeadSequence => {
            let data = generate(cfg, point, seed, pool)?;
            let rep = singlehead::forgetting_matrix(
                &data.train,
                data.test.as_deref(),
                &cfg.kernel,
                cfg.approximation.mode(),
            )
            .context("sequence predictor (singlehead module)")?;
            sequence_rows(&mut e, &rep, true)?;
        }
        Kind::MultiHeadPhase => {
            let data = generate(cfg, point, seed, pool)?;
            multihead_rows(&mut e, cfg, point, &data)?;
        }
        Kind::GdCrosscheck => {
            let data = generate(cfg, point, seed, pool)?;
            gd_rows(&mut e, cfg, &data, seed)?;
        }
        Kind::LambdaSweep => {
            let lambda = point
                .lambda
                .expect("lambda-sweep grid carries lambda");
            let mut kernel = cfg.kernel;
            kernel.lambda = lambda;
            kernel
                .validate()
                .context("kernel at swept lambda (config module)")?;
            let data = generate(cfg, point, seed, pool)?;
            let rep = singlehead::forgetting_matrix(
                &data.train,
                data.test.as_deref(),
                &kernel,
                cfg.approximation.mode(),
            )
            .context("sequence predictor (singlehead module)")?;
            sequence_rows(&mut e, &rep, false)?;
        }
    }
    Ok(e.rows)
}

/// Executes every (grid point, seed) job on the rayon pool and merges rows
/// in grid-major, seed-minor order regardless of completion order.
pub fn run_all(cfg: &ExperimentConfig) -> anyhow::Result<(Vec<Row>, usize)> {
    let pool = match cfg.generator.source.format.file_format() {
        None => None,
        Some(fmt) => {
            let path = cfg
                .generator
                .source
                .resolved_path()
                .context("file source needs a path")?;
            Some(
                tasks::load::load_source(&path, fmt)
                    .with_context(|| format!("loading {} (tasks module)", path.display()))?,
            )
        }
    };

    let points = cfg.grid.points();
    let single = points.len() == 1;
    let name = cfg.name();
    let jobs: Vec<(GridPoint, u64, String)> = points
        .iter()
        .flat_map(|pt| {
            cfg.seeds.iter().map(move |&s| {
                let label = if single {
                    name.to_string()
                } else {
                    format!("{name}/g{:03}", pt.idx)
                };
                (*pt, s, label)
            })
        })
        .collect();

    let nested: Vec<Vec<Row>> = jobs
        .par_iter()
        .map(|(pt, seed, label)| {
            run_point(cfg, label.clone(), pt, *seed, pool.as_ref()).with_context(|| {
                format!("grid point {} seed {} failed", pt.idx, seed)
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    Ok((nested.into_iter().flatten().collect(), points.len()))
}
