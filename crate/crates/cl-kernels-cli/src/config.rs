//! Experiment configuration: TOML schema, validation, and resolution.
//!
//! A config resolves to an explicit form (defaults filled in, seed offset
//! applied) before anything runs. The resolved form is what gets hashed, so
//! two configs that resolve identically share a hash no matter how they were
//! spelled.

use std::path::{Path, PathBuf};

use anyhow::{ensure, Context};
use serde::{Deserialize, Serialize};

use cl_kernels::gd;
use cl_kernels::multihead::MultiHeadConfig;
use cl_kernels::tasks::load::SourceFormat;
use cl_kernels::tasks::TargetDistractorParams;
use cl_kernels::{KernelConfig, Lambda};

/// Environment variable naming the directory that relative source paths are
/// resolved against.
pub const DATA_ROOT_VAR: &str = "CLK_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    OpsSweep,
    SingleHeadSequence,
    MultiHeadPhase,
    GdCrosscheck,
    LambdaSweep,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::OpsSweep => "ops-sweep",
            Kind::SingleHeadSequence => "single-head-sequence",
            Kind::MultiHeadPhase => "multi-head-phase",
            Kind::GdCrosscheck => "gd-crosscheck",
            Kind::LambdaSweep => "lambda-sweep",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    TargetDistractor,
    Permutation,
    Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    Gaussian,
    Idx,
    CifarBinary,
    NpySynthetic,
}

impl SourceKind {
    pub fn file_format(self) -> Option<SourceFormat> {
        match self {
            SourceKind::Gaussian => None,
            SourceKind::Idx => Some(SourceFormat::Idx),
            SourceKind::CifarBinary => Some(SourceFormat::CifarBinary),
            SourceKind::NpySynthetic => Some(SourceFormat::NpySynthetic),
        }
    }
}

/// Where base images come from. `gaussian` draws a fresh white pool per
/// seed; the file formats read a labeled pool once and subsample it by seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub format: SourceKind,
    /// Images file; resolved against `CLK_DATA_ROOT` when relative.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Pool rows for the gaussian source; defaults to what the generator
    /// needs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rows: Option<usize>,
}

impl Default for SourceSpec {
    fn default() -> Self {
        SourceSpec {
            format: SourceKind::Gaussian,
            path: None,
            rows: None,
        }
    }
}

impl SourceSpec {
    /// Absolute path of a file source, under the data-root convention.
    pub fn resolved_path(&self) -> Option<PathBuf> {
        let p = self.path.as_ref()?;
        if p.is_absolute() {
            return Some(p.clone());
        }
        match std::env::var_os(DATA_ROOT_VAR) {
            Some(root) => Some(Path::new(&root).join(p)),
            None => Some(p.clone()),
        }
    }

    fn validate(&self) -> anyhow::Result<()> {
        match self.format {
            SourceKind::Gaussian => {
                ensure!(
                    self.path.is_none(),
                    "generator.source.path does not apply to the gaussian format"
                );
            }
            _ => {
                ensure!(
                    self.rows.is_none(),
                    "generator.source.rows only applies to the gaussian format"
                );
                let p = self
                    .resolved_path()
                    .context("generator.source.path is required for file formats")?;
                ensure!(
                    p.is_file(),
                    "generator.source.path does not exist: {} (set {} for relative paths)",
                    p.display(),
                    DATA_ROOT_VAR
                );
            }
        }
        Ok(())
    }
}

fn default_tasks() -> usize {
    2
}

fn default_target_fraction() -> f64 {
    0.10
}

/// Task-sequence recipe. One flat table keyed by `type`; fields that do not
/// belong to the chosen type must stay unset.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    #[serde(rename = "type")]
    pub kind: GeneratorKind,
    /// Training examples per task.
    pub p: usize,
    #[serde(default = "default_tasks")]
    pub tasks: usize,
    // target-distractor knobs
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_shared: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_target: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_flip: Option<f64>,
    #[serde(default = "default_target_fraction")]
    pub target_fraction: f64,
    // permutation knobs
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    #[serde(default)]
    pub permute_first: bool,
    // split knobs: percent mixing for two tasks, unset for disjoint groups
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_percent: Option<f64>,
    #[serde(default)]
    pub source: SourceSpec,
}

impl GeneratorSpec {
    /// Test examples per task, matched to the 80/20 pool split.
    pub fn test_p(&self) -> usize {
        (self.p / 4).max(2)
    }

    fn forbid(&self, cond: bool, field: &str) -> anyhow::Result<()> {
        ensure!(
            !cond,
            "generator.{field} does not apply to type {:?}",
            self.kind
        );
        Ok(())
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        ensure!(self.p >= 2, "generator.p must be at least 2");
        ensure!(self.tasks >= 1, "generator.tasks must be at least 1");
        match self.kind {
            GeneratorKind::TargetDistractor => {
                self.forbid(self.ratio.is_some(), "ratio")?;
                self.forbid(self.permute_first, "permute_first")?;
                self.forbid(self.split_percent.is_some(), "split_percent")?;
                ensure!(
                    matches!(self.source.format, SourceKind::Gaussian),
                    "target-distractor draws its own gaussian pool; file sources do not apply"
                );
                ensure!(
                    self.rho_shared.is_some() && self.rho_target.is_some(),
                    "target-distractor requires generator.rho_shared and generator.rho_target"
                );
            }
            GeneratorKind::Permutation => {
                self.forbid(self.rho_shared.is_some(), "rho_shared")?;
                self.forbid(self.rho_target.is_some(), "rho_target")?;
                self.forbid(self.rho_flip.is_some(), "rho_flip")?;
                self.forbid(self.split_percent.is_some(), "split_percent")?;
                ensure!(
                    self.ratio.is_some(),
                    "permutation requires generator.ratio in [0, 1]"
                );
                self.source.validate()?;
                if let Some(rows) = self.source.rows {
                    ensure!(
                        rows >= self.p + self.test_p(),
                        "generator.source.rows = {rows} cannot supply {} train plus {} test images",
                        self.p,
                        self.test_p()
                    );
                }
            }
            GeneratorKind::Split => {
                self.forbid(self.rho_shared.is_some(), "rho_shared")?;
                self.forbid(self.rho_target.is_some(), "rho_target")?;
                self.forbid(self.rho_flip.is_some(), "rho_flip")?;
                self.forbid(self.ratio.is_some(), "ratio")?;
                self.forbid(self.permute_first, "permute_first")?;
                ensure!(
                    !matches!(self.source.format, SourceKind::Gaussian),
                    "split requires a class-labeled file source"
                );
                self.source.validate()?;
                if let Some(x) = self.split_percent {
                    ensure!(
                        (0.0..=100.0).contains(&x),
                        "generator.split_percent must lie in [0, 100]"
                    );
                }
            }
        }
        Ok(())
    }

    /// Target-distractor parameters with grid overrides applied.
    pub fn td_params(&self, point: &GridPoint, seed: u64) -> TargetDistractorParams {
        TargetDistractorParams {
            rho_shared: point.rho_shared.or(self.rho_shared).unwrap_or(1.0),
            rho_target: point.rho_target.or(self.rho_target).unwrap_or(1.0),
            rho_flip: point.rho_flip.or(self.rho_flip).unwrap_or(0.0),
            target_fraction: self.target_fraction,
            p: self.p,
            t: self.tasks,
            seed,
        }
    }
}

/// Swept coordinates. Lists may only be present where the experiment kind
/// gives them meaning; every present list must be non-empty.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<Lambda>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_shared: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_target: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_flip: Option<Vec<f64>>,
}

/// One point of the sweep, in deterministic grid order.
#[derive(Clone, Copy, Debug, Default)]
pub struct GridPoint {
    pub idx: usize,
    pub alpha: Option<f64>,
    pub lambda: Option<Lambda>,
    pub ratio: Option<f64>,
    pub rho_shared: Option<f64>,
    pub rho_target: Option<f64>,
    pub rho_flip: Option<f64>,
}

impl GridSpec {
    fn axes(&self) -> [(&'static str, Option<&Vec<f64>>); 5] {
        [
            ("alpha", self.alpha.as_ref()),
            ("ratio", self.ratio.as_ref()),
            ("rho_shared", self.rho_shared.as_ref()),
            ("rho_target", self.rho_target.as_ref()),
            ("rho_flip", self.rho_flip.as_ref()),
        ]
    }

    fn present(&self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = self
            .axes()
            .iter()
            .filter_map(|(n, v)| v.map(|_| *n))
            .collect();
        if self.lambda.is_some() {
            out.push("lambda");
        }
        out
    }

    fn validate_lists(&self) -> anyhow::Result<()> {
        for (name, list) in self.axes() {
            if let Some(list) = list {
                ensure!(!list.is_empty(), "grid.{name} must not be empty");
                ensure!(
                    list.iter().all(|v| v.is_finite()),
                    "grid.{name} entries must be finite"
                );
            }
        }
        if let Some(l) = &self.lambda {
            ensure!(!l.is_empty(), "grid.lambda must not be empty");
        }
        Ok(())
    }

    /// Cartesian product in the fixed order alpha, lambda, ratio,
    /// rho_shared, rho_target, rho_flip (outermost to innermost).
    pub fn points(&self) -> Vec<GridPoint> {
        fn opt(list: &Option<Vec<f64>>) -> Vec<Option<f64>> {
            match list {
                Some(v) => v.iter().copied().map(Some).collect(),
                None => vec![None],
            }
        }
        let lambdas: Vec<Option<Lambda>> = match &self.lambda {
            Some(v) => v.iter().copied().map(Some).collect(),
            None => vec![None],
        };
        let mut out = Vec::new();
        for &alpha in &opt(&self.alpha) {
            for &lambda in &lambdas {
                for &ratio in &opt(&self.ratio) {
                    for &rho_shared in &opt(&self.rho_shared) {
                        for &rho_target in &opt(&self.rho_target) {
                            for &rho_flip in &opt(&self.rho_flip) {
                                out.push(GridPoint {
                                    idx: out.len(),
                                    alpha,
                                    lambda,
                                    ratio,
                                    rho_shared,
                                    rho_target,
                                    rho_flip,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn default_queries() -> usize {
    200
}

/// Finite-network side of the gd-crosscheck kind.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GdSpec {
    /// Hidden-layer width N.
    pub width: usize,
    pub mode: gd::Mode,
    /// Held-out query inputs for the theory comparison.
    #[serde(default = "default_queries")]
    pub queries: usize,
    #[serde(default)]
    pub train: gd::TrainConfig,
}

/// Predictor treatment for the single-head kinds. `full` carries every
/// cross-time kernel factor; `random-feature` freezes the kernels at their
/// stationary form and therefore cannot see the coupling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Approximation {
    #[default]
    Full,
    RandomFeature,
}

impl Approximation {
    pub fn mode(self) -> cl_kernels::singlehead::Mode {
        match self {
            Approximation::Full => cl_kernels::singlehead::Mode::FullGibbs,
            Approximation::RandomFeature => cl_kernels::singlehead::Mode::RandomFeature,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    /// Experiment label used in output rows and file names; defaults to the
    /// kind.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub approximation: Approximation,
    /// Output directory; overridden by --out-dir. Kept ahead of the table
    /// fields so the resolved config serializes back to valid TOML.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub kernel: KernelConfig,
    pub generator: GeneratorSpec,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gd: Option<GdSpec>,
}

impl ExperimentConfig {
    pub fn name(&self) -> &str {
        self.name.as_deref().unwrap_or(self.kind.as_str())
    }

    /// Applies the seed offset and fills the default name, producing the
    /// form that is hashed and echoed.
    pub fn resolve(mut self, seed_offset: u64) -> Self {
        for s in &mut self.seeds {
            *s = s.wrapping_add(seed_offset);
        }
        if self.name.is_none() {
            self.name = Some(self.kind.as_str().to_string());
        }
        self
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        ensure!(!self.seeds.is_empty(), "seeds must not be empty");
        if let Some(name) = &self.name {
            ensure!(
                !name.is_empty() && !name.contains(['/', '\\']),
                "name must be a plain label without path separators"
            );
        }
        self.kernel
            .validate()
            .context("kernel section rejected (config module)")?;
        self.generator
            .validate()
            .context("generator section rejected")?;
        ensure!(
            self.kernel.input_dim >= 2,
            "kernel.input_dim must be at least 2"
        );
        self.grid.validate_lists()?;
        self.validate_kind()?;
        Ok(())
    }

    fn validate_kind(&self) -> anyhow::Result<()> {
        let allowed: &[&str] = match self.kind {
            Kind::OpsSweep => &["rho_shared", "rho_target", "rho_flip"],
            Kind::SingleHeadSequence | Kind::GdCrosscheck => &[],
            Kind::MultiHeadPhase => &["alpha", "ratio", "rho_shared", "rho_target", "rho_flip"],
            Kind::LambdaSweep => &["lambda"],
        };
        for axis in self.grid.present() {
            ensure!(
                allowed.contains(&axis),
                "grid.{axis} does not apply to kind {}",
                self.kind.as_str()
            );
        }
        if self.kind != Kind::GdCrosscheck {
            ensure!(
                self.gd.is_none(),
                "the gd section only applies to kind gd-crosscheck"
            );
        }
        match self.kind {
            Kind::OpsSweep => {
                ensure!(
                    matches!(self.generator.kind, GeneratorKind::TargetDistractor),
                    "ops-sweep requires the target-distractor generator"
                );
                ensure!(
                    self.generator.tasks >= 2,
                    "ops-sweep needs at least 2 tasks to form a pair"
                );
                self.validate_td_grid()?;
            }
            Kind::SingleHeadSequence | Kind::LambdaSweep => {
                if self.kind == Kind::LambdaSweep {
                    ensure!(
                        self.grid.lambda.is_some(),
                        "lambda-sweep requires grid.lambda"
                    );
                    ensure!(
                        self.approximation == Approximation::Full,
                        "lambda-sweep needs approximation = \"full\"; the \
                         random-feature predictor does not depend on lambda"
                    );
                }
                self.validate_td_grid()?;
            }
            Kind::MultiHeadPhase => {
                ensure!(
                    self.grid.alpha.is_some(),
                    "multi-head-phase requires grid.alpha"
                );
                ensure!(
                    self.generator.tasks >= 2,
                    "multi-head-phase needs at least 2 tasks to form a pair"
                );
                self.validate_td_grid()?;
                for point in self.grid.points() {
                    let mh = MultiHeadConfig {
                        kernel: self.kernel,
                        alpha: point.alpha.expect("alpha grid is required"),
                        magnitude_approx: true,
                    };
                    mh.validate()
                        .with_context(|| {
                            format!(
                                "grid point {} rejected (multihead module)",
                                point.idx
                            )
                        })?;
                }
            }
            Kind::GdCrosscheck => {
                let gd = self
                    .gd
                    .as_ref()
                    .context("gd-crosscheck requires a [gd] section")?;
                ensure!(gd.width >= 1, "gd.width must be at least 1");
                ensure!(gd.queries >= 2, "gd.queries must be at least 2");
                gd.train
                    .validate()
                    .context("gd.train section rejected (gd module)")?;
                ensure!(
                    self.generator.tasks >= 2,
                    "gd-crosscheck needs at least 2 tasks to form a pair"
                );
                if matches!(gd.mode, gd::Mode::MultiHeadWPenalty) {
                    let mh = MultiHeadConfig {
                        kernel: self.kernel,
                        alpha: self.generator.p as f64 / gd.width as f64,
                        magnitude_approx: true,
                    };
                    mh.validate()
                        .context("implied load p/width rejected (multihead module)")?;
                }
                self.validate_td_grid()?;
            }
        }
        Ok(())
    }

    /// Feasibility of every target-distractor grid combination, surfaced
    /// with the constraint that fails.
    fn validate_td_grid(&self) -> anyhow::Result<()> {
        if !matches!(self.generator.kind, GeneratorKind::TargetDistractor) {
            return Ok(());
        }
        for point in self.grid.points() {
            let params = self.generator.td_params(&point, 0);
            params.validate().with_context(|| {
                format!(
                    "grid point {} infeasible (tasks module): rho_shared={}, \
                     rho_target={}, rho_flip={}",
                    point.idx, params.rho_shared, params.rho_target, params.rho_flip
                )
            })?;
        }
        Ok(())
    }
}

/// Parse, resolve, and validate a config file.
pub fn load(path: &Path, seed_offset: u64) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let cfg: ExperimentConfig = toml::from_str(&text)
        .with_context(|| format!("config schema violation in {}", path.display()))?;
    let cfg = cfg.resolve(seed_offset);
    cfg.validate()
        .with_context(|| format!("config rejected: {}", path.display()))?;
    Ok(cfg)
}
