//! `clk`: batch runner for continual-learning kernel experiments.
//!
//! Two commands: `validate` checks a config's schema and feasibility
//! without running anything; `run` executes the sweep and writes a
//! long-format results CSV, a seed-averaged summary CSV, and a JSON
//! manifest. Re-running a config reproduces both CSVs byte for byte; only
//! the manifest carries timing.

mod config;
mod output;
mod runner;

use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "clk", version, about = "Continual-learning kernel experiment runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute a config: results CSV + summary CSV + manifest
    Run {
        /// Experiment config (TOML)
        config: PathBuf,
        /// Worker threads; 0 means one per core
        #[arg(long, default_value_t = 0)]
        threads: usize,
        /// Output directory, overriding the config's `output`
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Offset added to every seed in the config
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// Check schema and feasibility without executing
    Validate {
        /// Experiment config (TOML)
        config: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Validate { config } => {
            let cfg = config::load(&config, 0)?;
            let echo = toml::to_string_pretty(&cfg).context("echoing the resolved config")?;
            println!("ok");
            print!("{echo}");
            Ok(())
        }
        Cmd::Run {
            config,
            threads,
            out_dir,
            seed_offset,
        } => run(&config, threads, out_dir, seed_offset),
    }
}

fn run(
    config: &PathBuf,
    threads: usize,
    out_dir: Option<PathBuf>,
    seed_offset: u64,
) -> anyhow::Result<()> {
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("sizing the worker pool")?;
    }
    let started = Instant::now();
    let cfg = config::load(config, seed_offset)?;
    let resolved = toml::to_string_pretty(&cfg).context("serializing the resolved config")?;
    let hash = output::config_hash(&resolved);

    let (rows, grid_points) = runner::run_all(&cfg)?;

    let dir = out_dir
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    let name = cfg.name().to_string();
    let results_file = format!("{name}.results.csv");
    let summary_file = format!("{name}.summary.csv");
    let manifest_file = format!("{name}.manifest.json");

    output::write_results(&dir.join(&results_file), &hash, &rows)?;
    output::write_summary(&dir.join(&summary_file), &hash, &rows)?;
    let manifest = output::Manifest {
        config_hash: &hash,
        tool: "clk",
        tool_version: env!("CARGO_PKG_VERSION"),
        lib_version: cl_kernels::VERSION,
        kind: cfg.kind.as_str(),
        name: &name,
        threads: rayon::current_num_threads(),
        seed_offset,
        seeds: &cfg.seeds,
        grid_points,
        rows: rows.len(),
        results_file: results_file.clone(),
        summary_file: summary_file.clone(),
        wall_seconds: started.elapsed().as_secs_f64(),
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        resolved_config: &resolved,
    };
    output::write_manifest(&dir.join(&manifest_file), &manifest)?;

    println!(
        "wrote {} rows ({} grid points x {} seeds) to {}",
        rows.len(),
        grid_points,
        cfg.seeds.len(),
        dir.display()
    );
    println!("  {results_file}");
    println!("  {summary_file}");
    println!("  {manifest_file}");
    Ok(())
}
