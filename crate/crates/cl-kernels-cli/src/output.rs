//! Long-format result rows, their CSV serialization, in-tool seed
//! aggregation, and the run manifest.
//!
//! Determinism contract: rows are produced in grid-major, then seed-major,
//! then emission order, and floats are written with the shortest
//! round-trip formatting, so re-running a config byte-reproduces both CSV
//! files. Only the manifest carries timing.

use std::collections::HashMap;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use cl_kernels::Lambda;

/// One metric observation. Optional cells are left empty in the CSV.
#[derive(Clone, Debug)]
pub struct Row {
    pub experiment: String,
    pub seed: u64,
    pub t: Option<u64>,
    pub alpha: Option<f64>,
    pub lambda: Option<Lambda>,
    pub metric: &'static str,
    pub value: f64,
}

/// Shortest round-trip form; scientific notation outside a readable
/// magnitude window, infinities and NaN spelled out.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else if v != 0.0 && !(1e-4..1e16).contains(&v.abs()) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

fn fmt_lambda(l: Option<Lambda>) -> String {
    match l {
        None => String::new(),
        Some(Lambda::Infinite) => "inf".to_string(),
        Some(Lambda::Finite(v)) => fmt_f64(v),
    }
}

fn fmt_opt_f64(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn fmt_opt_u64(v: Option<u64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// First 16 hex digits of the SHA-256 of the resolved config text.
pub fn config_hash(resolved_toml: &str) -> String {
    let digest = Sha256::digest(resolved_toml.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn writer(path: &Path) -> anyhow::Result<csv::Writer<std::fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_path(path)
        .with_context(|| format!("cannot create {}", path.display()))
}

pub fn write_results(path: &Path, hash: &str, rows: &[Row]) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "experiment",
        "config_hash",
        "seed",
        "t",
        "alpha",
        "lambda",
        "metric",
        "value",
    ])?;
    for r in rows {
        w.write_record([
            r.experiment.as_str(),
            hash,
            &r.seed.to_string(),
            &fmt_opt_u64(r.t),
            &fmt_opt_f64(r.alpha),
            &fmt_lambda(r.lambda),
            r.metric,
            &fmt_f64(r.value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Group key for seed aggregation: everything but the seed and value.
#[derive(Clone, PartialEq, Eq, Hash)]
struct GroupKey {
    experiment: String,
    t: Option<u64>,
    alpha: Option<u64>,
    lambda: Option<u64>,
    metric: &'static str,
}

fn f64_key(v: Option<f64>) -> Option<u64> {
    v.map(f64::to_bits)
}

fn lambda_key(l: Option<Lambda>) -> Option<u64> {
    l.map(|l| match l {
        Lambda::Infinite => u64::MAX,
        Lambda::Finite(v) => v.to_bits(),
    })
}

struct Group {
    t: Option<u64>,
    alpha: Option<f64>,
    lambda: Option<Lambda>,
    values: Vec<f64>,
}

/// Mean and standard error over seeds, one output row per metric group, in
/// first-appearance order.
pub fn write_summary(path: &Path, hash: &str, rows: &[Row]) -> anyhow::Result<()> {
    let mut order: Vec<(GroupKey, Group)> = Vec::new();
    let mut index: HashMap<GroupKey, usize> = HashMap::new();
    for r in rows {
        let key = GroupKey {
            experiment: r.experiment.clone(),
            t: r.t,
            alpha: f64_key(r.alpha),
            lambda: lambda_key(r.lambda),
            metric: r.metric,
        };
        let slot = *index.entry(key.clone()).or_insert_with(|| {
            order.push((
                key,
                Group {
                    t: r.t,
                    alpha: r.alpha,
                    lambda: r.lambda,
                    values: Vec::new(),
                },
            ));
            order.len() - 1
        });
        order[slot].1.values.push(r.value);
    }

    let mut w = writer(path)?;
    w.write_record([
        "experiment",
        "config_hash",
        "t",
        "alpha",
        "lambda",
        "metric",
        "mean",
        "stderr",
        "n_seeds",
    ])?;
    for (key, g) in &order {
        let n = g.values.len();
        let mean = g.values.iter().sum::<f64>() / n as f64;
        let stderr = if n < 2 {
            String::new()
        } else {
            let var = g.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                / (n - 1) as f64;
            fmt_f64((var / n as f64).sqrt())
        };
        w.write_record([
            key.experiment.as_str(),
            hash,
            &fmt_opt_u64(g.t),
            &fmt_opt_f64(g.alpha),
            &fmt_lambda(g.lambda),
            key.metric,
            &fmt_f64(mean),
            &stderr,
            &n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
pub struct Manifest<'a> {
    pub config_hash: &'a str,
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub lib_version: &'static str,
    pub kind: &'a str,
    pub name: &'a str,
    pub threads: usize,
    pub seed_offset: u64,
    pub seeds: &'a [u64],
    pub grid_points: usize,
    pub rows: usize,
    pub results_file: String,
    pub summary_file: String,
    pub wall_seconds: f64,
    pub created_unix: u64,
    pub resolved_config: &'a str,
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, text + "\n")
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}
