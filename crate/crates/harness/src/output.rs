use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ara_budget::{CountMode, Result};
use serde::Serialize;

use crate::config::{ExperimentConfig, Method};
use crate::experiment::{ExperimentOutput, ResultRow};

pub const RESULTS_FILE: &str = "results.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PARAMS_FILE: &str = "params.json";
pub const MANIFEST_FILE: &str = "run-manifest.json";

fn join<I: IntoIterator<Item = f64>>(xs: I) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn count_mode(row: &ResultRow) -> String {
    match row.params.count_mode {
        CountMode::Remainder => "remainder".into(),
        CountMode::Dedicated { fraction } => format!("dedicated:{fraction}"),
    }
}

/// Writes `results.csv`. Columns are fixed; the per-query columns cover
/// the largest query count among the rows. Runtimes are not included so
/// that the file is reproducible byte for byte.
pub fn write_results<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let queries = rows.iter().map(|r| r.per_query.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["method", "epsilon", "trials", "rmsre_tau", "rmsre_tau_analytic"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for l in 0..queries {
        header.push(format!("rmsre_tau_q{l}"));
        header.push(format!("rmsre_tau_analytic_q{l}"));
    }
    header.extend(
        ["variant", "count_limit", "count_mode", "clip_thresholds", "fractions", "train_objective"]
            .iter()
            .map(|s| s.to_string()),
    );
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.method.to_string(),
            r.epsilon.to_string(),
            r.trials.to_string(),
            r.rmsre_tau.to_string(),
            r.rmsre_tau_analytic.to_string(),
        ];
        for l in 0..queries {
            rec.push(r.per_query.get(l).map_or_else(String::new, |x| x.to_string()));
            rec.push(r.per_query_analytic.get(l).map_or_else(String::new, |x| x.to_string()));
        }
        rec.push(format!("{:?}", r.params.variant).to_lowercase());
        rec.push(r.params.count_limit.to_string());
        rec.push(count_mode(r));
        rec.push(join(r.params.clip_thresholds.iter().copied()));
        rec.push(join(r.params.fractions.iter().copied()));
        rec.push(r.train_objective.map_or_else(String::new, |x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Every metric of every row, long format.
pub fn write_metrics<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "epsilon", "metric", "query", "params", "value", "skipped"])?;
    for r in rows {
        for m in &r.metrics.rows {
            w.write_record([
                r.method.to_string(),
                r.epsilon.to_string(),
                m.metric.name().to_string(),
                m.query.map_or_else(|| "all".to_string(), |q| q.to_string()),
                m.params.clone(),
                m.value.to_string(),
                m.skipped.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ParamsEntry<'a> {
    method: Method,
    epsilon: f64,
    params: &'a ara_budget::BudgetParams64,
}

#[derive(Serialize)]
struct RowTiming {
    method: Method,
    epsilon: f64,
    runtime_secs: f64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    harness_version: &'static str,
    seed: u64,
    epsilons: &'a [f64],
    trials: usize,
    methods: &'a [Method],
    tau: &'a [f64],
    train_records: usize,
    test_records: usize,
    config: &'a ExperimentConfig,
    rows: Vec<RowTiming>,
}

/// Writes results, metrics, parameters and the run manifest into `dir`,
/// creating it if needed. Returns the paths written.
pub fn emit_outputs(out: &ExperimentOutput, cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let results = dir.join(RESULTS_FILE);
    write_results(&out.rows, fs::File::create(&results)?)?;
    let metrics = dir.join(METRICS_FILE);
    write_metrics(&out.rows, fs::File::create(&metrics)?)?;

    let params: Vec<ParamsEntry> = out
        .rows
        .iter()
        .map(|r| ParamsEntry {
            method: r.method,
            epsilon: r.epsilon,
            params: &r.params,
        })
        .collect();
    let params_path = dir.join(PARAMS_FILE);
    fs::write(&params_path, serde_json::to_string_pretty(&params)? + "\n")?;

    let manifest = Manifest {
        harness_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        epsilons: &cfg.epsilons,
        trials: cfg.trials,
        methods: &cfg.methods,
        tau: &out.tau,
        train_records: out.train_records,
        test_records: out.test_records,
        config: cfg,
        rows: out
            .rows
            .iter()
            .map(|r| RowTiming {
                method: r.method,
                epsilon: r.epsilon,
                runtime_secs: r.runtime_secs,
            })
            .collect(),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(vec![results, metrics, params_path, manifest_path])
}
