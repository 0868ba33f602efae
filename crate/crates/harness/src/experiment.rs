use std::time::Instant;

use ara_budget::dataset::ingest_csv;
use ara_budget::metrics::{metric_suite, rmsre_tau, rmsre_tau_analytic, MetricTable};
use ara_budget::optimizer::{baseline_params, optimize, optimize_l1, OptimizerReport};
use ara_budget::pipeline::{expected_moments, reconstruct, simulate};
use ara_budget::synthgen::generate_split;
use ara_budget::{
    BudgetParams64, Dataset64, Error, MetricConfig64, ObjectiveContext64, PipelineConfig,
    Result, RngStream, SliceDictionary, TrialSet,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{CsvSource, ExperimentConfig, Method, Source};

/// Top-level stream index reserved for trial randomness; synthetic data
/// uses the low indices of the same seed.
const TRIAL_STREAM: u64 = 1 << 20;

/// Train and test data with the slice dictionary when ingested from CSV.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub train: Dataset64,
    pub test: Dataset64,
    pub dictionary: Option<SliceDictionary>,
    pub rejected: usize,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData> {
    match &cfg.source {
        Source::Synth(s) => {
            let (train, test) = generate_split(&s.resolve(cfg.seed))?;
            Ok(LoadedData {
                train,
                test,
                dictionary: None,
                rejected: 0,
            })
        }
        Source::Csv(CsvSource(spec)) => {
            if !spec.path.is_file() {
                return Err(Error::Data(format!("{}: no such file", spec.path.display())));
            }
            let ing = ingest_csv::<f64>(spec)?;
            Ok(LoadedData {
                train: ing.train,
                test: ing.test,
                dictionary: Some(ing.dictionary),
                rejected: ing.rejected,
            })
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ResultRow {
    pub method: Method,
    pub epsilon: f64,
    /// Combined empirical RMSRE_τ over all queries.
    pub rmsre_tau: f64,
    pub rmsre_tau_analytic: f64,
    /// Empirical RMSRE_τ per query, count first.
    pub per_query: Vec<f64>,
    pub per_query_analytic: Vec<f64>,
    pub params: BudgetParams64,
    /// Relaxed objective `R` of `params` on the training data.
    pub train_objective: Option<f64>,
    pub trials: usize,
    pub runtime_secs: f64,
    #[serde(skip)]
    pub metrics: MetricTable<f64>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub tau: Vec<f64>,
    pub train_records: usize,
    pub test_records: usize,
}

/// Fits the parameters of every configured method at one privacy budget.
pub fn fit_methods(
    cfg: &ExperimentConfig,
    train: &Dataset64,
    tau: &[f64],
    epsilon: f64,
) -> Result<Vec<(Method, BudgetParams64, Option<f64>)>> {
    let needs_opt = cfg.methods.iter().any(|m| *m != Method::Baseline);
    let ctx = ObjectiveContext64::new(train, tau.to_vec(), epsilon, cfg.gamma)?;
    let linf: Option<OptimizerReport<f64>> = if needs_opt {
        Some(optimize(&ctx, &cfg.optimizer)?)
    } else {
        None
    };
    cfg.methods
        .iter()
        .map(|&m| {
            Ok(match m {
                Method::Baseline => {
                    let p = baseline_params(train, cfg.baseline_quantile, cfg.baseline_count_limit())?;
                    (m, p, None)
                }
                Method::OptLinf => {
                    let r = linf.as_ref().expect("optimized above");
                    (m, r.params.clone(), Some(r.objective))
                }
                Method::OptL1 => {
                    let start = &linf.as_ref().expect("optimized above").params;
                    let r = optimize_l1(&ctx, start, &cfg.optimizer)?;
                    (m, r.params, Some(r.objective))
                }
            })
        })
        .collect()
}

/// Monte Carlo evaluation of fixed parameters on the test data.
pub fn evaluate_params(
    cfg: &ExperimentConfig,
    test: &Dataset64,
    tau: &[f64],
    method: Method,
    epsilon: f64,
    params: &BudgetParams64,
) -> Result<(TrialSet<f64>, MetricTable<f64>, Vec<f64>, Vec<f64>)> {
    let pcfg = PipelineConfig {
        gamma: cfg.gamma,
        epsilon,
        noise: cfg.noise,
    };
    let stream = RngStream::new(cfg.seed).substream_path(&[TRIAL_STREAM, method.stream_id(), epsilon.to_bits()]);
    let estimates = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|t| {
            let sim = simulate(test, params, &pcfg, &stream.substream(t))?;
            reconstruct(&sim.report, params)
        })
        .collect::<Result<Vec<_>>>()?;
    let truth = test.true_aggregates();
    let metric_cfg = MetricConfig64::new(tau.to_vec())?;
    let moments = expected_moments(test, params, &pcfg)?;
    let analytic = rmsre_tau_analytic(&moments.bias(&truth), &moments.variance, &truth, &metric_cfg)?;
    let trials = TrialSet::new(truth, estimates)?;
    let table = metric_suite(&trials, &metric_cfg)?;
    let empirical = rmsre_tau(&trials, &metric_cfg)?;
    let mut emp = vec![empirical.combined];
    emp.extend(empirical.per_query);
    let mut ana = vec![analytic.combined];
    ana.extend(analytic.per_query);
    Ok((trials, table, emp, ana))
}

/// Fits every method on the training data for each privacy budget and
/// scores it on the test data. Rows are ordered by method (config order),
/// then by budget (config order), independent of scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    run_on(cfg, &data.train, &data.test)
}

pub fn run_on(cfg: &ExperimentConfig, train: &Dataset64, test: &Dataset64) -> Result<ExperimentOutput> {
    if test.num_slices() != train.num_slices() || test.num_queries() != train.num_queries() {
        return Err(Error::Data("train and test data disagree on slices or queries".into()));
    }
    if test.is_empty() {
        return Err(Error::Data("test data is empty".into()));
    }
    let tau = train.median_tau()?;
    let per_eps: Vec<Vec<ResultRow>> = cfg
        .epsilons
        .par_iter()
        .map(|&eps| {
            let start = Instant::now();
            let fits = fit_methods(cfg, train, &tau, eps)?;
            let fit_secs = start.elapsed().as_secs_f64() / fits.len() as f64;
            fits.into_iter()
                .map(|(method, params, train_objective)| {
                    let start = Instant::now();
                    let (_, metrics, emp, ana) = evaluate_params(cfg, test, &tau, method, eps, &params)?;
                    let row = ResultRow {
                        method,
                        epsilon: eps,
                        rmsre_tau: emp[0],
                        rmsre_tau_analytic: ana[0],
                        per_query: emp[1..].to_vec(),
                        per_query_analytic: ana[1..].to_vec(),
                        params,
                        train_objective,
                        trials: cfg.trials,
                        runtime_secs: fit_secs + start.elapsed().as_secs_f64(),
                        metrics,
                    };
                    check_finite(&row)?;
                    Ok(row)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(cfg.methods.len() * cfg.epsilons.len());
    for i in 0..cfg.methods.len() {
        for eps_rows in &per_eps {
            rows.push(eps_rows[i].clone());
        }
    }
    Ok(ExperimentOutput {
        rows,
        tau,
        train_records: train.len(),
        test_records: test.len(),
    })
}

fn check_finite(row: &ResultRow) -> Result<()> {
    let values = [row.rmsre_tau, row.rmsre_tau_analytic]
        .into_iter()
        .chain(row.per_query.iter().copied())
        .chain(row.per_query_analytic.iter().copied())
        .chain(row.metrics.rows.iter().map(|r| r.value));
    for v in values {
        if !v.is_finite() {
            return Err(Error::Numerical(format!(
                "{} at epsilon {}: non-finite result {v}",
                row.method, row.epsilon
            )));
        }
    }
    Ok(())
}
