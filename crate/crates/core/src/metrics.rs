//! Error metrics over Monte Carlo trials, and the analytic RMSRE_τ from
//! bias and variance.

use std::fmt;
use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::EstimateMatrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Are,
    Ame,
    Apme,
    Eare,
    Rmse,
    Rmsre,
    EareTau,
    Eareo,
    RmsreTau,
}

impl MetricKind {
    pub const ALL: [MetricKind; 9] = [
        MetricKind::Are,
        MetricKind::Ame,
        MetricKind::Apme,
        MetricKind::Eare,
        MetricKind::Rmse,
        MetricKind::Rmsre,
        MetricKind::EareTau,
        MetricKind::Eareo,
        MetricKind::RmsreTau,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Are => "ARE",
            MetricKind::Ame => "AME",
            MetricKind::Apme => "APME",
            MetricKind::Eare => "EARE",
            MetricKind::Rmse => "RMSE",
            MetricKind::Rmsre => "RMSRE",
            MetricKind::EareTau => "EARE_tau",
            MetricKind::Eareo => "EAREO",
            MetricKind::RmsreTau => "RMSRE_tau",
        }
    }

    fn is_root(self) -> bool {
        matches!(self, MetricKind::Rmse | MetricKind::Rmsre | MetricKind::RmsreTau)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct MetricConfig<T> {
    /// One threshold per query, count first.
    pub tau: Vec<T>,
    pub are_alphas: Vec<T>,
    pub ame_taus: Vec<T>,
    /// `(alpha, tau)` pairs.
    pub apme: Vec<(T, T)>,
    pub selection: Vec<MetricKind>,
}

impl<T: Scalar> MetricConfig<T> {
    pub fn new(tau: Vec<T>) -> Result<Self> {
        if let Some(t) = tau.iter().find(|t| !(t.is_finite() && **t > T::zero())) {
            return Err(Error::Parameter(format!("tau must be positive, got {t}")));
        }
        Ok(Self {
            tau,
            are_alphas: vec![T::lit(0.1), T::lit(0.2)],
            ame_taus: vec![T::one(), T::lit(5.0)],
            apme: vec![(T::lit(0.2), T::one()), (T::lit(0.2), T::lit(5.0))],
            selection: MetricKind::ALL.to_vec(),
        })
    }
}

/// Independent pipeline outputs against the true aggregates.
#[derive(Clone, Debug)]
pub struct TrialSet<T> {
    truth: Array2<T>,
    trials: Vec<EstimateMatrix<T>>,
}

impl<T: Scalar> TrialSet<T> {
    pub fn new(truth: Array2<T>, trials: Vec<EstimateMatrix<T>>) -> Result<Self> {
        for t in &trials {
            if t.shape() != truth.dim() {
                return Err(Error::Shape {
                    expected: format!("{:?}", truth.dim()),
                    got: format!("{:?}", t.shape()),
                });
            }
        }
        Ok(Self { truth, trials })
    }

    pub fn truth(&self) -> &Array2<T> {
        &self.truth
    }

    pub fn trials(&self) -> &[EstimateMatrix<T>] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    fn num_queries(&self) -> usize {
        self.truth.nrows()
    }

    fn num_slices(&self) -> usize {
        self.truth.ncols()
    }

    fn require_trials(&self) -> Result<()> {
        if self.trials.is_empty() {
            return Err(Error::Parameter("metrics need at least one trial".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RmsreBreakdown<T> {
    pub combined: T,
    pub per_query: Vec<T>,
}

fn check_tau<T: Scalar>(cfg: &MetricConfig<T>, d1: usize) -> Result<()> {
    if cfg.tau.len() != d1 {
        return Err(Error::Shape {
            expected: format!("{d1} thresholds"),
            got: format!("{}", cfg.tau.len()),
        });
    }
    Ok(())
}

fn combine<T: Scalar>(per_query_squared: Vec<T>) -> RmsreBreakdown<T> {
    let n = T::from_count(per_query_squared.len().max(1) as u64);
    let combined = (per_query_squared.iter().copied().sum::<T>() / n).sqrt();
    RmsreBreakdown {
        combined,
        per_query: per_query_squared.into_iter().map(|x| x.sqrt()).collect(),
    }
}

/// Empirical RMSRE_τ per query and combined over all queries.
pub fn rmsre_tau<T: Scalar>(trials: &TrialSet<T>, cfg: &MetricConfig<T>) -> Result<RmsreBreakdown<T>> {
    trials.require_trials()?;
    check_tau(cfg, trials.num_queries())?;
    let m = T::from_count(trials.num_slices() as u64);
    let n = T::from_count(trials.len() as u64);
    let squared = (0..trials.num_queries())
        .map(|l| {
            let mut acc = T::zero();
            for j in 0..trials.num_slices() {
                let v = trials.truth[[l, j]];
                let denom = cfg.tau[l].max(v);
                for t in &trials.trials {
                    let e = (t.get(l, j) - v) / denom;
                    acc = acc + e * e;
                }
            }
            acc / n / m
        })
        .collect();
    Ok(combine(squared))
}

/// RMSRE_τ from the bias–variance identity `E(U - V)² = bias² + Var(U)`.
pub fn rmsre_tau_analytic<T: Scalar>(
    bias: &Array2<T>,
    variance: &Array2<T>,
    truth: &Array2<T>,
    cfg: &MetricConfig<T>,
) -> Result<RmsreBreakdown<T>> {
    for a in [bias, variance] {
        if a.dim() != truth.dim() {
            return Err(Error::Shape {
                expected: format!("{:?}", truth.dim()),
                got: format!("{:?}", a.dim()),
            });
        }
    }
    check_tau(cfg, truth.nrows())?;
    let m = T::from_count(truth.ncols() as u64);
    let squared = (0..truth.nrows())
        .map(|l| {
            let mut acc = T::zero();
            for j in 0..truth.ncols() {
                let denom = cfg.tau[l].max(truth[[l, j]]);
                acc = acc + (bias[[l, j]] * bias[[l, j]] + variance[[l, j]]) / (denom * denom);
            }
            acc / m
        })
        .collect();
    Ok(combine(squared))
}

/// One row of the metric table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow<T> {
    pub metric: MetricKind,
    /// Query index, count is 0. `None` for the across-query aggregate.
    pub query: Option<usize>,
    pub value: T,
    pub params: String,
    /// Slices (or slice-trials for EAREO) excluded by a zero denominator.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricTable<T> {
    pub rows: Vec<MetricRow<T>>,
}

impl<T: Scalar> MetricTable<T> {
    pub fn get(&self, metric: MetricKind, query: Option<usize>, params: &str) -> Option<&MetricRow<T>> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.query == query && r.params == params)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "query", "value", "params", "skipped"])?;
        for r in &self.rows {
            w.write_record([
                r.metric.name().to_string(),
                r.query.map_or_else(|| "all".to_string(), |q| q.to_string()),
                format!("{}", r.value),
                r.params.clone(),
                r.skipped.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-slice accumulator: mean over trials, then mean over contributing
/// slices.
struct SliceMean<T> {
    total: T,
    slices: usize,
    skipped: usize,
}

impl<T: Scalar> SliceMean<T> {
    fn new() -> Self {
        Self {
            total: T::zero(),
            slices: 0,
            skipped: 0,
        }
    }

    fn add(&mut self, x: T) {
        self.total = self.total + x;
        self.slices += 1;
    }

    fn mean(&self) -> T {
        if self.slices == 0 {
            T::zero()
        } else {
            self.total / T::from_count(self.slices as u64)
        }
    }
}

/// Every selected metric of the table, per query, plus an across-query
/// row (mean, or root of the mean square for root metrics).
pub fn metric_suite<T: Scalar>(trials: &TrialSet<T>, cfg: &MetricConfig<T>) -> Result<MetricTable<T>> {
    trials.require_trials()?;
    check_tau(cfg, trials.num_queries())?;
    let mut rows = Vec::new();
    let d1 = trials.num_queries();
    for &kind in &cfg.selection {
        let variants: Vec<(String, T, T)> = match kind {
            MetricKind::Are => cfg
                .are_alphas
                .iter()
                .map(|&a| (format!("alpha={a}"), a, T::zero()))
                .collect(),
            MetricKind::Ame => cfg
                .ame_taus
                .iter()
                .map(|&t| (format!("tau={t}"), T::zero(), t))
                .collect(),
            MetricKind::Apme => cfg
                .apme
                .iter()
                .map(|&(a, t)| (format!("alpha={a};tau={t}"), a, t))
                .collect(),
            _ => vec![(String::new(), T::zero(), T::zero())],
        };
        for (label, alpha, tau) in variants {
            let mut per_query = Vec::with_capacity(d1);
            for l in 0..d1 {
                let label = if matches!(kind, MetricKind::EareTau | MetricKind::RmsreTau) {
                    format!("tau={}", cfg.tau[l])
                } else {
                    label.clone()
                };
                let (value, skipped) = slice_metric(trials, l, kind, alpha, tau, cfg.tau[l]);
                rows.push(MetricRow {
                    metric: kind,
                    query: Some(l),
                    value,
                    params: label,
                    skipped,
                });
                per_query.push(value);
            }
            let n = T::from_count(d1.max(1) as u64);
            let value = if kind.is_root() {
                (per_query.iter().map(|&x| x * x).sum::<T>() / n).sqrt()
            } else {
                per_query.iter().copied().sum::<T>() / n
            };
            let params = if matches!(kind, MetricKind::EareTau | MetricKind::RmsreTau) {
                "tau=per-query".to_string()
            } else {
                label
            };
            rows.push(MetricRow {
                metric: kind,
                query: None,
                value,
                params,
                skipped: 0,
            });
        }
    }
    Ok(MetricTable { rows })
}

fn slice_metric<T: Scalar>(
    trials: &TrialSet<T>,
    l: usize,
    kind: MetricKind,
    alpha: T,
    tau: T,
    query_tau: T,
) -> (T, usize) {
    let n = T::from_count(trials.len() as u64);
    let mut acc = SliceMean::new();
    for j in 0..trials.num_slices() {
        let v = trials.truth[[l, j]];
        let needs_v = matches!(
            kind,
            MetricKind::Are | MetricKind::Apme | MetricKind::Eare | MetricKind::Rmsre
        );
        if needs_v && v == T::zero() {
            acc.skipped += 1;
            continue;
        }
        let errors = trials.trials.iter().map(|t| (t.get(l, j), (t.get(l, j) - v).abs()));
        let freq = |hit: &dyn Fn(T) -> bool| -> T {
            T::from_count(errors.clone().filter(|&(_, e)| hit(e)).count() as u64) / n
        };
        let mean = |f: &dyn Fn(T) -> T| -> T { errors.clone().map(|(_, e)| f(e)).sum::<T>() / n };
        let value = match kind {
            MetricKind::Are => freq(&|e| e / v > alpha),
            MetricKind::Ame => freq(&|e| e > tau),
            MetricKind::Apme => freq(&|e| e / v > alpha && e > tau),
            MetricKind::Eare => mean(&|e| e / v),
            MetricKind::Rmse => mean(&|e| e * e),
            MetricKind::Rmsre => mean(&|e| (e / v) * (e / v)),
            MetricKind::EareTau => mean(&|e| e / query_tau.max(v)),
            MetricKind::RmsreTau => {
                let denom = query_tau.max(v);
                mean(&|e| (e / denom) * (e / denom))
            }
            MetricKind::Eareo => {
                let mut total = T::zero();
                let mut used = 0u64;
                for (u, e) in errors.clone() {
                    if u == T::zero() {
                        acc.skipped += 1;
                    } else {
                        total = total + e / u.abs();
                        used += 1;
                    }
                }
                if used == 0 {
                    continue;
                }
                total / T::from_count(used)
            }
        };
        acc.add(value);
    }
    let value = acc.mean();
    let value = if kind.is_root() { value.sqrt() } else { value };
    (value, acc.skipped)
}
