//! The summary-report pipeline: per-record histogram contributions,
//! per-impression contribution bounding, noisy aggregation and
//! reconstruction of per-slice estimates.
//!
//! Aggregation keys are the pairs `(row, slice)` where a row is one of the
//! value queries `1..=d`, the remainder key `⊥` that absorbs unused budget,
//! and (only in [`CountMode::Dedicated`]) an explicit count key. Every
//! contribution has ℓ1 norm exactly `⌊Γ/C⌋`, so at most `⌊Γ/⌊Γ/C⌋⌋`
//! conversions per impression survive bounding.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Record};
use crate::error::{param_err, Error, Result};
use crate::mechanisms::{
    clip, dlap_sample, dlap_variance, randomized_round, randomized_round_variance, DLapParam,
    RngStream,
};
use crate::scalar::Scalar;
use crate::DEFAULT_CONTRIBUTION_BUDGET;

/// How values are clipped into the per-contribution budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Per-query clipping with a budget fraction per query, randomized
    /// rounding.
    Linf,
    /// Joint ℓ1 normalization of the scaled value vector, floor rounding.
    L1,
}

/// How the conversion count is recovered.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum CountMode<T> {
    /// From the remainder key plus all value keys of a slice.
    Remainder,
    /// From an explicit count key holding `fraction` of the budget.
    Dedicated { fraction: T },
}

/// The analyst-controlled parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct BudgetParams<T> {
    /// Count limit `C`.
    pub count_limit: u64,
    /// Per-query clipping thresholds `C_l`, `l = 1..=d`.
    pub clip_thresholds: Vec<T>,
    /// Per-query budget fractions `α_l`. Together with a dedicated count
    /// fraction they sum to one.
    pub fractions: Vec<T>,
    pub variant: Variant,
    pub count_mode: CountMode<T>,
}

const FRACTION_SUM_TOLERANCE: f64 = 1e-9;

fn fraction_tolerance<T: Scalar>(terms: usize) -> f64 {
    FRACTION_SUM_TOLERANCE.max(4.0 * terms as f64 * T::epsilon().as_f64())
}

impl<T: Scalar> BudgetParams<T> {
    pub fn linf(count_limit: u64, clip_thresholds: Vec<T>, fractions: Vec<T>) -> Self {
        Self {
            count_limit,
            clip_thresholds,
            fractions,
            variant: Variant::Linf,
            count_mode: CountMode::Remainder,
        }
    }

    /// ℓ1 parameters. Fractions are not used by the encoder and are set
    /// uniform.
    pub fn l1(count_limit: u64, clip_thresholds: Vec<T>) -> Self {
        let d = clip_thresholds.len();
        Self {
            count_limit,
            fractions: vec![T::one() / T::from_count(d.max(1) as u64); d],
            clip_thresholds,
            variant: Variant::L1,
            count_mode: CountMode::Remainder,
        }
    }

    pub fn num_queries(&self) -> usize {
        self.clip_thresholds.len()
    }

    pub fn validate(&self, gamma: u64) -> Result<()> {
        let d = self.clip_thresholds.len();
        if self.count_limit < 1 || self.count_limit > gamma {
            return param_err(format!(
                "count limit must be in [1, {gamma}], got {}",
                self.count_limit
            ));
        }
        if self.fractions.len() != d {
            return param_err(format!(
                "{} budget fractions for {d} queries",
                self.fractions.len()
            ));
        }
        if let Some(c) = self
            .clip_thresholds
            .iter()
            .find(|c| !(c.is_finite() && **c > T::zero()))
        {
            return param_err(format!("clipping thresholds must be positive, got {c}"));
        }
        let mut total = 0.0;
        for a in self.fractions.iter().copied().chain(self.count_fraction()) {
            if !(a.is_finite() && a >= T::zero()) {
                return param_err(format!("budget fractions must be nonnegative, got {a}"));
            }
            total += a.as_f64();
        }
        if d > 0 || self.count_fraction().is_some() {
            if (total - 1.0).abs() > fraction_tolerance::<T>(d + 1) {
                return param_err(format!("budget fractions sum to {total}, expected 1"));
            }
        }
        if self.variant == Variant::L1 && self.count_fraction().is_some() {
            return param_err("the l1 encoder recovers counts from the remainder key only");
        }
        Ok(())
    }

    fn count_fraction(&self) -> Option<T> {
        match self.count_mode {
            CountMode::Remainder => None,
            CountMode::Dedicated { fraction } => Some(fraction),
        }
    }

    pub fn layout(&self, num_slices: usize) -> KeyLayout {
        KeyLayout {
            num_queries: self.num_queries(),
            num_slices,
            dedicated_count: self.count_fraction().is_some(),
        }
    }

    /// Integer budget shares derived from the parameters.
    pub fn scales(&self, gamma: u64) -> Scales {
        let per_contribution = gamma / self.count_limit;
        let share = |a: T| -> u64 {
            (a.as_f64() * gamma as f64 / self.count_limit as f64)
                .floor()
                .max(0.0) as u64
        };
        let mut queries: Vec<u64> = match self.variant {
            Variant::Linf => self.fractions.iter().map(|&a| share(a)).collect(),
            Variant::L1 => vec![per_contribution; self.num_queries()],
        };
        let count = self.count_fraction().map(share);
        if self.variant == Variant::Linf {
            // A fraction sum a hair above one must not push the shares past
            // the per-contribution budget.
            loop {
                let total: u64 = queries.iter().sum::<u64>() + count.unwrap_or(0);
                if total <= per_contribution {
                    break;
                }
                let i = (0..queries.len())
                    .max_by_key(|&i| queries[i])
                    .expect("nonempty when over budget");
                queries[i] -= 1;
            }
        }
        Scales {
            per_contribution,
            queries,
            count,
        }
    }

    /// Conversions per impression that survive bounding.
    pub fn kept_per_impression(&self, gamma: u64) -> usize {
        kept_per_impression(self.count_limit, gamma)
    }
}

/// `⌊Γ/⌊Γ/C⌋⌋`: how many contributions of norm `⌊Γ/C⌋` fit in `Γ`.
pub fn kept_per_impression(count_limit: u64, gamma: u64) -> usize {
    let per = gamma / count_limit.max(1);
    if per == 0 {
        usize::MAX
    } else {
        (gamma / per) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scales {
    /// `⌊Γ/C⌋`.
    pub per_contribution: u64,
    /// `⌊α_l Γ/C⌋` (ℓ∞) or `⌊Γ/C⌋` (ℓ1), per query.
    pub queries: Vec<u64>,
    /// `⌊α_0 Γ/C⌋` for a dedicated count key.
    pub count: Option<u64>,
}

/// Row of the key grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KeyRow {
    Count,
    /// 1-based query index.
    Query(usize),
    Remainder,
}

impl fmt::Display for KeyRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyRow::Count => f.write_str("count"),
            KeyRow::Query(l) => write!(f, "{l}"),
            KeyRow::Remainder => f.write_str("bot"),
        }
    }
}

impl std::str::FromStr for KeyRow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "count" => Ok(KeyRow::Count),
            "bot" => Ok(KeyRow::Remainder),
            other => other
                .parse::<usize>()
                .ok()
                .filter(|&l| l >= 1)
                .map(KeyRow::Query)
                .ok_or_else(|| Error::Data(format!("unknown key row '{other}'"))),
        }
    }
}

/// Dense layout of the aggregation keys: rows are `[count?, 1..=d, ⊥]`,
/// columns are slices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyLayout {
    pub num_queries: usize,
    pub num_slices: usize,
    pub dedicated_count: bool,
}

impl KeyLayout {
    pub fn num_rows(&self) -> usize {
        self.num_queries + 1 + usize::from(self.dedicated_count)
    }

    pub fn num_keys(&self) -> usize {
        self.num_rows() * self.num_slices
    }

    pub fn row_index(&self, row: KeyRow) -> Option<usize> {
        let offset = usize::from(self.dedicated_count);
        match row {
            KeyRow::Count if self.dedicated_count => Some(0),
            KeyRow::Count => None,
            KeyRow::Query(l) if (1..=self.num_queries).contains(&l) => Some(offset + l - 1),
            KeyRow::Query(_) => None,
            KeyRow::Remainder => Some(offset + self.num_queries),
        }
    }

    pub fn row_at(&self, index: usize) -> KeyRow {
        let offset = usize::from(self.dedicated_count);
        if self.dedicated_count && index == 0 {
            KeyRow::Count
        } else if index == offset + self.num_queries {
            KeyRow::Remainder
        } else {
            KeyRow::Query(index - offset + 1)
        }
    }

    fn key_name(&self, row: usize, slice: usize) -> String {
        format!("{},{slice}", self.row_at(row))
    }

    fn parse_key(&self, key: &str) -> Result<(usize, usize)> {
        let (row, slice) = key
            .split_once(',')
            .ok_or_else(|| Error::Data(format!("malformed key '{key}'")))?;
        let row: KeyRow = row.trim().parse()?;
        let slice: usize = slice
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("malformed slice in key '{key}'")))?;
        let r = self
            .row_index(row)
            .ok_or_else(|| Error::Data(format!("key '{key}' not in layout")))?;
        if slice >= self.num_slices {
            return Err(Error::Data(format!("key '{key}' slice out of range")));
        }
        Ok((r, slice))
    }
}

/// Histogram contribution of one record: nonnegative integer weights, all
/// in the record's slice column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistogramContribution {
    pub layout: KeyLayout,
    pub slice: usize,
    /// Weights of the slice column, in layout row order.
    pub weights: Vec<u64>,
}

impl HistogramContribution {
    pub fn norm(&self) -> u64 {
        self.weights.iter().sum()
    }

    pub fn weight(&self, row: KeyRow, slice: usize) -> u64 {
        match self.layout.row_index(row) {
            Some(r) if slice == self.slice => self.weights[r],
            _ => 0,
        }
    }

    /// `{"<row>,<slice>": weight}` over the record's slice column.
    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<String, u64> = self
            .weights
            .iter()
            .enumerate()
            .map(|(r, &w)| (self.layout.key_name(r, self.slice), w))
            .collect();
        serde_json::json!({ "layout": self.layout, "weights": map })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let layout: KeyLayout = serde_json::from_value(value["layout"].clone())?;
        let map: BTreeMap<String, u64> = serde_json::from_value(value["weights"].clone())?;
        let mut weights = vec![0; layout.num_rows()];
        let mut slice = None;
        for (k, w) in map {
            let (r, j) = layout.parse_key(&k)?;
            if *slice.get_or_insert(j) != j {
                return Err(Error::Data("contribution spans several slices".into()));
            }
            weights[r] = w;
        }
        Ok(Self {
            layout,
            slice: slice.unwrap_or(0),
            weights,
        })
    }
}

/// Maps records to histogram contributions for fixed parameters.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    params: BudgetParams<T>,
    layout: KeyLayout,
    scales: Scales,
    gamma: u64,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(params: &BudgetParams<T>, num_slices: usize, gamma: u64) -> Result<Self> {
        params.validate(gamma)?;
        Ok(Self {
            layout: params.layout(num_slices),
            scales: params.scales(gamma),
            params: params.clone(),
            gamma,
        })
    }

    pub fn layout(&self) -> KeyLayout {
        self.layout
    }

    pub fn scales(&self) -> &Scales {
        &self.scales
    }

    pub fn encode<R: Rng + ?Sized>(&self, record: &Record<T>, rng: &mut R) -> HistogramContribution {
        let mut weights = vec![0; self.layout.num_rows()];
        self.encode_into(&record.values, rng, &mut weights);
        HistogramContribution {
            layout: self.layout,
            slice: record.slice,
            weights,
        }
    }

    /// Writes the slice-column weights of a record with `values` into
    /// `out` (length `layout.num_rows()`).
    pub fn encode_into<R: Rng + ?Sized>(&self, values: &[T], rng: &mut R, out: &mut [u64]) {
        match self.params.variant {
            Variant::Linf => self.encode_linf_into(values, rng, out),
            Variant::L1 => self.encode_l1_into(values, out),
        }
    }

    fn encode_linf_into<R: Rng + ?Sized>(&self, values: &[T], rng: &mut R, out: &mut [u64]) {
        let offset = usize::from(self.layout.dedicated_count);
        let mut used = 0;
        if let Some(count_scale) = self.scales.count {
            // q_0 = 1 clipped at C_0 = 1 lands exactly on an integer
            out[0] = count_scale;
            used += count_scale;
        }
        for (l, (&v, &c)) in values.iter().zip(&self.params.clip_thresholds).enumerate() {
            let scale = T::from_count(self.scales.queries[l]);
            let w = randomized_round(scale * clip(v, c) / c, rng);
            out[offset + l] = w;
            used += w;
        }
        out[offset + values.len()] = self.scales.per_contribution - used;
    }

    fn encode_l1_into(&self, values: &[T], out: &mut [u64]) {
        let d = values.len();
        let scaled: Vec<T> = values
            .iter()
            .zip(&self.params.clip_thresholds)
            .map(|(&v, &c)| v / c)
            .collect();
        let norm: T = scaled.iter().copied().sum();
        let factor = T::from_count(self.gamma) / T::from_count(self.params.count_limit)
            / norm.max(T::one());
        let per = self.scales.per_contribution;
        let mut used = 0;
        for (l, &v) in scaled.iter().enumerate() {
            let w = (v * factor).floor().to_u64().unwrap_or(0).min(per);
            out[l] = w;
            used += w;
        }
        // Rounding in the scaled sum must not overdraw the budget.
        while used > per {
            let i = (0..d).max_by_key(|&i| out[i]).expect("d > 0 when overdrawn");
            out[i] -= 1;
            used -= 1;
        }
        out[d] = per - used;
    }
}

/// ℓ∞ encoding of a single record.
pub fn encode_linf<T: Scalar, R: Rng + ?Sized>(
    record: &Record<T>,
    params: &BudgetParams<T>,
    num_slices: usize,
    gamma: u64,
    rng: &mut R,
) -> Result<HistogramContribution> {
    if params.variant != Variant::Linf {
        return param_err("encode_linf requires linf parameters");
    }
    Ok(Encoder::new(params, num_slices, gamma)?.encode(record, rng))
}

/// ℓ1 encoding of a single record. Deterministic.
pub fn encode_l1<T: Scalar>(
    record: &Record<T>,
    params: &BudgetParams<T>,
    num_slices: usize,
    gamma: u64,
) -> Result<HistogramContribution> {
    if params.variant != Variant::L1 {
        return param_err("encode_l1 requires l1 parameters");
    }
    let mut unused = RngStream::new(0);
    Ok(Encoder::new(params, num_slices, gamma)?.encode(record, &mut unused))
}

/// Greedy online bounding of one impression's contributions: a
/// contribution is kept if it still fits in the remaining budget.
/// Returns the kept positions.
pub fn bound_contributions(ws: &[HistogramContribution], gamma: u64) -> Vec<usize> {
    bound_norms(ws.iter().map(HistogramContribution::norm), gamma)
}

pub fn bound_norms(norms: impl IntoIterator<Item = u64>, gamma: u64) -> Vec<usize> {
    let mut used = 0u64;
    let mut kept = Vec::new();
    for (i, n) in norms.into_iter().enumerate() {
        if used + n <= gamma {
            used += n;
            kept.push(i);
        }
    }
    kept
}

/// Privacy budget, contribution budget and noise switch of one run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig<T> {
    pub gamma: u64,
    pub epsilon: T,
    /// Off only for testing: the summary is then the exact sum.
    pub noise: bool,
}

impl<T: Scalar> PipelineConfig<T> {
    pub fn new(epsilon: T) -> Self {
        Self {
            gamma: DEFAULT_CONTRIBUTION_BUDGET,
            epsilon,
            noise: true,
        }
    }

    pub fn noiseless(epsilon: T) -> Self {
        Self {
            noise: false,
            ..Self::new(epsilon)
        }
    }

    pub fn with_gamma(self, gamma: u64) -> Self {
        Self { gamma, ..self }
    }

    pub fn dlap(&self) -> Result<DLapParam<T>> {
        DLapParam::for_budget(self.epsilon, self.gamma)
    }

    /// Per-key noise variance; zero with noise off.
    pub fn noise_variance(&self) -> Result<T> {
        if self.noise {
            Ok(dlap_variance(self.dlap()?))
        } else {
            Ok(T::zero())
        }
    }
}

/// Noisy integer vector over every declared key.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryReport<T> {
    pub layout: KeyLayout,
    /// Row-major `num_rows x num_slices`.
    pub weights: Vec<i64>,
    pub epsilon: T,
    pub gamma: u64,
    pub params: Option<BudgetParams<T>>,
}

impl<T: Scalar> SummaryReport<T> {
    pub fn get(&self, row: KeyRow, slice: usize) -> i64 {
        let r = self.layout.row_index(row).expect("row in layout");
        self.weights[r * self.layout.num_slices + slice]
    }

    pub fn l1_distance(&self, other: &Self) -> u64 {
        assert_eq!(self.layout, other.layout);
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| a.abs_diff(*b))
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let m = self.layout.num_slices;
        let map: BTreeMap<String, i64> = self
            .weights
            .iter()
            .enumerate()
            .map(|(i, &w)| (self.layout.key_name(i / m, i % m), w))
            .collect();
        Ok(serde_json::to_string_pretty(&serde_json::json!({
            "layout": self.layout,
            "epsilon": self.epsilon,
            "gamma": self.gamma,
            "params": self.params,
            "weights": map,
        }))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        let layout: KeyLayout = serde_json::from_value(v["layout"].clone())?;
        let map: BTreeMap<String, i64> = serde_json::from_value(v["weights"].clone())?;
        let m = layout.num_slices;
        let mut weights = vec![0; layout.num_keys()];
        for (k, w) in map {
            let (r, j) = layout.parse_key(&k)?;
            weights[r * m + j] = w;
        }
        Ok(Self {
            layout,
            weights,
            epsilon: serde_json::from_value(v["epsilon"].clone())?,
            gamma: serde_json::from_value(v["gamma"].clone())?,
            params: serde_json::from_value(v["params"].clone())?,
        })
    }
}

/// Sums aggregatable reports and adds i.i.d. discrete Laplace noise with
/// parameter `ε/Γ` to every key.
pub fn aggregate<'a, T: Scalar, R: Rng + ?Sized>(
    reports: impl IntoIterator<Item = &'a HistogramContribution>,
    layout: KeyLayout,
    cfg: &PipelineConfig<T>,
    rng: &mut R,
) -> Result<SummaryReport<T>> {
    let mut weights = vec![0i64; layout.num_keys()];
    for w in reports {
        if w.layout != layout {
            return Err(Error::Data("report layout does not match summary layout".into()));
        }
        for (r, &x) in w.weights.iter().enumerate() {
            weights[r * layout.num_slices + w.slice] += x as i64;
        }
    }
    add_noise(&mut weights, cfg, rng)?;
    Ok(SummaryReport {
        layout,
        weights,
        epsilon: cfg.epsilon,
        gamma: cfg.gamma,
        params: None,
    })
}

fn add_noise<T: Scalar, R: Rng + ?Sized>(
    weights: &mut [i64],
    cfg: &PipelineConfig<T>,
    rng: &mut R,
) -> Result<()> {
    let p = cfg.dlap()?;
    if cfg.noise {
        for w in weights.iter_mut() {
            *w += dlap_sample(p, rng);
        }
    }
    Ok(())
}

/// Outcome of running a whole dataset through the pipeline.
#[derive(Clone, Debug)]
pub struct Simulation<T> {
    pub report: SummaryReport<T>,
    /// Record positions that produced aggregatable reports.
    pub kept: Vec<usize>,
}

/// Runs encode → bound → aggregate on a dataset.
///
/// Each impression encodes from its own substream of `stream` (keyed by
/// impression id) and the noise comes from a separate substream, so the
/// contributions of one impression do not depend on the rest of the data.
pub fn simulate<T: Scalar>(
    data: &Dataset<T>,
    params: &BudgetParams<T>,
    cfg: &PipelineConfig<T>,
    stream: &RngStream,
) -> Result<Simulation<T>> {
    if params.num_queries() != data.num_queries() {
        return param_err(format!(
            "parameters for {} queries, dataset has {}",
            params.num_queries(),
            data.num_queries()
        ));
    }
    let encoder = Encoder::new(params, data.num_slices(), cfg.gamma)?;
    let layout = encoder.layout();
    let m = layout.num_slices;
    let mut weights = vec![0i64; layout.num_keys()];
    let mut scratch = vec![0u64; layout.num_rows()];
    let mut kept = Vec::new();
    let encode_stream = stream.substream(0);
    for (id, records) in data.impressions() {
        let mut rng = encode_stream.substream(id.0);
        let mut used = 0u64;
        for (&pos, record) in records.positions().iter().zip(records.iter()) {
            encoder.encode_into(&record.values, &mut rng, &mut scratch);
            let norm: u64 = scratch.iter().sum();
            if used + norm <= cfg.gamma {
                used += norm;
                kept.push(pos);
                for (r, &x) in scratch.iter().enumerate() {
                    weights[r * m + record.slice] += x as i64;
                }
            }
        }
    }
    add_noise(&mut weights, cfg, &mut stream.substream(1))?;
    Ok(Simulation {
        report: SummaryReport {
            layout,
            weights,
            epsilon: cfg.epsilon,
            gamma: cfg.gamma,
            params: Some(params.clone()),
        },
        kept,
    })
}

/// Reconstructed per-slice estimates, shape `(d + 1) x m`; row 0 is the
/// count.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateMatrix<T> {
    pub values: Array2<T>,
}

impl<T: Scalar> EstimateMatrix<T> {
    pub fn new(values: Array2<T>) -> Self {
        Self { values }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn get(&self, query: usize, slice: usize) -> T {
        self.values[[query, slice]]
    }

    /// Negative estimates set to zero. Display only; breaks unbiasedness.
    pub fn clamped(&self) -> Self {
        Self::new(self.values.mapv(|x| x.max(T::zero())))
    }
}

/// Rescales a summary report into per-slice estimates. No clamping.
pub fn reconstruct<T: Scalar>(
    report: &SummaryReport<T>,
    params: &BudgetParams<T>,
) -> Result<EstimateMatrix<T>> {
    params.validate(report.gamma)?;
    let layout = report.layout;
    if layout != params.layout(layout.num_slices) {
        return param_err("parameters do not match the summary report layout");
    }
    let scales = params.scales(report.gamma);
    if let Some(l) = scales.queries.iter().position(|&s| s == 0) {
        return param_err(format!(
            "budget fraction of query {} leaves no integer budget (⌊αΓ/C⌋ = 0)",
            l + 1
        ));
    }
    if scales.count == Some(0) || scales.per_contribution == 0 {
        return param_err("count budget rounds to zero");
    }
    let d = layout.num_queries;
    let m = layout.num_slices;
    let mut u = Array2::from_elem((d + 1, m), T::zero());
    for j in 0..m {
        let mut column_total = 0i64;
        for l in 1..=d {
            let w = report.get(KeyRow::Query(l), j);
            column_total += w;
            u[[l, j]] = T::from_int(w) * params.clip_thresholds[l - 1]
                / T::from_count(scales.queries[l - 1]);
        }
        u[[0, j]] = match scales.count {
            Some(count_scale) => {
                T::from_int(report.get(KeyRow::Count, j)) / T::from_count(count_scale)
            }
            None => {
                T::from_int(column_total + report.get(KeyRow::Remainder, j))
                    / T::from_count(scales.per_contribution)
            }
        };
    }
    Ok(EstimateMatrix::new(u))
}

/// ℓ1 distance between the noise-free summaries of two datasets under the
/// same encoding randomness. For adjacent datasets this is at most `Γ`.
pub fn sensitivity_check<T: Scalar>(
    data: &Dataset<T>,
    neighbor: &Dataset<T>,
    params: &BudgetParams<T>,
    gamma: u64,
    stream: &RngStream,
) -> Result<u64> {
    let cfg = PipelineConfig {
        gamma,
        epsilon: T::one(),
        noise: false,
    };
    let a = simulate(data, params, &cfg, stream)?;
    let b = simulate(neighbor, params, &cfg, stream)?;
    Ok(a.report.l1_distance(&b.report))
}

/// Exact mean and variance of every reconstructed estimate.
#[derive(Clone, Debug)]
pub struct Moments<T> {
    pub mean: Array2<T>,
    pub variance: Array2<T>,
}

impl<T: Scalar> Moments<T> {
    /// `V - E[U]` against the dataset's true aggregates.
    pub fn bias(&self, truth: &Array2<T>) -> Array2<T> {
        truth - &self.mean
    }
}

/// Mean and variance of the reconstructed estimates, computed in closed
/// form from the data. Includes the randomized-rounding variance exactly
/// (not the 1/4 bound) and the exact discrete Laplace variance.
pub fn expected_moments<T: Scalar>(
    data: &Dataset<T>,
    params: &BudgetParams<T>,
    cfg: &PipelineConfig<T>,
) -> Result<Moments<T>> {
    params.validate(cfg.gamma)?;
    let d = data.num_queries();
    let m = data.num_slices();
    let scales = params.scales(cfg.gamma);
    if scales.queries.iter().any(|&s| s == 0) || scales.count == Some(0) {
        return param_err("budget fraction leaves no integer budget");
    }
    let noise = cfg.noise_variance()?;
    let keep = params.kept_per_impression(cfg.gamma);
    let per = T::from_count(scales.per_contribution);

    let mut mean = Array2::from_elem((d + 1, m), T::zero());
    let mut rr_var = Array2::from_elem((d + 1, m), T::zero());
    for (_, records) in data.impressions() {
        for record in records.iter().take(keep) {
            let j = record.slice;
            mean[[0, j]] = mean[[0, j]] + T::one();
            match params.variant {
                Variant::Linf => {
                    for l in 0..d {
                        let c = params.clip_thresholds[l];
                        let omega =
                            T::from_count(scales.queries[l]) * clip(record.values[l], c) / c;
                        mean[[l + 1, j]] = mean[[l + 1, j]] + clip(record.values[l], c);
                        rr_var[[l + 1, j]] = rr_var[[l + 1, j]] + randomized_round_variance(omega);
                    }
                }
                Variant::L1 => {
                    let mut out = vec![0u64; d + 1];
                    Encoder::new(params, m, cfg.gamma)?.encode_l1_into(&record.values, &mut out);
                    for l in 0..d {
                        mean[[l + 1, j]] = mean[[l + 1, j]]
                            + T::from_count(out[l]) * params.clip_thresholds[l] / per;
                    }
                }
            }
        }
    }

    let mut variance = Array2::from_elem((d + 1, m), T::zero());
    let count_var = match scales.count {
        Some(s) => noise / (T::from_count(s) * T::from_count(s)),
        None => T::from_count(d as u64 + 1) * noise / (per * per),
    };
    for j in 0..m {
        variance[[0, j]] = count_var;
        for l in 1..=d {
            let factor = params.clip_thresholds[l - 1] / T::from_count(scales.queries[l - 1]);
            variance[[l, j]] = (rr_var[[l, j]] + noise) * factor * factor;
        }
    }
    Ok(Moments { mean, variance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Record;
    use proptest::prelude::*;

    const GAMMA: u64 = DEFAULT_CONTRIBUTION_BUDGET;

    fn worked_params() -> BudgetParams<f64> {
        BudgetParams::linf(2, vec![2.0, 30.0], vec![0.5, 0.5])
    }

    #[test]
    fn worked_example_encoding() {
        let params = worked_params();
        let record = Record::new(123, 0, 0, vec![3.0, 21.0]);
        let mut rng = RngStream::new(11);
        let n = 10_000;
        let mut high = 0;
        for _ in 0..n {
            let w = encode_linf(&record, &params, 2, GAMMA, &mut rng).unwrap();
            assert_eq!(w.weight(KeyRow::Query(1), 0), 16384);
            let w2 = w.weight(KeyRow::Query(2), 0);
            assert!(w2 == 11468 || w2 == 11469);
            high += usize::from(w2 == 11469);
            assert_eq!(w.weight(KeyRow::Remainder, 0), 32768 - 16384 - w2);
            assert_eq!(w.weight(KeyRow::Query(1), 1), 0);
            assert_eq!(w.norm(), 32768);
        }
        let freq = high as f64 / n as f64;
        assert!((freq - 0.8).abs() < 0.02, "{freq}");
    }

    #[test]
    fn zero_values_go_to_remainder() {
        let params = BudgetParams::linf(4, vec![1.0, 1.0, 1.0], vec![0.2, 0.3, 0.5]);
        let record = Record::new(0, 0, 0, vec![0.0, 0.0, 0.0]);
        let w = encode_linf(&record, &params, 1, GAMMA, &mut RngStream::new(0)).unwrap();
        assert_eq!(w.weights, vec![0, 0, 0, GAMMA / 4]);
    }

    #[test]
    fn full_clipping_is_deterministic() {
        let params = BudgetParams::linf(4, vec![1.0, 2.0], vec![0.5, 0.5]);
        let record = Record::new(0, 0, 0, vec![5.0, 2.0]);
        let w = encode_linf(&record, &params, 1, GAMMA, &mut RngStream::new(0)).unwrap();
        let share = GAMMA / 8;
        assert_eq!(w.weights, vec![share, share, GAMMA / 4 - 2 * share]);
    }

    #[test]
    fn l1_examples() {
        let p1 = BudgetParams::l1(1, vec![3.0]);
        let w = encode_l1(&Record::new(0, 0, 0, vec![3.0]), &p1, 1, GAMMA).unwrap();
        assert_eq!(w.weights, vec![65536, 0]);

        let p2 = BudgetParams::l1(1, vec![1.0, 1.0]);
        let w = encode_l1(&Record::new(0, 0, 0, vec![1.0, 1.0]), &p2, 1, GAMMA).unwrap();
        assert_eq!(w.weights, vec![32768, 32768, 0]);

        let w = encode_l1(&Record::new(0, 0, 0, vec![0.3, 0.2]), &p2, 1, GAMMA).unwrap();
        // u = (19660.8, 13107.2)
        assert_eq!(w.weights, vec![19660, 13107, 65536 - 19660 - 13107]);
        assert_eq!(w.weights[2], 32769);
    }

    #[test]
    fn variant_mismatch_is_error() {
        let r = Record::new(0, 0, 0, vec![1.0]);
        let linf = BudgetParams::linf(1, vec![1.0], vec![1.0]);
        let l1 = BudgetParams::l1(1, vec![1.0]);
        assert!(encode_l1(&r, &linf, 1, GAMMA).is_err());
        assert!(encode_linf(&r, &l1, 1, GAMMA, &mut RngStream::new(0)).is_err());
    }

    #[test]
    fn dedicated_count_layout() {
        let params = BudgetParams {
            count_mode: CountMode::Dedicated { fraction: 1.0 / 3.0 },
            ..BudgetParams::linf(1, vec![10.0, 10.0], vec![1.0 / 3.0, 1.0 / 3.0])
        };
        let w = encode_linf(
            &Record::new(0, 0, 1, vec![10.0, 5.0]),
            &params,
            2,
            GAMMA,
            &mut RngStream::new(0),
        )
        .unwrap();
        assert_eq!(w.weights.len(), 4);
        assert_eq!(w.weight(KeyRow::Count, 1), 21845);
        assert_eq!(w.weight(KeyRow::Query(1), 1), 21845);
        assert_eq!(w.norm(), GAMMA);
    }

    #[test]
    fn param_validation() {
        let ok = BudgetParams::linf(2, vec![1.0], vec![1.0]);
        assert!(ok.validate(GAMMA).is_ok());
        let bad = [
            BudgetParams::linf(0, vec![1.0], vec![1.0]),
            BudgetParams::linf(1, vec![0.0], vec![1.0]),
            BudgetParams::linf(1, vec![1.0], vec![0.9]),
            BudgetParams::linf(1, vec![1.0, 1.0], vec![1.0]),
            BudgetParams::linf(1, vec![1.0, 1.0], vec![1.5, -0.5]),
            BudgetParams::linf(GAMMA + 1, vec![1.0], vec![1.0]),
        ];
        for p in bad {
            assert!(p.validate(GAMMA).is_err(), "{p:?}");
        }
        let mut l1_dedicated = BudgetParams::l1(1, vec![1.0]);
        l1_dedicated.fractions = vec![0.5];
        l1_dedicated.count_mode = CountMode::Dedicated { fraction: 0.5 };
        assert!(l1_dedicated.validate(GAMMA).is_err());
    }

    #[test]
    fn bounding_examples() {
        let layout = KeyLayout {
            num_queries: 1,
            num_slices: 1,
            dedicated_count: false,
        };
        let w = |n: u64| HistogramContribution {
            layout,
            slice: 0,
            weights: vec![0, n],
        };
        assert_eq!(bound_contributions(&[w(32768), w(32768), w(32768)], GAMMA), vec![0, 1]);
        assert!(bound_contributions(&[], GAMMA).is_empty());
        assert_eq!(bound_contributions(&[w(GAMMA / 4)], GAMMA), vec![0]);
        // greedy keeps a later small one after skipping a large one
        assert_eq!(bound_norms([40_000, 30_000, 20_000], GAMMA), vec![0, 2]);
        assert_eq!(bound_norms([40_000, 30_000, 20_000, 5_000], GAMMA), vec![0, 2, 3]);
    }

    #[test]
    fn kept_per_impression_values() {
        assert_eq!(kept_per_impression(1, GAMMA), 1);
        assert_eq!(kept_per_impression(2, GAMMA), 2);
        assert_eq!(kept_per_impression(3, GAMMA), 3);
        assert_eq!(kept_per_impression(1000, GAMMA), 1008);
    }

    #[test]
    fn aggregate_without_noise_sums() {
        let layout = KeyLayout {
            num_queries: 1,
            num_slices: 2,
            dedicated_count: false,
        };
        let a = HistogramContribution {
            layout,
            slice: 1,
            weights: vec![5, 0],
        };
        let b = HistogramContribution {
            layout,
            slice: 1,
            weights: vec![7, 1],
        };
        let cfg = PipelineConfig::noiseless(1.0);
        let s = aggregate([&a, &b], layout, &cfg, &mut RngStream::new(0)).unwrap();
        assert_eq!(s.get(KeyRow::Query(1), 1), 12);
        assert_eq!(s.get(KeyRow::Remainder, 1), 1);
        assert_eq!(s.get(KeyRow::Query(1), 0), 0);
    }

    #[test]
    fn aggregate_high_epsilon_is_exact_and_empty_is_noise() {
        let layout = KeyLayout {
            num_queries: 2,
            num_slices: 50,
            dedicated_count: false,
        };
        // ε/Γ = 20
        let cfg = PipelineConfig::new(20.0 * GAMMA as f64);
        let s = aggregate([], layout, &cfg, &mut RngStream::new(1)).unwrap();
        assert!(s.weights.iter().all(|&w| w == 0));
        let cfg = PipelineConfig::new(1.0);
        let s = aggregate([], layout, &cfg, &mut RngStream::new(1)).unwrap();
        assert_eq!(s.weights.len(), 150);
        assert!(s.weights.iter().filter(|&&w| w != 0).count() > 140);
    }

    #[test]
    fn reconstruct_examples() {
        let params = worked_params();
        let layout = params.layout(2);
        let mut weights = vec![0i64; layout.num_keys()];
        // slice 0 column: q1, q2, ⊥
        weights[0] = 16384;
        weights[2] = 11469;
        weights[4] = 4915;
        let report = SummaryReport {
            layout,
            weights,
            epsilon: 1.0,
            gamma: GAMMA,
            params: None,
        };
        let u = reconstruct(&report, &params).unwrap();
        assert_eq!(u.get(0, 0), 1.0);
        assert_eq!(u.get(1, 0), 2.0);
        assert!((u.get(2, 0) - 11469.0 * 30.0 / 16384.0).abs() < 1e-12);
        assert_eq!(u.get(0, 1), 0.0);

        let p30 = BudgetParams::linf(2, vec![30.0], vec![1.0]);
        let report = SummaryReport {
            layout: p30.layout(1),
            weights: vec![32768, 0],
            epsilon: 1.0,
            gamma: GAMMA,
            params: None,
        };
        assert_eq!(reconstruct(&report, &p30).unwrap().get(1, 0), 30.0);

        let zero = SummaryReport {
            layout,
            weights: vec![0; layout.num_keys()],
            epsilon: 1.0,
            gamma: GAMMA,
            params: None,
        };
        assert!(reconstruct(&zero, &params)
            .unwrap()
            .values
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn reconstruct_rejects_empty_share() {
        let params = BudgetParams::linf(4, vec![1.0, 1.0], vec![1e-5, 1.0 - 1e-5]);
        let report = SummaryReport {
            layout: params.layout(1),
            weights: vec![0; 3],
            epsilon: 1.0,
            gamma: GAMMA,
            params: None,
        };
        assert!(matches!(reconstruct(&report, &params), Err(Error::Parameter(_))));
    }

    #[test]
    fn clamped_display() {
        let u = EstimateMatrix::new(ndarray::arr2(&[[-1.0, 2.0]]));
        assert_eq!(u.clamped().values, ndarray::arr2(&[[0.0, 2.0]]));
    }

    #[test]
    fn summary_json_round_trip() {
        let params = worked_params();
        let data = crate::dataset::Dataset::new(
            2,
            2,
            vec![
                Record::new(1, 0, 0, vec![3.0, 21.0]),
                Record::new(2, 0, 1, vec![1.0, 5.0]),
            ],
        )
        .unwrap();
        let sim = simulate(&data, &params, &PipelineConfig::new(1.0), &RngStream::new(3)).unwrap();
        let json = sim.report.to_json().unwrap();
        assert!(json.contains("\"bot,1\""));
        let back = SummaryReport::<f64>::from_json(&json).unwrap();
        assert_eq!(back, sim.report);

        let w = encode_linf(&data.records()[1], &params, 2, GAMMA, &mut RngStream::new(0)).unwrap();
        assert_eq!(HistogramContribution::from_json(&w.to_json()).unwrap(), w);
    }

    #[test]
    fn simulate_matches_stepwise_pipeline() {
        let params = worked_params();
        let records = vec![
            Record::new(123, 0, 0, vec![3.0, 21.0]),
            Record::new(123, 1, 0, vec![1.0, 5.0]),
            Record::new(456, 0, 0, vec![1.0, 99.0]),
            Record::new(123, 2, 0, vec![2.0, 23.0]),
            Record::new(101, 0, 1, vec![2.0, 50.0]),
            Record::new(789, 0, 1, vec![3.0, 15.0]),
            Record::new(101, 1, 1, vec![1.0, 5.0]),
        ];
        let data = crate::dataset::Dataset::new(2, 2, records).unwrap();
        let stream = RngStream::new(99);
        let cfg = PipelineConfig::noiseless(1.0);
        let sim = simulate(&data, &params, &cfg, &stream).unwrap();
        assert_eq!(sim.kept, vec![0, 1, 2, 4, 6, 5]);

        let encoder = Encoder::new(&params, 2, GAMMA).unwrap();
        let mut reports = Vec::new();
        for (id, recs) in data.impressions() {
            let mut rng = stream.substream(0).substream(id.0);
            let ws: Vec<_> = recs.iter().map(|r| encoder.encode(r, &mut rng)).collect();
            for i in bound_contributions(&ws, GAMMA) {
                reports.push(ws[i].clone());
            }
        }
        let manual = aggregate(&reports, encoder.layout(), &cfg, &mut RngStream::new(0)).unwrap();
        assert_eq!(manual.weights, sim.report.weights);
        let u = reconstruct(&sim.report, &params).unwrap();
        assert_eq!(u.get(0, 0), 3.0);
        assert_eq!(u.get(0, 1), 3.0);
    }

    #[test]
    fn sensitivity_small_cases() {
        let params = BudgetParams::linf(1, vec![10.0], vec![1.0]);
        let data = crate::dataset::Dataset::new(
            1,
            1,
            vec![Record::new(1, 0, 0, vec![3.0]), Record::new(2, 0, 0, vec![4.0])],
        )
        .unwrap();
        let stream = RngStream::new(5);
        let without = data.without_impression(ImpressionIdExt::id(2));
        assert_eq!(sensitivity_check(&data, &without, &params, GAMMA, &stream).unwrap(), GAMMA);
        let absent = data.without_impression(ImpressionIdExt::id(77));
        assert_eq!(sensitivity_check(&data, &absent, &params, GAMMA, &stream).unwrap(), 0);
    }

    struct ImpressionIdExt;
    impl ImpressionIdExt {
        fn id(n: u64) -> crate::dataset::ImpressionId {
            crate::dataset::ImpressionId(n)
        }
    }

    #[test]
    fn generic_over_f32() {
        let params = BudgetParams::<f32>::linf(2, vec![2.0, 30.0], vec![0.5, 0.5]);
        let record = Record::new(123, 0, 0, vec![3.0f32, 21.0]);
        let w = encode_linf(&record, &params, 1, GAMMA, &mut RngStream::new(1)).unwrap();
        assert_eq!(w.norm(), 32768);
    }

    proptest! {
        #[test]
        fn norm_law_holds(
            c in 1u64..300,
            raw in prop::collection::vec((0.0f64..50.0, 0.01f64..40.0, 0.0f64..1.0), 1..5),
            seed in any::<u64>(),
        ) {
            let total: f64 = raw.iter().map(|r| r.2).sum::<f64>().max(1e-9);
            let values: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let clips: Vec<f64> = raw.iter().map(|r| r.1).collect();
            let fractions: Vec<f64> = raw.iter().map(|r| if total > 1e-9 { r.2 / total } else { 1.0 / raw.len() as f64 }).collect();
            let record = Record::new(0, 0, 0, values);
            let linf = BudgetParams::linf(c, clips.clone(), fractions);
            let w = encode_linf(&record, &linf, 1, GAMMA, &mut RngStream::new(seed)).unwrap();
            prop_assert_eq!(w.norm(), GAMMA / c);
            let w = encode_l1(&record, &BudgetParams::l1(c, clips), 1, GAMMA).unwrap();
            prop_assert_eq!(w.norm(), GAMMA / c);
        }

        #[test]
        fn bounding_is_prefix_monotone(norms in prop::collection::vec(0u64..70_000, 0..12), cut in 0usize..12) {
            let full = bound_norms(norms.iter().copied(), GAMMA);
            let cut = cut.min(norms.len());
            let prefix = bound_norms(norms[..cut].iter().copied(), GAMMA);
            prop_assert_eq!(&full[..prefix.len()], &prefix[..]);
            prop_assert!(full[prefix.len()..].iter().all(|&i| i >= cut));
            let kept: u64 = full.iter().map(|&i| norms[i]).sum();
            prop_assert!(kept <= GAMMA);
        }
    }
}
