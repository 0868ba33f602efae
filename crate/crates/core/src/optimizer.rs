//! Choosing the count limit, clipping thresholds and budget fractions.
//!
//! The objective is the squared RMSRE_τ predicted from the training data,
//! with the bias of each slice split into a part from dropped conversions
//! (depends only on `C`) and a part from clipping the kept ones, and the
//! variance relaxed to its noise-only form (no rounding variance, no
//! floors). For fixed `C` the objective is convex in the thresholds and in
//! the fractions separately; the inner minimization alternates exact block
//! steps.

use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{quantile, Dataset};
use crate::error::{param_err, Error, Result};
use crate::pipeline::{kept_per_impression, BudgetParams, CountMode, Variant};
use crate::scalar::Scalar;

const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// Sorted values with suffix sums, answering `Σ_{v > c} v` and
/// `#{v > c}` by binary search.
#[derive(Clone, Debug, Default)]
struct SortedSums<T> {
    values: Vec<T>,
    /// `suffix[i] = Σ values[i..]`.
    suffix: Vec<T>,
}

impl<T: Scalar> SortedSums<T> {
    fn new(mut values: Vec<T>) -> Self {
        values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
        let mut suffix = vec![T::zero(); values.len() + 1];
        for i in (0..values.len()).rev() {
            suffix[i] = suffix[i + 1] + values[i];
        }
        Self { values, suffix }
    }

    fn above(&self, c: T) -> (T, usize) {
        if self.values.is_empty() {
            return (T::zero(), 0);
        }
        let i = self.values.partition_point(|&v| v <= c);
        (self.suffix[i], self.values.len() - i)
    }
}

/// Training-data summary the objective is evaluated on. Built once per
/// (dataset, τ, ε).
#[derive(Clone, Debug)]
pub struct ObjectiveContext<T> {
    d: usize,
    m: usize,
    epsilon: T,
    gamma: u64,
    tau: Vec<T>,
    truth: Array2<T>,
    pi: Array2<T>,
    pi_sums: Vec<T>,
    slices: Vec<usize>,
    values: Vec<Vec<T>>,
    /// Record indices per impression, arrival order; longest first.
    impressions: Vec<Vec<usize>>,
    /// Per `(l, j)`, all values of query `l` in slice `j`.
    all: Vec<SortedSums<T>>,
    /// Per query, all values over all slices.
    global: Vec<Vec<T>>,
    c_max: u64,
}

impl<T: Scalar> ObjectiveContext<T> {
    pub fn new(data: &Dataset<T>, tau: Vec<T>, epsilon: T, gamma: u64) -> Result<Self> {
        let d = data.num_queries();
        let m = data.num_slices();
        if tau.len() != d + 1 {
            return Err(Error::Shape {
                expected: format!("{} thresholds", d + 1),
                got: tau.len().to_string(),
            });
        }
        if let Some(t) = tau.iter().find(|t| !(t.is_finite() && **t > T::zero())) {
            return param_err(format!("tau must be positive, got {t}"));
        }
        if !(epsilon.is_finite() && epsilon > T::zero()) {
            return param_err(format!("epsilon must be positive, got {epsilon}"));
        }
        if gamma == 0 {
            return param_err("contribution budget must be positive");
        }
        let truth = data.true_aggregates();
        let pi = Array2::from_shape_fn((d + 1, m), |(l, j)| {
            let x = tau[l].max(truth[[l, j]]);
            T::one() / (x * x)
        });
        let pi_sums = (0..=d).map(|l| pi.row(l).iter().copied().sum()).collect();
        let slices = data.records().iter().map(|r| r.slice).collect();
        let values = data.records().iter().map(|r| r.values.clone()).collect();
        let mut impressions: Vec<Vec<usize>> = data
            .impressions()
            .map(|(_, recs)| recs.positions().to_vec())
            .collect();
        impressions.sort_by_key(|p| std::cmp::Reverse(p.len()));
        let mut buckets = vec![Vec::new(); d * m];
        let mut global = vec![Vec::with_capacity(data.len()); d];
        for r in data.records() {
            for (l, &v) in r.values.iter().enumerate() {
                buckets[l * m + r.slice].push(v);
                global[l].push(v);
            }
        }
        for g in &mut global {
            g.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
        }
        let c_max = impressions.first().map_or(0, |p| p.len() as u64);
        Ok(Self {
            d,
            m,
            epsilon,
            gamma,
            tau,
            truth,
            pi,
            pi_sums,
            slices,
            values,
            impressions,
            all: buckets.into_iter().map(SortedSums::new).collect(),
            global,
            c_max,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.d
    }

    pub fn num_slices(&self) -> usize {
        self.m
    }

    pub fn epsilon(&self) -> T {
        self.epsilon
    }

    pub fn gamma(&self) -> u64 {
        self.gamma
    }

    pub fn tau(&self) -> &[T] {
        &self.tau
    }

    pub fn truth(&self) -> &Array2<T> {
        &self.truth
    }

    /// `π_{l,j} = 1/max(τ_l, V_{l,j})²`.
    pub fn weights(&self) -> &Array2<T> {
        &self.pi
    }

    /// Largest number of conversions of one impression.
    pub fn max_conversions(&self) -> u64 {
        self.c_max
    }

    /// Dropped-conversion bias and dropped values for count limit `c`.
    pub fn bias_tables(&self, c: u64) -> BiasTables<T> {
        let keep = kept_per_impression(c, self.gamma);
        let (d, m) = (self.d, self.m);
        let mut dropped_count = vec![T::zero(); m];
        let mut dropped_sum = Array2::from_elem((d, m), T::zero());
        let mut buckets: Vec<Vec<T>> = vec![Vec::new(); d * m];
        let mut global = vec![Vec::new(); d];
        for positions in self.impressions.iter().take_while(|p| p.len() > keep) {
            for &i in &positions[keep..] {
                let j = self.slices[i];
                dropped_count[j] = dropped_count[j] + T::one();
                for (l, &v) in self.values[i].iter().enumerate() {
                    dropped_sum[[l, j]] = dropped_sum[[l, j]] + v;
                    buckets[l * m + j].push(v);
                    global[l].push(v);
                }
            }
        }
        for g in &mut global {
            g.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
        }
        BiasTables {
            count_limit: c,
            kept_per_impression: keep,
            dropped_count,
            dropped_sum,
            dropped: buckets.into_iter().map(SortedSums::new).collect(),
            dropped_global: global,
        }
    }

    /// `Σ_{kept v > c} v` and `#{kept v > c}` for query `l` (0-based) in
    /// slice `j`.
    fn kept_above(&self, t: &BiasTables<T>, l: usize, j: usize, c: T) -> (T, usize) {
        let (sa, na) = self.all[l * self.m + j].above(c);
        let (sd, nd) = t.dropped[l * self.m + j].above(c);
        (sa - sd, na - nd)
    }

    /// `A_{l,j}(c)`: value removed from kept conversions by clipping at
    /// `c`. `l` is 1-based.
    pub fn clip_bias(&self, t: &BiasTables<T>, l: usize, j: usize, c: T) -> T {
        let (s, n) = self.kept_above(t, l - 1, j, c);
        (s - T::from_count(n as u64) * c).max(T::zero())
    }

    /// Nearest-rank quantile of the kept values of query `l` (1-based).
    pub fn kept_quantile(&self, t: &BiasTables<T>, l: usize, q: f64) -> Option<T> {
        let all = &self.global[l - 1];
        let dropped = &t.dropped_global[l - 1];
        let n = all.len() - dropped.len();
        if n == 0 {
            return None;
        }
        let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
        // smallest value x with #{kept <= x} >= rank
        let kept_le = |i: usize| {
            let x = all[i];
            all.partition_point(|&v| v <= x) - dropped.partition_point(|&v| v <= x)
        };
        let (mut lo, mut hi) = (0, all.len() - 1);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if kept_le(mid) >= rank {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        Some(all[lo])
    }

    fn max_value(&self, l: usize) -> Option<T> {
        self.global[l - 1].last().copied()
    }

    fn has_kept(&self, t: &BiasTables<T>, l: usize) -> bool {
        self.global[l - 1].len() > t.dropped_global[l - 1].len()
    }

    /// `2C²/(α²ε²)`: relaxed variance per unit squared threshold.
    fn variance_factor(&self, c: u64, alpha: T) -> T {
        let c = T::from_count(c);
        T::lit(2.0) * c * c / (alpha * alpha * self.epsilon * self.epsilon)
    }

    /// Unnormalized objective contribution of query `l` (1-based).
    fn query_term(&self, t: &BiasTables<T>, l: usize, clip: T, alpha: T) -> T {
        let mut bias = T::zero();
        for j in 0..self.m {
            let b = t.dropped_sum[[l - 1, j]] + self.clip_bias(t, l, j, clip);
            bias = bias + self.pi[[l, j]] * b * b;
        }
        bias + self.pi_sums[l] * self.variance_factor(t.count_limit, alpha) * clip * clip
    }

    fn count_term(&self, t: &BiasTables<T>, mode: CountMode<T>) -> T {
        let c = T::from_count(t.count_limit);
        let eps2 = self.epsilon * self.epsilon;
        let variance = match mode {
            CountMode::Remainder => T::lit(2.0) * T::from_count(self.d as u64 + 1) * c * c / eps2,
            CountMode::Dedicated { fraction } => self.variance_factor(t.count_limit, fraction),
        };
        (0..self.m)
            .map(|j| {
                let b = t.dropped_count[j];
                self.pi[[0, j]] * (b * b + variance)
            })
            .sum()
    }

    fn normalizer(&self) -> T {
        T::from_count(((self.d + 1) * self.m) as u64)
    }

    /// Relaxed `R²` at count limit `t.count_limit`.
    pub fn evaluate(&self, t: &BiasTables<T>, clips: &[T], alphas: &[T], mode: CountMode<T>) -> T {
        let mut total = self.count_term(t, mode);
        for l in 1..=self.d {
            total = total + self.query_term(t, l, clips[l - 1], alphas[l - 1]);
        }
        total / self.normalizer()
    }

    /// Best threshold for query `l` (1-based) with everything else fixed.
    pub fn optimal_clip_in(&self, t: &BiasTables<T>, l: usize, alpha: T, tol: f64) -> T {
        // With nothing to clip, only the noise term depends on the
        // threshold and it shrinks toward zero.
        if !self.has_kept(t, l) {
            return T::epsilon();
        }
        let hi = self.max_value(l).unwrap_or(T::one());
        if hi <= T::zero() {
            return T::epsilon();
        }
        let tiny = hi * T::lit(1e-9);
        let f = |c: T| self.query_term(t, l, c, alpha);

        let (mut a, mut b) = (tiny, hi);
        let g = T::lit(GOLDEN);
        let mut x1 = b - g * (b - a);
        let mut x2 = a + g * (b - a);
        let (mut f1, mut f2) = (f(x1), f(x2));
        let tol = T::lit(tol);
        while b - a > tol * b.max(T::lit(1e-300)) {
            if f1 <= f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - g * (b - a);
                f1 = f(x1);
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + g * (b - a);
                f2 = f(x2);
            }
        }
        let golden = (a + b) / T::lit(2.0);

        // Exact minimizer on the quadratic piece around the golden point.
        let all = &self.global[l - 1];
        let idx = all.partition_point(|&v| v <= golden);
        let left = if idx == 0 { tiny } else { all[idx - 1].max(tiny) };
        let right = if idx == all.len() { hi } else { all[idx] };
        let mid = (left + right) / T::lit(2.0);
        let k = self.pi_sums[l] * self.variance_factor(t.count_limit, alpha);
        let (mut num, mut den) = (T::zero(), k);
        for j in 0..self.m {
            let (s, n) = self.kept_above(t, l - 1, j, mid);
            let n = T::from_count(n as u64);
            let p = self.pi[[l, j]];
            num = num + p * n * (t.dropped_sum[[l - 1, j]] + s);
            den = den + p * n * n;
        }
        let piece = if den > T::zero() {
            (num / den).max(left).min(right)
        } else {
            left
        };

        let mut best = golden;
        let mut best_f = f(golden);
        for c in [piece, left, right] {
            let c = c.max(tiny);
            let fc = f(c);
            if fc < best_f {
                best = c;
                best_f = fc;
            }
        }
        best
    }
}

/// Per-`C` tables: dropped-conversion bias and the dropped values needed to
/// evaluate the clipping bias of the kept ones.
#[derive(Clone, Debug)]
pub struct BiasTables<T> {
    pub count_limit: u64,
    pub kept_per_impression: usize,
    /// `B_{0,j}`: dropped conversions per slice.
    pub dropped_count: Vec<T>,
    /// `B_{l,j}`: dropped value per query and slice, `d x m`.
    pub dropped_sum: Array2<T>,
    dropped: Vec<SortedSums<T>>,
    dropped_global: Vec<Vec<T>>,
}

impl<T: Scalar> BiasTables<T> {
    pub fn kept_count(&self, ctx: &ObjectiveContext<T>, j: usize) -> usize {
        ctx.truth[[0, j]].to_usize().unwrap_or(0) - self.dropped_count[j].to_usize().unwrap_or(0)
    }
}

/// Relaxed `R²` of a parameter set on the training context.
pub fn objective<T: Scalar>(ctx: &ObjectiveContext<T>, params: &BudgetParams<T>) -> Result<T> {
    params.validate(ctx.gamma)?;
    if params.num_queries() != ctx.d {
        return param_err("parameter dimension does not match the data");
    }
    if params.variant != Variant::Linf {
        return param_err("the relaxed objective applies to linf parameters; use l1_objective");
    }
    if params.fractions.iter().any(|&a| a <= T::zero()) {
        return Ok(T::infinity());
    }
    let t = ctx.bias_tables(params.count_limit);
    Ok(ctx.evaluate(&t, &params.clip_thresholds, &params.fractions, params.count_mode))
}

/// Fraction floor keeping every integer share `⌊αΓ/C⌋` at least one.
pub fn alpha_floor(count_limit: u64, gamma: u64) -> f64 {
    (1e-4f64).max(count_limit as f64 / gamma as f64 * (1.0 + 1e-9))
}

/// Minimizes `Σ k_l/α_l²` over `α ≥ floor`, `Σα = budget`.
pub fn water_fill(k: &[f64], budget: f64, floor: f64) -> Vec<f64> {
    let d = k.len();
    if d == 0 {
        return Vec::new();
    }
    if k.iter().all(|&x| x <= 0.0) || floor * d as f64 >= budget {
        return vec![budget / d as f64; d];
    }
    let roots: Vec<f64> = k.iter().map(|&x| x.max(0.0).cbrt()).collect();
    let mut fixed = vec![false; d];
    loop {
        let n_fixed = fixed.iter().filter(|&&f| f).count();
        let free_budget = budget - floor * n_fixed as f64;
        let s: f64 = (0..d).filter(|&i| !fixed[i]).map(|i| roots[i]).sum();
        let alpha: Vec<f64> = (0..d)
            .map(|i| {
                if fixed[i] {
                    floor
                } else if s > 0.0 {
                    free_budget * roots[i] / s
                } else {
                    free_budget / (d - n_fixed) as f64
                }
            })
            .collect();
        let mut changed = false;
        for i in 0..d {
            if !fixed[i] && alpha[i] < floor {
                fixed[i] = true;
                changed = true;
            }
        }
        if !changed {
            return alpha;
        }
    }
}

/// Fractions minimizing the relaxed objective for fixed `C` and thresholds
/// (remainder count mode, so the fractions sum to one).
pub fn optimal_alpha<T: Scalar>(ctx: &ObjectiveContext<T>, count_limit: u64, clips: &[T]) -> Vec<T> {
    let k: Vec<f64> = clips
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            (ctx.pi_sums[i + 1] * ctx.variance_factor(count_limit, T::one()) * c * c).as_f64()
        })
        .collect();
    water_fill(&k, 1.0, alpha_floor(count_limit, ctx.gamma))
        .into_iter()
        .map(T::lit)
        .collect()
}

/// Threshold of query `l` (1-based) minimizing the relaxed objective for
/// fixed `C` and fractions.
pub fn optimal_clip<T: Scalar>(ctx: &ObjectiveContext<T>, count_limit: u64, alphas: &[T], l: usize) -> T {
    let t = ctx.bias_tables(count_limit);
    ctx.optimal_clip_in(&t, l, alphas[l - 1], OptimizerSettings::default().golden_tolerance)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    /// Largest count limit tried.
    pub c_cap: u64,
    /// Geometric ratio between tried count limits; `None` tries all.
    pub c_stride: Option<f64>,
    /// Quantile of kept values the thresholds start from.
    pub init_quantile: f64,
    pub relative_tolerance: f64,
    pub max_rounds: usize,
    pub golden_tolerance: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            c_cap: 1024,
            c_stride: None,
            init_quantile: 0.95,
            relative_tolerance: 1e-8,
            max_rounds: 50,
            golden_tolerance: 1e-6,
        }
    }
}

impl OptimizerSettings {
    pub fn candidates(&self, c_max: u64) -> Vec<u64> {
        let top = c_max.min(self.c_cap).max(1);
        match self.c_stride {
            Some(r) if r > 1.0 => {
                let mut out = vec![1];
                let mut c = 1u64;
                while c < top {
                    c = ((c as f64 * r).ceil() as u64).max(c + 1).min(top);
                    out.push(c);
                }
                out
            }
            _ => (1..=top).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct CandidateTrace<T> {
    pub count_limit: u64,
    pub clip_thresholds: Vec<T>,
    pub fractions: Vec<T>,
    /// Relaxed `R²` after initialization and after each round.
    pub trace: Vec<T>,
    pub rounds: usize,
}

impl<T: Scalar> CandidateTrace<T> {
    pub fn objective(&self) -> T {
        *self.trace.last().expect("trace starts with the initial value")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct OptimizerReport<T> {
    pub params: BudgetParams<T>,
    /// `R` at `params`, recomputed from scratch.
    pub objective: T,
    pub objective_squared: T,
    pub candidates: Vec<CandidateTrace<T>>,
    pub iterations: usize,
    pub wall_time_secs: f64,
}

impl<T: Scalar> OptimizerReport<T> {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn optimize_at<T: Scalar>(
    ctx: &ObjectiveContext<T>,
    c: u64,
    settings: &OptimizerSettings,
) -> CandidateTrace<T> {
    let t = ctx.bias_tables(c);
    let d = ctx.d;
    let mut clips: Vec<T> = (1..=d)
        .map(|l| {
            ctx.kept_quantile(&t, l, settings.init_quantile)
                .filter(|&x| x > T::zero())
                .or_else(|| ctx.max_value(l).filter(|&x| x > T::zero()))
                .unwrap_or(T::one())
        })
        .collect();
    let mut alphas = vec![T::one() / T::from_count(d.max(1) as u64); d];
    let mode = CountMode::Remainder;
    let mut current = ctx.evaluate(&t, &clips, &alphas, mode);
    let mut trace = vec![current];
    let mut rounds = 0;
    while rounds < settings.max_rounds {
        rounds += 1;
        let before = current;
        for l in 1..=d {
            let candidate = ctx.optimal_clip_in(&t, l, alphas[l - 1], settings.golden_tolerance);
            let old = clips[l - 1];
            clips[l - 1] = candidate;
            let value = ctx.evaluate(&t, &clips, &alphas, mode);
            if value <= current {
                current = value;
            } else {
                clips[l - 1] = old;
            }
        }
        let candidate = optimal_alpha(ctx, c, &clips);
        let value = ctx.evaluate(&t, &clips, &candidate, mode);
        if value <= current {
            current = value;
            alphas = candidate;
        }
        trace.push(current);
        let improvement = (before - current).as_f64();
        if improvement <= settings.relative_tolerance * before.as_f64().abs() {
            break;
        }
    }
    CandidateTrace {
        count_limit: c,
        clip_thresholds: clips,
        fractions: alphas,
        trace,
        rounds,
    }
}

/// Searches all candidate count limits and alternates exact block steps
/// for each; returns the best ℓ∞ parameters (remainder count mode).
pub fn optimize<T: Scalar>(ctx: &ObjectiveContext<T>, settings: &OptimizerSettings) -> Result<OptimizerReport<T>> {
    if ctx.values.is_empty() {
        return param_err("cannot optimize on empty training data");
    }
    let start = Instant::now();
    let candidates: Vec<CandidateTrace<T>> = settings
        .candidates(ctx.c_max)
        .into_par_iter()
        .map(|c| optimize_at(ctx, c, settings))
        .collect();
    let mut best = 0;
    for (i, cand) in candidates.iter().enumerate() {
        if cand.objective() < candidates[best].objective() {
            best = i;
        }
    }
    let chosen = &candidates[best];
    let params = BudgetParams::linf(
        chosen.count_limit,
        chosen.clip_thresholds.clone(),
        chosen.fractions.clone(),
    );
    let r2 = objective(ctx, &params)?;
    if !r2.is_finite() {
        return Err(Error::Numerical(format!("objective is not finite: {r2}")));
    }
    Ok(OptimizerReport {
        params,
        objective: r2.sqrt(),
        objective_squared: r2,
        iterations: candidates.iter().map(|c| c.rounds).sum(),
        candidates,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Relaxed `R²` for ℓ1 parameters: per-record expected contribution
/// without floors, noise-only variance with every query at full scale.
pub fn l1_objective<T: Scalar>(ctx: &ObjectiveContext<T>, params: &BudgetParams<T>) -> Result<T> {
    params.validate(ctx.gamma)?;
    if params.variant != Variant::L1 || params.num_queries() != ctx.d {
        return param_err("l1_objective requires l1 parameters matching the data");
    }
    let kept = kept_records(ctx, params.count_limit);
    Ok(l1_eval(ctx, &kept, params.count_limit, &params.clip_thresholds))
}

fn kept_records<T: Scalar>(ctx: &ObjectiveContext<T>, c: u64) -> Vec<usize> {
    let keep = kept_per_impression(c, ctx.gamma);
    ctx.impressions
        .iter()
        .flat_map(|p| p.iter().take(keep).copied())
        .collect()
}

fn l1_eval<T: Scalar>(ctx: &ObjectiveContext<T>, kept: &[usize], c: u64, clips: &[T]) -> T {
    let (d, m) = (ctx.d, ctx.m);
    let mut mean = Array2::from_elem((d + 1, m), T::zero());
    for &i in kept {
        let j = ctx.slices[i];
        mean[[0, j]] = mean[[0, j]] + T::one();
        let v = &ctx.values[i];
        let norm: T = v.iter().zip(clips).map(|(&x, &cl)| x / cl).sum();
        let s = norm.max(T::one());
        for l in 0..d {
            mean[[l + 1, j]] = mean[[l + 1, j]] + v[l] / s;
        }
    }
    let ct = T::from_count(c);
    let eps2 = ctx.epsilon * ctx.epsilon;
    let mut total = T::zero();
    for j in 0..m {
        let b0 = ctx.truth[[0, j]] - mean[[0, j]];
        total = total
            + ctx.pi[[0, j]] * (b0 * b0 + T::lit(2.0) * T::from_count(d as u64 + 1) * ct * ct / eps2);
        for l in 1..=d {
            let b = ctx.truth[[l, j]] - mean[[l, j]];
            let cl = clips[l - 1];
            total = total + ctx.pi[[l, j]] * (b * b + T::lit(2.0) * ct * ct * cl * cl / eps2);
        }
    }
    total / ctx.normalizer()
}

/// ℓ1 parameters by coordinate-wise golden-section search over the
/// thresholds at the count limit of `start`, beginning from its
/// thresholds.
pub fn optimize_l1<T: Scalar>(
    ctx: &ObjectiveContext<T>,
    start: &BudgetParams<T>,
    settings: &OptimizerSettings,
) -> Result<OptimizerReport<T>> {
    let begin = Instant::now();
    let c = start.count_limit;
    let kept = kept_records(ctx, c);
    let mut clips = start.clip_thresholds.clone();
    let mut current = l1_eval(ctx, &kept, c, &clips);
    let mut trace = vec![current];
    let mut rounds = 0;
    // each coordinate search costs a pass over the data per evaluation
    let max_rounds = settings.max_rounds.min(10);
    while rounds < max_rounds {
        rounds += 1;
        let before = current;
        for l in 0..ctx.d {
            let hi = ctx.max_value(l + 1).unwrap_or(T::one()).max(clips[l]);
            let mut probe = clips.clone();
            let mut f = |x: T| {
                probe[l] = x;
                l1_eval(ctx, &kept, c, &probe)
            };
            let x = golden_min(&mut f, hi * T::lit(1e-9), hi, settings.golden_tolerance);
            let fx = f(x);
            if fx <= current {
                current = fx;
                clips[l] = x;
            }
        }
        trace.push(current);
        if (before - current).as_f64() <= settings.relative_tolerance * before.as_f64().abs() {
            break;
        }
    }
    let params = BudgetParams::l1(c, clips.clone());
    let r2 = l1_objective(ctx, &params)?;
    if !r2.is_finite() {
        return Err(Error::Numerical(format!("objective is not finite: {r2}")));
    }
    Ok(OptimizerReport {
        objective: r2.sqrt(),
        objective_squared: r2,
        candidates: vec![CandidateTrace {
            count_limit: c,
            clip_thresholds: clips,
            fractions: params.fractions.clone(),
            trace,
            rounds,
        }],
        params,
        iterations: rounds,
        wall_time_secs: begin.elapsed().as_secs_f64(),
    })
}

fn golden_min<T: Scalar>(f: &mut impl FnMut(T) -> T, lo: T, hi: T, tol: f64) -> T {
    let g = T::lit(GOLDEN);
    let (mut a, mut b) = (lo, hi);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while b - a > T::lit(tol) * b {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        }
    }
    (a + b) / T::lit(2.0)
}

/// How the baseline picks its count limit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineCountLimit {
    /// Quantile of conversions per impression (synthetic data).
    Quantile,
    /// Always one (real data).
    One,
}

/// Equal budget for every query including a dedicated count key, and
/// thresholds at a fixed quantile of the training values.
pub fn baseline_params<T: Scalar>(
    data: &Dataset<T>,
    q: f64,
    count_limit: BaselineCountLimit,
) -> Result<BudgetParams<T>> {
    if !(q > 0.0 && q <= 1.0) {
        return param_err(format!("quantile must be in (0, 1], got {q}"));
    }
    if data.is_empty() {
        return param_err("baseline needs nonempty training data");
    }
    let d = data.num_queries();
    let share = T::one() / T::from_count(d as u64 + 1);
    let clips = (1..=d)
        .map(|l| {
            let mut values: Vec<T> = data.query_values(l).collect();
            let x = quantile(&mut values, q);
            if x > T::zero() {
                x
            } else {
                // all mass at zero below the quantile: any positive threshold
                values
                    .iter()
                    .copied()
                    .filter(|&v| v > T::zero())
                    .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.min(v))))
                    .unwrap_or(T::one())
            }
        })
        .collect();
    let c = match count_limit {
        BaselineCountLimit::One => 1,
        BaselineCountLimit::Quantile => {
            let mut counts: Vec<T> = data
                .impressions()
                .map(|(_, r)| T::from_count(r.len() as u64))
                .collect();
            quantile(&mut counts, q).to_u64().unwrap_or(1).max(1)
        }
    };
    Ok(BudgetParams {
        count_limit: c,
        clip_thresholds: clips,
        fractions: vec![share; d],
        variant: Variant::Linf,
        count_mode: CountMode::Dedicated { fraction: share },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Record;
    use crate::DEFAULT_CONTRIBUTION_BUDGET as GAMMA;

    fn one_record(v: f64) -> Dataset<f64> {
        Dataset::new(1, 1, vec![Record::new(0, 0, 0, vec![v])]).unwrap()
    }

    #[test]
    fn single_record_hand_value() {
        let (v, eps, c1) = (7.0, 2.0, 9.0);
        let ctx = ObjectiveContext::new(&one_record(v), vec![1.0, 1.0], eps, GAMMA).unwrap();
        let params = BudgetParams::linf(1, vec![c1], vec![1.0]);
        let r2 = objective(&ctx, &params).unwrap();
        let pi0 = 1.0;
        let pi1 = 1.0 / (v * v);
        let expected = 0.5 * (pi0 * 2.0 * 2.0 / (eps * eps) + pi1 * 2.0 * c1 * c1 / (eps * eps));
        assert!((r2 - expected).abs() < 1e-15);
    }

    #[test]
    fn full_clipping_limit() {
        let ctx = ObjectiveContext::new(&one_record(10.0), vec![1.0, 1.0], 1.0, GAMMA).unwrap();
        let t = ctx.bias_tables(1);
        let tiny = 1e-12;
        let term = ctx.query_term(&t, 1, tiny, 1.0);
        assert!((term - 1.0).abs() < 1e-9, "{term}");
    }

    #[test]
    fn water_fill_examples() {
        let a = water_fill(&[1.0, 1.0], 1.0, 1e-4);
        assert!((a[0] - 0.5).abs() < 1e-15 && (a[1] - 0.5).abs() < 1e-15);
        let a = water_fill(&[8.0, 1.0], 1.0, 1e-4);
        assert!((a[0] - 2.0 / 3.0).abs() < 1e-12 && (a[1] - 1.0 / 3.0).abs() < 1e-12);
        let a = water_fill(&[0.0, 0.0, 0.0], 1.0, 1e-4);
        assert!(a.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let a = water_fill(&[1.0, 0.0], 1.0, 1e-4);
        assert_eq!(a[1], 1e-4);
        assert!((a[0] - (1.0 - 1e-4)).abs() < 1e-15);
        let a = water_fill(&[1.0, 1e-18, 1e-18], 1.0, 0.01);
        assert_eq!(&a[1..], &[0.01, 0.01]);
    }

    #[test]
    fn clip_for_equal_values() {
        let records = (0..20).map(|i| Record::new(i, 0, 0, vec![4.0])).collect();
        let data = Dataset::new(1, 1, records).unwrap();
        let ctx = ObjectiveContext::new(&data, vec![1.0, 1.0], 1.0, GAMMA).unwrap();
        let c: f64 = optimal_clip(&ctx, 1, &[1.0], 1);
        // π[(20(4 - c))² + 2c²] is minimized at c = 3200/804, just below
        // the common value
        assert!((c - 3200.0 / 804.0).abs() < 1e-9, "{c}");
        let ctx = ObjectiveContext::new(&data, vec![1.0, 1.0], 1e6, GAMMA).unwrap();
        let c: f64 = optimal_clip(&ctx, 1, &[1.0], 1);
        assert!((c - 4.0).abs() < 1e-6, "{c}");
    }

    #[test]
    fn clip_tends_to_max_with_large_epsilon() {
        let records = (0..30)
            .map(|i| Record::new(i, 0, 0, vec![1.0 + i as f64]))
            .collect();
        let data = Dataset::new(1, 1, records).unwrap();
        let ctx = ObjectiveContext::new(&data, vec![1.0, 1.0], 1e9, GAMMA).unwrap();
        let c = optimal_clip(&ctx, 1, &[1.0], 1);
        assert!((c - 30.0).abs() < 1e-6, "{c}");
    }

    #[test]
    fn no_kept_values_gives_smallest_clip() {
        let data = Dataset::<f64>::new(1, 2, vec![]).unwrap();
        let ctx = ObjectiveContext::new(&data, vec![1.0, 1.0, 1.0], 1.0, GAMMA).unwrap();
        assert_eq!(optimal_clip(&ctx, 1, &[0.5, 0.5], 2), f64::EPSILON);
        assert!(optimize(&ctx, &OptimizerSettings::default()).is_err());
    }

    #[test]
    fn kept_quantile_and_tables() {
        let mut records = Vec::new();
        for k in 0..5u64 {
            records.push(Record::new(1, k, 0, vec![(k + 1) as f64]));
        }
        records.push(Record::new(2, 0, 1, vec![10.0]));
        let data = Dataset::new(2, 1, records).unwrap();
        let ctx = ObjectiveContext::new(&data, vec![1.0, 1.0], 1.0, GAMMA).unwrap();
        assert_eq!(ctx.max_conversions(), 5);
        let t = ctx.bias_tables(2);
        assert_eq!(t.dropped_count, vec![3.0, 0.0]);
        assert_eq!(t.dropped_sum[[0, 0]], 12.0);
        assert_eq!(t.kept_count(&ctx, 0), 2);
        // kept: 1, 2, 10
        assert_eq!(ctx.kept_quantile(&t, 1, 0.5), Some(2.0));
        assert_eq!(ctx.kept_quantile(&t, 1, 1.0), Some(10.0));
        assert_eq!(ctx.clip_bias(&t, 1, 0, 1.5), 0.5);
        assert_eq!(ctx.clip_bias(&t, 1, 0, 0.0), 3.0);
        assert_eq!(ctx.clip_bias(&t, 1, 0, 100.0), 0.0);
    }

    #[test]
    fn single_conversion_impressions_choose_one() {
        let records = (0..10)
            .map(|i| Record::new(i, 0, (i % 2) as usize, vec![1.0 + i as f64]))
            .collect();
        let data = Dataset::new(2, 1, records).unwrap();
        let ctx = ObjectiveContext::new(&data, vec![1.0, 1.0], 1.0, GAMMA).unwrap();
        let report = optimize(&ctx, &OptimizerSettings::default()).unwrap();
        assert_eq!(report.params.count_limit, 1);
        let again = objective(&ctx, &report.params).unwrap();
        assert_eq!(again, report.objective_squared);
        for cand in &report.candidates {
            assert!(cand.trace.windows(2).all(|w| w[1] <= w[0]));
        }
        let back = OptimizerReport::<f64>::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(back.params, report.params);
    }

    #[test]
    fn candidates_with_stride() {
        let s = OptimizerSettings {
            c_stride: Some(2.0),
            ..OptimizerSettings::default()
        };
        assert_eq!(s.candidates(20), vec![1, 2, 4, 8, 16, 20]);
        assert_eq!(OptimizerSettings::default().candidates(3), vec![1, 2, 3]);
        assert_eq!(OptimizerSettings::default().candidates(5000).len(), 1024);
    }

    #[test]
    fn baseline_examples() {
        let records = (0..100)
            .map(|i| Record::new(i, 0, 0, vec![(i + 1) as f64, 1.0]))
            .collect();
        let data = Dataset::new(1, 2, records).unwrap();
        let p = baseline_params(&data, 0.95, BaselineCountLimit::Quantile).unwrap();
        assert_eq!(p.clip_thresholds[0], 95.0);
        assert_eq!(p.fractions, vec![1.0 / 3.0; 2]);
        assert_eq!(p.count_mode, CountMode::Dedicated { fraction: 1.0 / 3.0 });
        assert_eq!(p.count_limit, 1);
        assert!(p.validate(GAMMA).is_ok());
        let p = baseline_params(&data, 0.95, BaselineCountLimit::One).unwrap();
        assert_eq!(p.count_limit, 1);
        assert!(baseline_params(&Dataset::<f64>::new(1, 1, vec![]).unwrap(), 0.95, BaselineCountLimit::One).is_err());
        assert!(baseline_params(&data, 0.0, BaselineCountLimit::One).is_err());
    }

    #[test]
    fn l1_optimizer_does_not_worsen_its_start() {
        let records = (0..40)
            .map(|i| Record::new(i / 2, i % 2, (i % 3) as usize, vec![(i % 7) as f64 + 0.5, (i % 5) as f64]))
            .collect();
        let data = Dataset::new(3, 2, records).unwrap();
        let ctx = ObjectiveContext::new(&data, vec![1.0, 1.0, 1.0], 4.0, GAMMA).unwrap();
        let start = BudgetParams::l1(2, vec![3.0, 3.0]);
        let before = l1_objective(&ctx, &start).unwrap();
        let report = optimize_l1(&ctx, &start, &OptimizerSettings::default()).unwrap();
        assert!(report.objective_squared <= before);
        assert_eq!(report.params.variant, Variant::L1);
    }
}
