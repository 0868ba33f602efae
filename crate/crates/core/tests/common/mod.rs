#![allow(dead_code)]

use std::collections::BTreeMap;

use ara_budget::{Dataset64, Record64, RngStream, DEFAULT_CONTRIBUTION_BUDGET};
use rand::Rng;

pub const GAMMA: u64 = DEFAULT_CONTRIBUTION_BUDGET;

/// Random small dataset: up to `max_records` records over `m` slices and
/// `d` queries, a few conversions per impression, values with a heavy-ish
/// tail and some zeros.
pub fn random_dataset(rng: &mut RngStream, m: usize, d: usize, max_records: usize) -> Dataset64 {
    let n = rng.random_range(1..=max_records);
    let mut records = Vec::with_capacity(n);
    let mut next_arrival: BTreeMap<u64, u64> = BTreeMap::new();
    let impressions = rng.random_range(1..=n as u64);
    for _ in 0..n {
        let id = rng.random_range(0..impressions);
        let arrival = next_arrival.entry(id).or_insert(0);
        let values = (0..d)
            .map(|_| {
                if rng.random_bool(0.1) {
                    0.0
                } else {
                    (rng.random::<f64>() * 3.0).exp().round() / 4.0
                }
            })
            .collect();
        records.push(Record64::new(id, *arrival, rng.random_range(0..m), values));
        *arrival += 1;
    }
    Dataset64::new(m, d, records).unwrap()
}

/// Random point of the probability simplex with no coordinate below `floor`.
pub fn random_simplex(rng: &mut RngStream, d: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..d).map(|_| rng.random::<f64>() + 0.05).collect();
    let s: f64 = raw.iter().sum();
    let free = 1.0 - floor * d as f64;
    raw.iter().map(|x| floor + free * x / s).collect()
}

/// Kept records per impression: the first `⌊Γ/⌊Γ/C⌋⌋` by arrival.
pub fn kept_records(data: &Dataset64, c: u64) -> Vec<&Record64> {
    let per = GAMMA / c;
    let keep = (GAMMA / per) as usize;
    let mut by_impression: BTreeMap<u64, Vec<&Record64>> = BTreeMap::new();
    for r in data.records() {
        by_impression.entry(r.impression.0).or_default().push(r);
    }
    let mut kept = Vec::new();
    for (_, mut recs) in by_impression {
        recs.sort_by_key(|r| r.arrival_index);
        kept.extend(recs.into_iter().take(keep));
    }
    kept
}

/// Relaxed squared objective by direct enumeration over records.
pub fn brute_force_objective(
    data: &Dataset64,
    tau: &[f64],
    eps: f64,
    c: u64,
    clips: &[f64],
    alphas: &[f64],
) -> f64 {
    let (m, d) = (data.num_slices(), data.num_queries());
    let mut truth = vec![vec![0.0; m]; d + 1];
    for r in data.records() {
        truth[0][r.slice] += 1.0;
        for l in 0..d {
            truth[l + 1][r.slice] += r.values[l];
        }
    }
    let mut mean = vec![vec![0.0; m]; d + 1];
    for r in kept_records(data, c) {
        mean[0][r.slice] += 1.0;
        for l in 0..d {
            mean[l + 1][r.slice] += r.values[l].min(clips[l]);
        }
    }
    let cf = c as f64;
    let mut total = 0.0;
    for j in 0..m {
        for l in 0..=d {
            let bias = truth[l][j] - mean[l][j];
            let var = if l == 0 {
                2.0 * (d as f64 + 1.0) * cf * cf / (eps * eps)
            } else {
                2.0 * cf * cf * clips[l - 1] * clips[l - 1] / (alphas[l - 1] * alphas[l - 1] * eps * eps)
            };
            let denom = tau[l].max(truth[l][j]);
            total += (bias * bias + var) / (denom * denom);
        }
    }
    total / ((d + 1) * m) as f64
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
