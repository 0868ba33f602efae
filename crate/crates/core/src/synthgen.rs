//! Synthetic conversion logs: a power-law number of impressions per slice,
//! a Poisson number of conversions per impression, log-normal conversion
//! values and a uniform conversion type.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, IngestSpec, Record};
use crate::error::{param_err, Result};
use crate::mechanisms::RngStream;
use crate::scalar::Scalar;

/// Supports up to this size are sampled by exact CDF inversion.
pub const EXACT_SUPPORT_LIMIT: u64 = 1_000_000;

/// Discrete power law on `[k_min, k_max]` with pmf ∝ `k^{-b}`.
#[derive(Clone, Debug)]
pub struct PowerLaw {
    b: f64,
    k_min: u64,
    k_max: u64,
    /// Cumulative unnormalized mass, present for small supports.
    cdf: Option<Vec<f64>>,
    /// Rejection bound on `k^{-b} / ∫_{k-1/2}^{k+1/2} x^{-b} dx`.
    bound: f64,
}

impl PowerLaw {
    pub fn new(b: f64, k_min: u64, k_max: u64) -> Result<Self> {
        Self::with_method(b, k_min, k_max, k_max - k_min.min(k_max) < EXACT_SUPPORT_LIMIT)
    }

    /// Always uses the continuous approximation with rejection.
    pub fn approximate(b: f64, k_min: u64, k_max: u64) -> Result<Self> {
        Self::with_method(b, k_min, k_max, false)
    }

    fn with_method(b: f64, k_min: u64, k_max: u64, exact: bool) -> Result<Self> {
        if !b.is_finite() {
            return param_err(format!("power-law exponent must be finite, got {b}"));
        }
        if k_min < 1 || k_max < k_min {
            return param_err(format!("need 1 <= k_min <= k_max, got [{k_min}, {k_max}]"));
        }
        let cdf = exact.then(|| {
            let mut acc = 0.0;
            (k_min..=k_max)
                .map(|k| {
                    acc += (k as f64).powf(-b);
                    acc
                })
                .collect()
        });
        let ratio = |k: u64| {
            let k = k as f64;
            k.powf(-b) / segment_mass(b, k - 0.5, k + 0.5)
        };
        let bound = 1f64.max(ratio(k_min)).max(ratio(k_max)) * (1.0 + 1e-12);
        Ok(Self {
            b,
            k_min,
            k_max,
            cdf,
            bound,
        })
    }

    pub fn pmf(&self, k: u64) -> f64 {
        if k < self.k_min || k > self.k_max {
            return 0.0;
        }
        let total = match &self.cdf {
            Some(c) => *c.last().expect("nonempty support"),
            None => (self.k_min..=self.k_max).map(|i| (i as f64).powf(-self.b)).sum(),
        };
        (k as f64).powf(-self.b) / total
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        if self.k_min == self.k_max {
            return self.k_min;
        }
        if let Some(cdf) = &self.cdf {
            let u = rng.random::<f64>() * cdf.last().expect("nonempty support");
            let i = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            return self.k_min + i as u64;
        }
        let lo = self.k_min as f64 - 0.5;
        let hi = self.k_max as f64 + 0.5;
        loop {
            let u: f64 = rng.random();
            let x = continuous_inverse(self.b, lo, hi, u);
            let k = (x.round() as u64).clamp(self.k_min, self.k_max);
            let kf = k as f64;
            let accept = kf.powf(-self.b) / segment_mass(self.b, kf - 0.5, kf + 0.5) / self.bound;
            if rng.random::<f64>() < accept {
                return k;
            }
        }
    }
}

/// `∫_a^c x^{-b} dx`.
fn segment_mass(b: f64, a: f64, c: f64) -> f64 {
    if (b - 1.0).abs() < 1e-12 {
        (c / a).ln()
    } else {
        (c.powf(1.0 - b) - a.powf(1.0 - b)) / (1.0 - b)
    }
}

/// Inverse CDF of the density ∝ `x^{-b}` on `[lo, hi]`.
fn continuous_inverse(b: f64, lo: f64, hi: f64, u: f64) -> f64 {
    if (b - 1.0).abs() < 1e-12 {
        lo * (hi / lo).powf(u)
    } else {
        let e = 1.0 - b;
        let (a, c) = (lo.powf(e), hi.powf(e));
        (a + u * (c - a)).powf(1.0 / e)
    }
}

/// One draw from the power law. Builds the sampler on every call; reuse a
/// [`PowerLaw`] for repeated draws.
pub fn sample_powerlaw<R: Rng + ?Sized>(b: f64, k_min: u64, k_max: u64, rng: &mut R) -> Result<u64> {
    Ok(PowerLaw::new(b, k_min, k_max)?.sample(rng))
}

pub fn sample_poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> Result<u64> {
    let p = Poisson::new(lambda).map_err(|e| crate::Error::Parameter(format!("poisson: {e}")))?;
    Ok(p.sample(rng) as u64)
}

pub fn sample_lognormal<R: Rng + ?Sized>(mu: f64, sigma: f64, rng: &mut R) -> Result<f64> {
    if !(sigma > 0.0) {
        return param_err(format!("log-normal sigma must be positive, got {sigma}"));
    }
    let d = LogNormal::new(mu, sigma).map_err(|e| crate::Error::Parameter(format!("log-normal: {e}")))?;
    Ok(d.sample(rng))
}

/// Named parameter sets mimicking three real datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "synth-criteo")]
    Criteo,
    #[serde(rename = "synth-real-estate")]
    RealEstate,
    #[serde(rename = "synth-travel")]
    Travel,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Criteo, Preset::RealEstate, Preset::Travel];

    /// `(b, λ, μ, σ)`.
    pub fn parameters(self) -> (f64, f64, f64, f64) {
        match self {
            Preset::Criteo => (2.88, 10.0, 4.19, 1.16),
            Preset::RealEstate => (0.06, 10.0, 0.87, 0.43),
            Preset::Travel => (1.14, 10.0, 1.95, 1.14),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Criteo => "synth-criteo",
            Preset::RealEstate => "synth-real-estate",
            Preset::Travel => "synth-travel",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct SynthConfig<T> {
    /// Impression-side feature cardinalities; their product is the number
    /// of impression slices.
    pub cardinalities: Vec<usize>,
    pub conversion_types: usize,
    /// Cross the impression slices with conversion type.
    pub slice_by_conversion_type: bool,
    pub b: T,
    pub k_min: u64,
    pub k_max: u64,
    pub lambda: T,
    pub mu: T,
    pub sigma: T,
    pub seed: u64,
}

impl<T: Scalar> SynthConfig<T> {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let (b, lambda, mu, sigma) = preset.parameters();
        Self {
            cardinalities: vec![16, 8, 2],
            conversion_types: 5,
            slice_by_conversion_type: false,
            b: T::lit(b),
            k_min: 1,
            k_max: 100_000,
            lambda: T::lit(lambda),
            mu: T::lit(mu),
            sigma: T::lit(sigma),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cardinalities.iter().any(|&c| c == 0) || self.conversion_types == 0 {
            return param_err("feature cardinalities must be positive");
        }
        if !(self.lambda.is_finite() && self.lambda > T::zero()) {
            return param_err(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.sigma.is_finite() && self.sigma > T::zero()) || !self.mu.is_finite() {
            return param_err("log-normal parameters must be finite with sigma > 0");
        }
        PowerLaw::approximate(self.b.as_f64(), self.k_min, self.k_max).map(|_| ())
    }

    pub fn impression_slices(&self) -> usize {
        self.cardinalities.iter().product()
    }

    pub fn num_slices(&self) -> usize {
        self.impression_slices()
            * if self.slice_by_conversion_type {
                self.conversion_types
            } else {
                1
            }
    }

    /// Mixed-radix feature values of impression slice `j`, first feature
    /// most significant.
    pub fn features(&self, mut j: usize) -> Vec<usize> {
        let mut out = vec![0; self.cardinalities.len()];
        for (i, &c) in self.cardinalities.iter().enumerate().rev() {
            out[i] = j % c;
            j /= c;
        }
        out
    }

    fn slice_of(&self, impression_slice: usize, conversion_type: usize) -> usize {
        if self.slice_by_conversion_type {
            impression_slice * self.conversion_types + conversion_type
        } else {
            impression_slice
        }
    }
}

/// A generated dataset with the conversion type of every record.
#[derive(Clone, Debug)]
pub struct SynthData<T> {
    pub dataset: Dataset<T>,
    pub conversion_types: Vec<usize>,
    /// Impression slice of every record.
    pub impression_slices: Vec<usize>,
}

struct SliceDraw<T> {
    /// Conversions per impression: `(type, value)` in arrival order.
    impressions: Vec<Vec<(usize, T)>>,
}

fn draw_slice<T: Scalar>(cfg: &SynthConfig<T>, law: &PowerLaw, stream: &RngStream) -> Result<SliceDraw<T>> {
    let mut rng = stream.clone();
    let poisson = Poisson::new(cfg.lambda.as_f64())
        .map_err(|e| crate::Error::Parameter(format!("poisson: {e}")))?;
    let lognormal = LogNormal::new(cfg.mu.as_f64(), cfg.sigma.as_f64())
        .map_err(|e| crate::Error::Parameter(format!("log-normal: {e}")))?;
    let n = law.sample(&mut rng);
    let impressions = (0..n)
        .map(|_| {
            let c = poisson.sample(&mut rng) as u64;
            (0..c)
                .map(|_| {
                    let t = rng.random_range(0..cfg.conversion_types);
                    let v: f64 = lognormal.sample(&mut rng);
                    (t, T::lit((v * 100.0).round() / 100.0))
                })
                .collect()
        })
        .collect();
    Ok(SliceDraw { impressions })
}

/// Generates draw number `draw` of the configured distribution. Distinct
/// draws are independent; the same `(cfg, draw)` gives the same data.
pub fn generate_draw<T: Scalar>(cfg: &SynthConfig<T>, draw: u64) -> Result<SynthData<T>> {
    cfg.validate()?;
    let law = PowerLaw::new(cfg.b.as_f64(), cfg.k_min, cfg.k_max)?;
    let root = RngStream::new(cfg.seed).substream(draw);
    let draws: Vec<SliceDraw<T>> = (0..cfg.impression_slices())
        .into_par_iter()
        .map(|j| draw_slice(cfg, &law, &root.substream(j as u64)))
        .collect::<Result<_>>()?;
    let mut records = Vec::new();
    let mut conversion_types = Vec::new();
    let mut impression_slices = Vec::new();
    let mut next_id = 0u64;
    for (j, draw) in draws.into_iter().enumerate() {
        for conversions in draw.impressions {
            for (k, (t, v)) in conversions.into_iter().enumerate() {
                records.push(Record::new(next_id, k as u64, cfg.slice_of(j, t), vec![v]));
                conversion_types.push(t);
                impression_slices.push(j);
            }
            next_id += 1;
        }
    }
    Ok(SynthData {
        dataset: Dataset::new(cfg.num_slices(), 1, records)?,
        conversion_types,
        impression_slices,
    })
}

pub fn generate<T: Scalar>(cfg: &SynthConfig<T>) -> Result<Dataset<T>> {
    Ok(generate_draw(cfg, 0)?.dataset)
}

/// Independent train and test draws.
pub fn generate_split<T: Scalar>(cfg: &SynthConfig<T>) -> Result<(Dataset<T>, Dataset<T>)> {
    Ok((generate_draw(cfg, 1)?.dataset, generate_draw(cfg, 2)?.dataset))
}

/// Writes the data in the ingestible CSV layout: `impression_id,
/// timestamp, feature_0.., conversion_type, value`. Timestamps follow
/// record order.
pub fn write_csv<T: Scalar, W: Write>(data: &SynthData<T>, cfg: &SynthConfig<T>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["impression_id".to_string(), "timestamp".to_string()];
    header.extend((0..cfg.cardinalities.len()).map(|i| format!("feature_{i}")));
    header.push("conversion_type".into());
    header.push("value".into());
    w.write_record(&header)?;
    for (i, r) in data.dataset.records().iter().enumerate() {
        let mut row = vec![r.impression.0.to_string(), i.to_string()];
        row.extend(
            cfg.features(data.impression_slices[i])
                .into_iter()
                .map(|f| f.to_string()),
        );
        row.push(data.conversion_types[i].to_string());
        row.push(format!("{}", r.values[0]));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Ingest specification matching [`write_csv`]'s layout.
pub fn ingest_spec<T: Scalar>(cfg: &SynthConfig<T>, path: impl AsRef<Path>, train_fraction: f64) -> IngestSpec {
    let mut slices: Vec<String> = (0..cfg.cardinalities.len()).map(|i| format!("feature_{i}")).collect();
    if cfg.slice_by_conversion_type {
        slices.push("conversion_type".into());
    }
    let slices: Vec<&str> = slices.iter().map(String::as_str).collect();
    let mut spec = IngestSpec::new(path.as_ref(), "impression_id", &slices, &["value"], "timestamp");
    spec.train_fraction = train_fraction;
    spec
}
