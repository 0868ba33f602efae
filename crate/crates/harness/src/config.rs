use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ara_budget::optimizer::BaselineCountLimit;
use ara_budget::{Error, IngestSpec, OptimizerSettings, Preset, Result, SynthConfig64};
use serde::{Deserialize, Serialize};

/// Environment variable that replaces `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "ARA_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "opt-linf")]
    OptLinf,
    #[serde(rename = "opt-l1")]
    OptL1,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Baseline, Method::OptLinf, Method::OptL1];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::OptLinf => "opt-linf",
            Method::OptL1 => "opt-l1",
        }
    }

    /// Stable id used to derive the method's random stream.
    pub(crate) fn stream_id(self) -> u64 {
        match self {
            Method::Baseline => 0,
            Method::OptLinf => 1,
            Method::OptL1 => 2,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// A preset with optional per-field overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSource {
    pub preset: Option<Preset>,
    pub cardinalities: Option<Vec<usize>>,
    pub conversion_types: Option<usize>,
    pub slice_by_conversion_type: Option<bool>,
    pub b: Option<f64>,
    pub k_min: Option<u64>,
    pub k_max: Option<u64>,
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
}

impl SynthSource {
    pub fn from_preset(preset: Preset) -> Self {
        Self {
            preset: Some(preset),
            ..Self::default()
        }
    }

    pub fn resolve(&self, seed: u64) -> SynthConfig64 {
        let mut cfg = SynthConfig64::preset(self.preset.unwrap_or(Preset::Criteo), seed);
        macro_rules! apply {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f.clone() {
                    cfg.$f = v;
                }
            )*};
        }
        apply!(cardinalities, conversion_types, slice_by_conversion_type, b, k_min, k_max, lambda, mu, sigma);
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    Synth(SynthSource),
    Csv(CsvSource),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CsvSource(pub IngestSpec);

impl PartialEq for CsvSource {
    fn eq(&self, other: &Self) -> bool {
        serde_json::to_value(&self.0).ok() == serde_json::to_value(&other.0).ok()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub epsilons: Vec<f64>,
    pub trials: usize,
    pub methods: Vec<Method>,
    pub baseline_quantile: f64,
    /// Defaults to a quantile for synthetic data and 1 for CSV data.
    pub baseline_count_limit: Option<BaselineCountLimit>,
    /// Off only for debugging: summaries are then exact sums.
    pub noise: bool,
    pub gamma: u64,
    pub output_dir: PathBuf,
    pub source: Source,
    pub optimizer: OptimizerSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epsilons: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
            trials: 100,
            methods: vec![Method::Baseline, Method::OptLinf],
            baseline_quantile: 0.95,
            baseline_count_limit: None,
            noise: true,
            gamma: ara_budget::DEFAULT_CONTRIBUTION_BUDGET,
            output_dir: PathBuf::from("results"),
            source: Source::Synth(SynthSource::from_preset(Preset::Criteo)),
            optimizer: OptimizerSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the output-directory override.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                self.output_dir = PathBuf::from(dir);
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilons.is_empty() {
            return Err(Error::Config("epsilon list is empty".into()));
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
            return Err(Error::Config(format!("epsilon must be positive, got {e}")));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        if !(self.baseline_quantile > 0.0 && self.baseline_quantile <= 1.0) {
            return Err(Error::Config(format!(
                "baseline quantile must be in (0, 1], got {}",
                self.baseline_quantile
            )));
        }
        if self.gamma == 0 {
            return Err(Error::Config("contribution budget must be positive".into()));
        }
        if let Source::Synth(s) = &self.source {
            s.resolve(self.seed)
                .validate()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn baseline_count_limit(&self) -> BaselineCountLimit {
        self.baseline_count_limit.unwrap_or(match self.source {
            Source::Synth(_) => BaselineCountLimit::Quantile,
            Source::Csv(_) => BaselineCountLimit::One,
        })
    }

    pub fn synth(&self) -> Option<SynthConfig64> {
        match &self.source {
            Source::Synth(s) => Some(s.resolve(self.seed)),
            Source::Csv(_) => None,
        }
    }
}
