//! Simulation and parameter optimization for aggregate attribution summary
//! reports.
//!
//! Conversions attributed to an impression are encoded into integer
//! histogram contributions, bounded per impression to a fixed contribution
//! budget, summed with discrete Laplace noise and finally rescaled into
//! per-slice estimates. The crate models every step of that pipeline and
//! chooses the analyst-controlled parameters (count limit, clipping
//! thresholds, budget fractions) that minimize the expected thresholded
//! relative error.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` aliases at the crate root fix the scalar to `f64`, which is what
//! the experiment harness uses.

pub mod dataset;
pub mod error;
pub mod mechanisms;
pub mod metrics;
pub mod optimizer;
pub mod pipeline;
pub mod scalar;
pub mod synthgen;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use dataset::{Dataset, ImpressionId, IngestSpec, Record, SliceDictionary};
pub use mechanisms::{DLapParam, RngStream};
pub use metrics::{MetricConfig, TrialSet};
pub use optimizer::{ObjectiveContext, OptimizerReport, OptimizerSettings};
pub use pipeline::{
    BudgetParams, CountMode, EstimateMatrix, HistogramContribution, PipelineConfig, SummaryReport,
    Variant,
};
pub use synthgen::{Preset, SynthConfig};

/// Contribution budget fixed by the reporting API: 2^16.
pub const DEFAULT_CONTRIBUTION_BUDGET: u64 = 1 << 16;

pub type Record64 = Record<f64>;
pub type Dataset64 = Dataset<f64>;
pub type BudgetParams64 = BudgetParams<f64>;
pub type EstimateMatrix64 = EstimateMatrix<f64>;
pub type SummaryReport64 = SummaryReport<f64>;
pub type MetricConfig64 = MetricConfig<f64>;
pub type TrialSet64 = TrialSet<f64>;
pub type ObjectiveContext64 = ObjectiveContext<f64>;
pub type OptimizerReport64 = OptimizerReport<f64>;
pub type SynthConfig64 = SynthConfig<f64>;

pub type Record32 = Record<f32>;
pub type Dataset32 = Dataset<f32>;
pub type BudgetParams32 = BudgetParams<f32>;
pub type EstimateMatrix32 = EstimateMatrix<f32>;
