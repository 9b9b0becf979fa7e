//! Heterogeneity analysis over unit-level CATEs and the robustness battery.

mod moderator;
mod overlap;
mod quartiles;
mod robustness;
mod sensitivity;

use thiserror::Error;

use crate::pipeline::EstimateError;
use crate::sample::SampleError;

pub use moderator::{HetMethod, ModeratorFit, cluster_robust_ols, fit_moderator_model, zscore};
pub use overlap::{HISTOGRAM_BINS, HistogramBin, OverlapReport, propensity_histogram, trim_by_propensity};
pub use quartiles::{Contrast, QuartileBin, QuartileContrastTable, order_quantile, quartile_contrasts};
pub use robustness::{
    Variant, VariantInputs, context_covariates, moderator_value, run_placebo, run_variant, trimmed_effect,
};
pub use sensitivity::{Benchmark, SensitivityReport, adjusted_t, benchmark, robustness_value};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("rank-deficient design: {0}")]
    RankDeficientDesign(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("quartiles of {variable} collapse to {distinct_bins} bin(s)")]
    DegenerateQuartiles { variable: String, distinct_bins: usize },
    #[error("placebo outcome present on {coverage:.3} of rows, need {required:.3}")]
    InsufficientPlaceboCoverage { coverage: f64, required: f64 },
    #[error("no units left after trimming to [{lo}, {hi}]")]
    EmptyAfterTrim { lo: f64, hi: f64 },
    #[error("invalid trim bounds [{0}, {1}]")]
    InvalidBounds(f64, f64),
    #[error("missing context for student {0}")]
    MissingContext(String),
    #[error("unknown moderator {0}")]
    UnknownModerator(String),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Sample(#[from] SampleError),
}
