//! Evaluation metrics and diagnostics.

mod bound;
mod calibration;
mod classification;
mod divergence;
mod mmd;
mod rank;

pub use bound::{theorem_bound_check, BoundReport, DiscreteInstance};
pub use calibration::{
    expected_calibration_error, reliability_from_probs, ReliabilityBin, ReliabilityReport,
    DEFAULT_ECE_BINS,
};
pub use classification::{classification_metrics, ClassMetrics};
pub use divergence::{js_divergence, kl_divergence};
pub use mmd::{median_bandwidth, mmd_permutation_test, mmd_rbf, mmd_rbf_with_bandwidth, PermutationTest};
pub use rank::{average_ranks, spearman};
