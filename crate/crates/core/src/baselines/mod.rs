//! Comparison models: polynomial regression mixture, constant-regime HMM
//! mixture and k-means, plus the clustering quality criteria.

mod kmeans;
mod metrics;
mod regmix;

pub use kmeans::{kmeans_curves, KMeansResult};
pub use metrics::{intra_cluster_inertia, misclassification_rate, MAX_MATCHED_LABELS};
pub use regmix::{fit_regression_mixture, run_regression_mixture, RegMixFit, RegMixParams, RegMixRun};

use crate::error::Result;
use crate::mixhmmr::{fit_em, Dataset, FitResult, ModelConfig};

/// Mixture of HMMs whose states emit around a constant level: the HMM
/// regression mixture with degree 0.
pub fn fit_mixhmm_constant(data: &Dataset, clusters: usize, regimes: usize, config: &ModelConfig) -> Result<FitResult> {
    let config = ModelConfig {
        clusters,
        regimes,
        degree: 0,
        ..config.clone()
    };
    fit_em(data, &config)
}
