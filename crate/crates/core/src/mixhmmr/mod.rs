//! Mixture of HMM polynomial regressions: each cluster of curves is a
//! hidden Markov chain whose states emit Gaussian noise around a regime
//! polynomial of time.

mod em;
mod sample;
mod select;
mod summary;

pub use em::{
    e_step, fit_em, init_from_partition, init_params, restart_init, log_likelihood, m_step, run_em, EmRun, FitResult, MStepReport,
    Posteriors,
};
pub(crate) use em::beats;
pub use sample::sample;
pub use select::{select_model, SelectionGrid, SelectionRow};
pub use summary::{bic, bic_value, free_parameters, free_parameters_exact, mean_curves, MeanCurves};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{make_leftright_chain, ChainParams, Constraint};
use crate::numcore::{DesignMatrix, TimeGrid};

/// `n` curves sampled on one shared time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub curves: Array2<f64>,
    pub grid: TimeGrid,
    pub truth_labels: Option<Vec<usize>>,
    /// Generating regime of every point, when known.
    pub truth_states: Option<Array2<usize>>,
}

impl Dataset {
    pub fn new(curves: Array2<f64>, grid: TimeGrid) -> Result<Self> {
        if curves.ncols() != grid.len() {
            return Err(Error::invalid(format!(
                "curves have {} columns but the grid has {} points",
                curves.ncols(),
                grid.len()
            )));
        }
        if curves.nrows() == 0 {
            return Err(Error::invalid("dataset has no curves"));
        }
        if let Some(((i, j), _)) = curves.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid(format!("value at curve {i}, point {j} is not finite")));
        }
        Ok(Self {
            curves,
            grid,
            truth_labels: None,
            truth_states: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.n() {
            return Err(Error::invalid(format!(
                "{} labels for {} curves",
                labels.len(),
                self.n()
            )));
        }
        self.truth_labels = Some(labels);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.curves.nrows()
    }

    pub fn m(&self) -> usize {
        self.curves.ncols()
    }

    pub fn curve(&self, i: usize) -> ArrayView1<'_, f64> {
        self.curves.row(i)
    }

    /// Sample variance of all values pooled together.
    pub fn pooled_variance(&self) -> f64 {
        let n = self.curves.len() as f64;
        let mean = self.curves.sum() / n;
        self.curves.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
    }
}

/// How the restarts of a fit are started.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    /// Restart 0 starts from a k-means partition of the curves, the others
    /// from random partitions.
    #[default]
    KMeansFirst,
    /// Every restart starts from a random partition.
    RandomPartition,
}

/// Structural sizes and EM controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of clusters.
    pub clusters: usize,
    /// Number of regimes per cluster.
    pub regimes: usize,
    /// Polynomial degree of each regime.
    pub degree: usize,
    pub constraint: Constraint,
    pub max_iter: usize,
    /// Stop when |(L_new - L_old) / L_old| falls to this value.
    pub rel_tol: f64,
    /// Number of EM restarts; the best final likelihood wins.
    pub n_init: usize,
    pub seed: u64,
    /// Variances are floored at this factor times the pooled data variance.
    pub variance_floor_factor: f64,
    #[serde(default)]
    pub init: InitStrategy,
}

impl ModelConfig {
    pub fn new(clusters: usize, regimes: usize, degree: usize) -> Self {
        Self {
            clusters,
            regimes,
            degree,
            constraint: Constraint::LeftRight,
            max_iter: 1000,
            rel_tol: 1e-6,
            n_init: 10,
            seed: 0,
            variance_floor_factor: 1e-6,
            init: InitStrategy::KMeansFirst,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_restarts(mut self, n_init: usize) -> Self {
        self.n_init = n_init;
        self
    }

    pub fn with_init(mut self, init: InitStrategy) -> Self {
        self.init = init;
        self
    }

    pub fn with_constraint(mut self, constraint: Constraint) -> Self {
        self.constraint = constraint;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.regimes == 0 {
            return Err(Error::invalid("clusters and regimes must be at least 1"));
        }
        if self.n_init == 0 || self.max_iter == 0 {
            return Err(Error::invalid("n_init and max_iter must be at least 1"));
        }
        if !(self.rel_tol >= 0.0) || !(self.variance_floor_factor >= 0.0) {
            return Err(Error::invalid("tolerances must be non-negative"));
        }
        Ok(())
    }

    /// Default chain for this configuration's constraint.
    pub fn initial_chain(&self) -> Result<ChainParams> {
        match self.constraint {
            Constraint::LeftRight => make_leftright_chain(self.regimes),
            Constraint::Full => ChainParams::uniform(self.regimes),
        }
    }

    pub(crate) fn variance_floor(&self, data: &Dataset) -> f64 {
        let v = data.pooled_variance();
        (self.variance_floor_factor * if v > 0.0 { v } else { 1.0 }).max(f64::MIN_POSITIVE)
    }
}

/// Full parameter vector: weights, chains, regime coefficients and variances.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub weights: Vec<f64>,
    pub chains: Vec<ChainParams>,
    /// `betas[g][k]` holds the p + 1 coefficients of regime k in cluster g,
    /// in rescaled time.
    pub betas: Vec<Vec<Vec<f64>>>,
    pub sigma2: Vec<Vec<f64>>,
}

impl ModelParams {
    pub fn clusters(&self) -> usize {
        self.weights.len()
    }

    pub fn regimes(&self) -> usize {
        self.chains.first().map_or(0, ChainParams::n_states)
    }

    pub fn degree(&self) -> usize {
        self.betas
            .first()
            .and_then(|b| b.first())
            .map_or(0, |b| b.len().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.weights.len();
        if g == 0 {
            return Err(Error::invalid("no clusters"));
        }
        if self.chains.len() != g || self.betas.len() != g || self.sigma2.len() != g {
            return Err(Error::invalid("per-cluster parameter counts disagree"));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0))
            || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 * g as f64
        {
            return Err(Error::invalid("cluster weights are not a probability vector"));
        }
        let k = self.regimes();
        let p1 = self.degree() + 1;
        for c in 0..g {
            self.chains[c].validate()?;
            if self.chains[c].n_states() != k || self.betas[c].len() != k || self.sigma2[c].len() != k {
                return Err(Error::invalid(format!("cluster {c} has inconsistent regime count")));
            }
            if self.betas[c].iter().any(|b| b.len() != p1 || b.iter().any(|v| !v.is_finite())) {
                return Err(Error::invalid(format!("cluster {c} has malformed coefficients")));
            }
            if self.sigma2[c].iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(Error::invalid(format!("cluster {c} has a non-positive variance")));
            }
        }
        Ok(())
    }

    /// Regime means of cluster `g` on the design grid, `m x K`.
    pub fn regime_means(&self, g: usize, design: &DesignMatrix) -> Array2<f64> {
        let k = self.betas[g].len();
        let rows = design.rows();
        Array2::from_shape_fn((design.len(), k), |(j, s)| {
            rows.row(j)
                .iter()
                .zip(&self.betas[g][s])
                .map(|(x, b)| x * b)
                .sum()
        })
    }

    /// Reorders clusters so that new cluster `c` is old cluster `perm[c]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            weights: perm.iter().map(|&c| self.weights[c]).collect(),
            chains: perm.iter().map(|&c| self.chains[c].clone()).collect(),
            betas: perm.iter().map(|&c| self.betas[c].clone()).collect(),
            sigma2: perm.iter().map(|&c| self.sigma2[c].clone()).collect(),
        }
    }
}
