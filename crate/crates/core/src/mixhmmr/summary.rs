use ndarray::Array2;

use super::em::{FitResult, Posteriors};
use super::ModelParams;
use crate::hmm::Constraint;
use crate::numcore::DesignMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct MeanCurves {
    /// `G x m`; rows of empty clusters are NaN.
    pub curves: Array2<f64>,
    pub empty: Vec<bool>,
}

/// Posterior-weighted mean curve of each cluster: at every time point, the
/// regime polynomials mixed by the state posteriors, averaged over curves
/// with the cluster posteriors as weights.
pub fn mean_curves(post: &Posteriors, params: &ModelParams, design: &DesignMatrix) -> MeanCurves {
    let g_count = params.clusters();
    let m = design.len();
    let n = post.tau.nrows();
    let mut curves = Array2::<f64>::zeros((g_count, m));
    let mut empty = vec![false; g_count];
    for g in 0..g_count {
        let means = params.regime_means(g, design);
        let k_count = means.ncols();
        let n_g: f64 = post.tau.column(g).sum();
        if !(n_g > 0.0) {
            log::warn!("cluster {g} has no posterior mass; its mean curve is undefined");
            empty[g] = true;
            curves.row_mut(g).fill(f64::NAN);
            continue;
        }
        for i in 0..n {
            let t = post.tau[[i, g]];
            if t == 0.0 {
                continue;
            }
            let gamma = &post.per_curve[i][g].gamma;
            for j in 0..m {
                let mix: f64 = (0..k_count).map(|k| gamma[[j, k]] * means[[j, k]]).sum();
                curves[[g, j]] += t * mix;
            }
        }
        curves.row_mut(g).mapv_inplace(|v| v / n_g);
    }
    MeanCurves { curves, empty }
}

/// Free-parameter count of the mixture as used for BIC:
/// (G-1) + G K + G (2K - 1) + G K (p+1) + G K.
pub fn free_parameters(clusters: usize, regimes: usize, degree: usize) -> usize {
    let (g, k) = (clusters, regimes);
    (g - 1) + g * k + g * (k + k - 1) + g * k * (degree + 1) + g * k
}

/// Exact free-parameter count for a given transition structure. A
/// left-right chain starts in state 0 with probability one and has one free
/// transition per non-final state; a full chain has K - 1 free initial
/// probabilities and K (K - 1) free transitions.
pub fn free_parameters_exact(clusters: usize, regimes: usize, degree: usize, constraint: Constraint) -> usize {
    let (g, k) = (clusters, regimes);
    let chain = match constraint {
        Constraint::LeftRight => k - 1,
        Constraint::Full => (k - 1) + k * (k - 1),
    };
    (g - 1) + g * (chain + k * (degree + 1) + k)
}

/// `L - nu / 2 log n`; larger is better.
pub fn bic_value(loglik: f64, nu: usize, n: usize) -> f64 {
    loglik - 0.5 * nu as f64 * (n as f64).ln()
}

pub fn bic(result: &FitResult, n: usize) -> f64 {
    let p = &result.params;
    bic_value(result.loglik, free_parameters(p.clusters(), p.regimes(), p.degree()), n)
}
