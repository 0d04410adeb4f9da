//! Polynomial regression mixture: every curve of cluster g is the regime-free
//! polynomial beta_g^T t_j plus i.i.d. Gaussian noise of variance sigma2_g.

use ndarray::Array2;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::mixhmmr::{beats, bic_value, restart_init, Dataset, ModelConfig, ModelParams};
use crate::numcore::{build_design_matrix, DesignMatrix, NormalEquations};
use crate::par::map_indexed;
use crate::rng::{stream_seed, StreamRng};

#[derive(Debug, Clone, PartialEq)]
pub struct RegMixParams {
    pub alpha: Vec<f64>,
    pub betas: Vec<Vec<f64>>,
    pub sigma2: Vec<f64>,
}

impl RegMixParams {
    pub fn validate(&self) -> Result<()> {
        let g = self.alpha.len();
        if g == 0 || self.betas.len() != g || self.sigma2.len() != g {
            return Err(Error::invalid("regression mixture parameter counts disagree"));
        }
        if (self.alpha.iter().sum::<f64>() - 1.0).abs() > 1e-12 * g as f64
            || self.alpha.iter().any(|a| !(*a >= 0.0))
        {
            return Err(Error::invalid("mixing proportions are not a probability vector"));
        }
        if self.sigma2.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("non-positive variance"));
        }
        Ok(())
    }

    /// Takes the single-regime parameters of a one-state HMM mixture.
    pub fn from_single_regime(params: &ModelParams) -> Result<Self> {
        if params.regimes() != 1 {
            return Err(Error::invalid(format!(
                "expected one regime per cluster, found {}",
                params.regimes()
            )));
        }
        Ok(Self {
            alpha: params.weights.clone(),
            betas: params.betas.iter().map(|b| b[0].clone()).collect(),
            sigma2: params.sigma2.iter().map(|s| s[0]).collect(),
        })
    }

    fn mean(&self, g: usize, design: &DesignMatrix) -> Vec<f64> {
        (0..design.len())
            .map(|j| design.row(j).iter().zip(&self.betas[g]).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Result of a regression-mixture fit.
#[derive(Debug, Clone)]
pub struct RegMixFit {
    pub params: RegMixParams,
    pub tau: Array2<f64>,
    pub loglik_trace: Vec<f64>,
    pub loglik: f64,
    pub labels: Vec<usize>,
    /// `beta_g^T t_j` for every cluster, `G x m`.
    pub mean_curves: Array2<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub degeneracy_events: usize,
    pub bic: f64,
    pub nu: usize,
    pub restart: usize,
}

struct EStep {
    tau: Array2<f64>,
    loglik: f64,
}

fn e_step(data: &Dataset, params: &RegMixParams, design: &DesignMatrix) -> EStep {
    let g_count = params.alpha.len();
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let means: Vec<Vec<f64>> = (0..g_count).map(|g| params.mean(g, design)).collect();
    let rows = map_indexed(data.n(), |i| {
        let x = data.curve(i);
        (0..g_count)
            .map(|g| {
                let c = -0.5 * (ln_2pi + params.sigma2[g].ln());
                let ll: f64 = (0..x.len())
                    .map(|j| {
                        let r = x[j] - means[g][j];
                        c - 0.5 * r * r / params.sigma2[g]
                    })
                    .sum();
                params.alpha[g].ln() + ll
            })
            .collect::<Vec<f64>>()
    });
    let mut tau = Array2::zeros((data.n(), g_count));
    let mut loglik = 0.0;
    for (i, joint) in rows.into_iter().enumerate() {
        let max = joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + joint.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for g in 0..g_count {
            tau[[i, g]] = (joint[g] - lse).exp();
        }
        loglik += lse;
    }
    EStep { tau, loglik }
}

fn m_step(
    data: &Dataset,
    tau: &Array2<f64>,
    design: &DesignMatrix,
    floor: f64,
    rng: &mut StreamRng,
    reseeds: &mut usize,
) -> Result<RegMixParams> {
    let (n, m) = (data.n(), data.m());
    let g_count = tau.ncols();
    let mut alpha = Vec::with_capacity(g_count);
    let mut betas = Vec::with_capacity(g_count);
    let mut sigma2 = Vec::with_capacity(g_count);
    for g in 0..g_count {
        let n_g: f64 = tau.column(g).sum();
        let (weights, mass) = if n_g < 1e-8 * n as f64 {
            *reseeds += 1;
            let c = rng.random_range(0..n);
            let mut w = vec![0.0; n];
            w[c] = 1.0;
            alpha.push(1.0 / n as f64);
            (w, 1.0)
        } else {
            alpha.push(n_g);
            (tau.column(g).to_vec(), n_g)
        };
        let mut ne = NormalEquations::new(design.ncoef());
        for j in 0..m {
            let mut w = 0.0;
            let mut wx = 0.0;
            for i in 0..n {
                w += weights[i];
                wx += weights[i] * data.curves[[i, j]];
            }
            ne.push_moments(design.row(j), wx, w);
        }
        let beta = ne.solve()?.beta;
        let mu: Vec<f64> = (0..m)
            .map(|j| design.row(j).iter().zip(&beta).map(|(a, b)| a * b).sum())
            .collect();
        let mut sse = 0.0;
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            for j in 0..m {
                let r = data.curves[[i, j]] - mu[j];
                sse += weights[i] * r * r;
            }
        }
        let s2 = sse / (mass * m as f64);
        betas.push(beta);
        sigma2.push(if s2 >= floor { s2 } else { floor });
    }
    let total: f64 = alpha.iter().sum();
    alpha.iter_mut().for_each(|a| *a /= total);
    Ok(RegMixParams {
        alpha,
        betas,
        sigma2,
    })
}

/// One EM run of the regression mixture.
#[derive(Debug, Clone)]
pub struct RegMixRun {
    pub params: RegMixParams,
    pub tau: Array2<f64>,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub reseeds: usize,
}

/// EM from a given start, with the same stopping rule as the HMM mixture.
pub fn run_regression_mixture(
    data: &Dataset,
    design: &DesignMatrix,
    init: RegMixParams,
    config: &ModelConfig,
    reseed_seed: u64,
) -> Result<RegMixRun> {
    init.validate()?;
    let floor = config.variance_floor(data);
    let mut rng = StreamRng::seed_from_u64(reseed_seed);
    let mut params = init;
    let mut trace: Vec<f64> = Vec::new();
    let mut reseeds = 0;
    let mut converged = false;
    let mut iterations = 0;
    let tau = loop {
        let e = e_step(data, &params, design);
        trace.push(e.loglik);
        if !e.loglik.is_finite() {
            break e.tau;
        }
        if trace.len() >= 2 {
            let (before, last) = (trace[trace.len() - 2], e.loglik);
            let change = if before != 0.0 {
                ((last - before) / before).abs()
            } else {
                (last - before).abs()
            };
            if change <= config.rel_tol {
                converged = true;
                break e.tau;
            }
        }
        if trace.len() >= config.max_iter {
            break e.tau;
        }
        params = m_step(data, &e.tau, design, floor, &mut rng, &mut reseeds)?;
        iterations += 1;
    };
    Ok(RegMixRun {
        params,
        tau,
        loglik_trace: trace,
        iterations,
        converged,
        reseeds,
    })
}

/// Regression mixture with `clusters` components of degree `degree`,
/// `config.n_init` random-partition restarts.
pub fn fit_regression_mixture(data: &Dataset, clusters: usize, degree: usize, config: &ModelConfig) -> Result<RegMixFit> {
    let config = ModelConfig {
        clusters,
        regimes: 1,
        degree,
        ..config.clone()
    };
    config.validate()?;
    if data.n() < clusters {
        return Err(Error::invalid(format!("{} curves cannot fill {clusters} clusters", data.n())));
    }
    let design = build_design_matrix(&data.grid, degree)?;
    let runs = map_indexed(config.n_init, |r| {
        let init = restart_init(data, &config, r)?;
        let init = RegMixParams::from_single_regime(&init)?;
        run_regression_mixture(data, &design, init, &config, stream_seed(config.seed, &format!("reseed/{r}")))
    });
    let mut best: Option<(usize, RegMixRun)> = None;
    let mut failures = Vec::new();
    for (r, run) in runs.into_iter().enumerate() {
        match run {
            Ok(run) => {
                let l = *run.loglik_trace.last().expect("at least one E-step");
                if !l.is_finite() {
                    failures.push(format!("restart {r}: non-finite log-likelihood"));
                } else if best
                    .as_ref()
                    .is_none_or(|(_, b)| beats(l, *b.loglik_trace.last().expect("non-empty")))
                {
                    best = Some((r, run));
                }
            }
            Err(e) => failures.push(format!("restart {r}: {e}")),
        }
    }
    let (restart, run) = best.ok_or_else(|| Error::FitFailure(failures.join("; ")))?;

    let labels = run
        .tau
        .rows()
        .into_iter()
        .map(|row| {
            let mut b = 0;
            for (g, &v) in row.iter().enumerate() {
                if v > row[b] {
                    b = g;
                }
            }
            b
        })
        .collect();
    let mut mean_curves = Array2::zeros((clusters, data.m()));
    for g in 0..clusters {
        for (j, v) in run.params.mean(g, &design).into_iter().enumerate() {
            mean_curves[[g, j]] = v;
        }
    }
    let loglik = *run.loglik_trace.last().expect("non-empty");
    // alpha (G-1), coefficients G(p+1), variances G.
    let nu = (clusters - 1) + clusters * (degree + 1) + clusters;
    Ok(RegMixFit {
        bic: bic_value(loglik, nu, data.n()),
        nu,
        loglik,
        labels,
        mean_curves,
        iterations: run.iterations,
        converged: run.converged,
        degeneracy_events: run.reseeds,
        restart,
        params: run.params,
        tau: run.tau,
        loglik_trace: run.loglik_trace,
    })
}
