use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};

use super::summary::{bic_value, free_parameters, free_parameters_exact, mean_curves};
use super::{Dataset, InitStrategy, ModelConfig, ModelParams};
use crate::baselines::kmeans_curves;
use crate::error::{Error, Result};
use crate::hmm::{forward_backward, viterbi, ChainParams, ChainPosteriors, EmissionTable};
use crate::numcore::{build_design_matrix, DesignMatrix, NormalEquations, TimeRescale};
use crate::par::map_indexed;
use crate::rng::{stream_seed, StreamRng};

/// A regime whose total posterior weight falls below this keeps its previous
/// coefficients and variance.
const MIN_REGIME_WEIGHT: f64 = 1e-10;

/// Restart log-likelihoods within this relative distance count as tied, so
/// rounding noise cannot decide between restarts that reached the same optimum.
pub(crate) const RESTART_TIE_TOL: f64 = 1e-10;

/// Whether a restart ending at `candidate` displaces the current best.
pub(crate) fn beats(candidate: f64, best: f64) -> bool {
    candidate - best > RESTART_TIE_TOL * best.abs().max(1.0)
}

/// E-step output for every (curve, cluster) pair.
#[derive(Debug, Clone)]
pub struct Posteriors {
    /// `tau[[i, g]]`: posterior probability that curve i belongs to cluster g.
    pub tau: Array2<f64>,
    /// `per_curve[i][g]`: state and pair posteriors of curve i under cluster g.
    pub per_curve: Vec<Vec<ChainPosteriors>>,
    /// log p(x_i | c_i = g).
    pub cluster_logliks: Array2<f64>,
    /// Observed-data log-likelihood.
    pub loglik: f64,
    pub degenerate_chains: usize,
}

impl Posteriors {
    /// MAP cluster of each curve; ties go to the lowest index.
    pub fn map_labels(&self) -> Vec<usize> {
        self.tau
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (g, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = g;
                    }
                }
                best
            })
            .collect()
    }
}

fn check_shapes(data: &Dataset, params: &ModelParams, design: &DesignMatrix) -> Result<()> {
    if data.m() != design.len() {
        return Err(Error::invalid(format!(
            "curves have {} points, design has {} rows",
            data.m(),
            design.len()
        )));
    }
    if params.degree() + 1 != design.ncoef() {
        return Err(Error::invalid(format!(
            "parameters are degree {}, design is degree {}",
            params.degree(),
            design.degree()
        )));
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Forward-backward for every curve under every cluster, then cluster
/// posteriors by Bayes' rule in log space.
pub fn e_step(data: &Dataset, params: &ModelParams, design: &DesignMatrix) -> Result<Posteriors> {
    check_shapes(data, params, design)?;
    let g_count = params.clusters();
    let means: Vec<Array2<f64>> = (0..g_count).map(|g| params.regime_means(g, design)).collect();
    let log_w: Vec<f64> = params.weights.iter().map(|w| w.ln()).collect();

    let rows = map_indexed(data.n(), |i| -> Result<(Vec<ChainPosteriors>, Vec<f64>)> {
        let x = data.curve(i);
        let mut chains = Vec::with_capacity(g_count);
        let mut lls = Vec::with_capacity(g_count);
        for g in 0..g_count {
            let em = EmissionTable::gaussian(x, &means[g], &params.sigma2[g]);
            let post = forward_backward(&params.chains[g], &em)?;
            lls.push(post.loglik);
            chains.push(post);
        }
        Ok((chains, lls))
    });

    let n = data.n();
    let mut tau = Array2::<f64>::zeros((n, g_count));
    let mut cluster_logliks = Array2::<f64>::zeros((n, g_count));
    let mut per_curve = Vec::with_capacity(n);
    let mut loglik = 0.0;
    let mut degenerate_chains = 0;
    for (i, row) in rows.into_iter().enumerate() {
        let (chains, lls) = row?;
        degenerate_chains += chains.iter().filter(|c| c.degenerate).count();
        let joint: Vec<f64> = (0..g_count).map(|g| log_w[g] + lls[g]).collect();
        let lse = log_sum_exp(joint.iter().copied());
        if lse.is_finite() {
            for g in 0..g_count {
                tau[[i, g]] = (joint[g] - lse).exp();
            }
        } else {
            tau.row_mut(i).fill(1.0 / g_count as f64);
        }
        for g in 0..g_count {
            cluster_logliks[[i, g]] = lls[g];
        }
        loglik += lse;
        per_curve.push(chains);
    }

    Ok(Posteriors {
        tau,
        per_curve,
        cluster_logliks,
        loglik,
        degenerate_chains,
    })
}

/// Observed-data log-likelihood of `params`.
pub fn log_likelihood(data: &Dataset, params: &ModelParams, design: &DesignMatrix) -> Result<f64> {
    Ok(e_step(data, params, design)?.loglik)
}

/// Side events of one M-step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MStepReport {
    /// Clusters re-seeded from a random curve because they emptied.
    pub reseeded: usize,
    pub ridge_fallbacks: usize,
    pub variance_floor_hits: usize,
}

/// Regime fits on K uniform contiguous segments of the given curves.
fn segment_fit(
    data: &Dataset,
    members: &[usize],
    regimes: usize,
    design: &DesignMatrix,
    floor: f64,
    report: &mut MStepReport,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let m = data.m();
    let mut betas = Vec::with_capacity(regimes);
    let mut sigma2 = Vec::with_capacity(regimes);
    for k in 0..regimes {
        let start = (k * m / regimes).min(m - 1);
        let end = ((k + 1) * m / regimes).clamp(start + 1, m);
        let mut ne = NormalEquations::new(design.ncoef());
        for &i in members {
            for j in start..end {
                ne.push(design.row(j), data.curves[[i, j]], 1.0);
            }
        }
        let sol = ne.solve()?;
        if sol.ridge {
            report.ridge_fallbacks += 1;
        }
        let mut sse = 0.0;
        for &i in members {
            for j in start..end {
                let mu: f64 = design.row(j).iter().zip(&sol.beta).map(|(a, b)| a * b).sum();
                let r = data.curves[[i, j]] - mu;
                sse += r * r;
            }
        }
        let mut s2 = sse / (members.len() * (end - start)) as f64;
        if !(s2 >= floor) {
            s2 = floor;
            report.variance_floor_hits += 1;
        }
        betas.push(sol.beta);
        sigma2.push(s2);
    }
    Ok((betas, sigma2))
}

/// Maximises the expected complete-data log-likelihood given `post`.
///
/// `prev` supplies values for regimes and transition rows that carry no
/// posterior weight; `rng` drives the re-seeding of empty clusters.
pub fn m_step(
    data: &Dataset,
    post: &Posteriors,
    design: &DesignMatrix,
    config: &ModelConfig,
    prev: &ModelParams,
    rng: &mut StreamRng,
) -> Result<(ModelParams, MStepReport)> {
    check_shapes(data, prev, design)?;
    let n = data.n();
    let m = data.m();
    let g_count = prev.clusters();
    let k_count = prev.regimes();
    let floor = config.variance_floor(data);
    let mut report = MStepReport::default();

    let mut weights = Vec::with_capacity(g_count);
    let mut chains = Vec::with_capacity(g_count);
    let mut betas = Vec::with_capacity(g_count);
    let mut sigma2 = Vec::with_capacity(g_count);

    for g in 0..g_count {
        let tau_g = post.tau.column(g);
        let n_g: f64 = tau_g.sum();
        if n_g < 1e-8 * n as f64 {
            let c = rng.random_range(0..n);
            log::debug!("cluster {g} emptied; re-seeding from curve {c}");
            let (b, s) = segment_fit(data, &[c], k_count, design, floor, &mut report)?;
            report.reseeded += 1;
            weights.push(1.0 / n as f64);
            chains.push(config.initial_chain()?);
            betas.push(b);
            sigma2.push(s);
            continue;
        }
        weights.push(n_g);

        let prev_chain = &prev.chains[g];
        let mut pi = vec![0.0; k_count];
        let mut trans = Array2::<f64>::zeros((k_count, k_count));
        for i in 0..n {
            let t = tau_g[i];
            if t == 0.0 {
                continue;
            }
            let cp = &post.per_curve[i][g];
            for k in 0..k_count {
                pi[k] += t * cp.gamma[[0, k]];
            }
            if m > 1 {
                trans.scaled_add(t, &cp.xi.sum_axis(Axis(0)));
            }
        }
        let pi_sum: f64 = pi.iter().sum();
        if pi_sum > 0.0 {
            pi.iter_mut().for_each(|v| *v /= pi_sum);
        } else {
            pi.clone_from(&prev_chain.pi);
        }
        for r in 0..k_count {
            for c in 0..k_count {
                if !prev_chain.constraint.allows(r, c) {
                    trans[[r, c]] = 0.0;
                }
            }
            let s = trans.row(r).sum();
            if s > 0.0 {
                trans.row_mut(r).mapv_inplace(|v| v / s);
            } else {
                trans.row_mut(r).assign(&prev_chain.trans.row(r));
            }
        }
        chains.push(ChainParams::new(pi, trans, prev_chain.constraint)?);

        let mut b_g = Vec::with_capacity(k_count);
        let mut s_g = Vec::with_capacity(k_count);
        let mut w_j = vec![0.0; m];
        let mut wx_j = vec![0.0; m];
        for k in 0..k_count {
            w_j.iter_mut().for_each(|v| *v = 0.0);
            wx_j.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                let t = tau_g[i];
                if t == 0.0 {
                    continue;
                }
                let gamma = &post.per_curve[i][g].gamma;
                for j in 0..m {
                    let w = t * gamma[[j, k]];
                    w_j[j] += w;
                    wx_j[j] += w * data.curves[[i, j]];
                }
            }
            let mut ne = NormalEquations::new(design.ncoef());
            for j in 0..m {
                ne.push_moments(design.row(j), wx_j[j], w_j[j]);
            }
            let total = ne.total_weight();
            if total < MIN_REGIME_WEIGHT {
                b_g.push(prev.betas[g][k].clone());
                s_g.push(prev.sigma2[g][k]);
                continue;
            }
            let sol = ne.solve()?;
            if sol.ridge {
                report.ridge_fallbacks += 1;
            }
            let mu: Vec<f64> = (0..m)
                .map(|j| design.row(j).iter().zip(&sol.beta).map(|(a, b)| a * b).sum())
                .collect();
            let mut sse = 0.0;
            for i in 0..n {
                let t = tau_g[i];
                if t == 0.0 {
                    continue;
                }
                let gamma = &post.per_curve[i][g].gamma;
                for j in 0..m {
                    let r = data.curves[[i, j]] - mu[j];
                    sse += t * gamma[[j, k]] * r * r;
                }
            }
            let mut s2 = sse / total;
            if !(s2 >= floor) {
                s2 = floor;
                report.variance_floor_hits += 1;
            }
            b_g.push(sol.beta);
            s_g.push(s2);
        }
        betas.push(b_g);
        sigma2.push(s_g);
    }

    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok((
        ModelParams {
            weights,
            chains,
            betas,
            sigma2,
        },
        report,
    ))
}

/// Random-partition initialisation: curves are assigned to clusters at
/// random, then each cluster's regimes are fitted on K equal time segments.
pub fn init_params(data: &Dataset, config: &ModelConfig, restart_seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let n = data.n();
    let g_count = config.clusters;
    if n < g_count {
        return Err(Error::invalid(format!("{n} curves cannot fill {g_count} clusters")));
    }
    let mut rng = StreamRng::seed_from_u64(restart_seed);
    let mut labels = vec![0usize; n];
    let mut filled = false;
    for _ in 0..100 {
        labels.iter_mut().for_each(|l| *l = rng.random_range(0..g_count));
        let mut seen = vec![false; g_count];
        labels.iter().for_each(|&l| seen[l] = true);
        if seen.iter().all(|&s| s) {
            filled = true;
            break;
        }
    }
    if !filled {
        // Balanced assignment over a random permutation.
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        for (pos, &i) in order.iter().enumerate() {
            labels[i] = pos % g_count;
        }
    }

    init_from_partition(data, config, &labels)
}

/// Initial parameters from a hard partition of the curves: cluster weights
/// are the partition proportions and each cluster's regimes are fitted on K
/// uniform contiguous time segments of its member curves.
pub fn init_from_partition(data: &Dataset, config: &ModelConfig, labels: &[usize]) -> Result<ModelParams> {
    config.validate()?;
    let n = data.n();
    let g_count = config.clusters;
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} curves", labels.len())));
    }
    if let Some(g) = (0..g_count).find(|&g| !labels.contains(&g)) {
        return Err(Error::invalid(format!("partition leaves cluster {g} empty")));
    }
    if labels.iter().any(|&l| l >= g_count) {
        return Err(Error::invalid("partition label out of range"));
    }
    let design = build_design_matrix(&data.grid, config.degree)?;
    let floor = config.variance_floor(data);
    let mut report = MStepReport::default();
    let mut params = ModelParams {
        weights: Vec::with_capacity(g_count),
        chains: Vec::with_capacity(g_count),
        betas: Vec::with_capacity(g_count),
        sigma2: Vec::with_capacity(g_count),
    };
    for g in 0..g_count {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == g).collect();
        let (b, s) = segment_fit(data, &members, config.regimes, &design, floor, &mut report)?;
        params.weights.push(members.len() as f64 / n as f64);
        params.chains.push(config.initial_chain()?);
        params.betas.push(b);
        params.sigma2.push(s);
    }
    Ok(params)
}

/// Starting point of restart `r` under `config.init`.
pub fn restart_init(data: &Dataset, config: &ModelConfig, r: usize) -> Result<ModelParams> {
    if r == 0 && config.init == InitStrategy::KMeansFirst && config.clusters > 1 {
        let km = kmeans_curves(data, config.clusters, config)?;
        if (0..config.clusters).all(|g| km.labels.contains(&g)) {
            return init_from_partition(data, config, &km.labels);
        }
        log::debug!("k-means left a cluster empty; restart 0 falls back to a random partition");
    }
    init_params(data, config, stream_seed(config.seed, &format!("init/{r}")))
}

/// One EM run from a given starting point.
#[derive(Debug, Clone)]
pub struct EmRun {
    pub params: ModelParams,
    /// Posteriors under `params`.
    pub posteriors: Posteriors,
    /// Observed-data log-likelihood after each E-step.
    pub loglik_trace: Vec<f64>,
    /// Number of M-steps performed.
    pub iterations: usize,
    pub converged: bool,
    pub reseeds: usize,
    pub degenerate_chains: usize,
    pub ridge_fallbacks: usize,
    pub variance_floor_hits: usize,
}

impl EmRun {
    pub fn final_loglik(&self) -> f64 {
        self.posteriors.loglik
    }

    pub fn degeneracy_events(&self) -> usize {
        self.reseeds + self.degenerate_chains
    }
}

/// Alternates E and M steps from `init` until the relative change of the
/// log-likelihood drops to `config.rel_tol` or `config.max_iter` E-steps ran.
pub fn run_em(
    data: &Dataset,
    design: &DesignMatrix,
    init: ModelParams,
    config: &ModelConfig,
    reseed_seed: u64,
) -> Result<EmRun> {
    init.validate()?;
    let mut rng = StreamRng::seed_from_u64(reseed_seed);
    let mut params = init;
    let mut trace = Vec::new();
    let mut run_report = MStepReport::default();
    let mut degenerate_chains = 0;
    let mut converged = false;
    let mut iterations = 0;

    let posteriors = loop {
        let post = e_step(data, &params, design)?;
        degenerate_chains += post.degenerate_chains;
        let l = post.loglik;
        trace.push(l);
        if !l.is_finite() {
            break post;
        }
        if let [.., before, last] = trace[..] {
            let change = if before != 0.0 {
                ((last - before) / before).abs()
            } else {
                (last - before).abs()
            };
            if change <= config.rel_tol {
                converged = true;
                break post;
            }
        }
        if trace.len() >= config.max_iter {
            break post;
        }
        let (next, report) = m_step(data, &post, design, config, &params, &mut rng)?;
        run_report.reseeded += report.reseeded;
        run_report.ridge_fallbacks += report.ridge_fallbacks;
        run_report.variance_floor_hits += report.variance_floor_hits;
        params = next;
        iterations += 1;
    };

    Ok(EmRun {
        params,
        posteriors,
        loglik_trace: trace,
        iterations,
        converged,
        reseeds: run_report.reseeded,
        degenerate_chains,
        ridge_fallbacks: run_report.ridge_fallbacks,
        variance_floor_hits: run_report.variance_floor_hits,
    })
}

/// Best-of-restarts fit with MAP labels, segmentations and mean curves.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub posteriors: Posteriors,
    pub loglik_trace: Vec<f64>,
    pub loglik: f64,
    pub labels: Vec<usize>,
    /// Viterbi state path of each curve under its MAP cluster, `n x m`.
    pub segmentations: Array2<usize>,
    /// Cluster mean curves, `G x m`.
    pub mean_curves: Array2<f64>,
    pub empty_clusters: Vec<bool>,
    pub bic: f64,
    /// Free-parameter count used in `bic`.
    pub nu: usize,
    /// Free-parameter count honouring the transition constraint.
    pub nu_exact: usize,
    pub iterations: usize,
    pub converged: bool,
    pub degeneracy_events: usize,
    pub ridge_fallbacks: usize,
    pub variance_floor_hits: usize,
    /// Index of the winning restart and the final likelihood of every restart.
    pub restart: usize,
    pub restart_logliks: Vec<f64>,
    pub rescale: TimeRescale,
}

impl FitResult {
    pub fn from_run(
        data: &Dataset,
        design: &DesignMatrix,
        config: &ModelConfig,
        run: EmRun,
        restart: usize,
        restart_logliks: Vec<f64>,
    ) -> Result<Self> {
        let labels = run.posteriors.map_labels();
        let params = &run.params;
        let mut segmentations = Array2::<usize>::zeros((data.n(), data.m()));
        let means: Vec<Array2<f64>> = (0..params.clusters())
            .map(|g| params.regime_means(g, design))
            .collect();
        for (i, &g) in labels.iter().enumerate() {
            let em = EmissionTable::gaussian(data.curve(i), &means[g], &params.sigma2[g]);
            let path = match viterbi(&params.chains[g], &em) {
                Ok(p) => p,
                Err(Error::ImpossiblePath) => vec![0; data.m()],
                Err(e) => return Err(e),
            };
            for (j, s) in path.into_iter().enumerate() {
                segmentations[[i, j]] = s;
            }
        }
        let mc = mean_curves(&run.posteriors, params, design);
        let (g, k, p) = (params.clusters(), params.regimes(), params.degree());
        let nu = free_parameters(g, k, p);
        let nu_exact = free_parameters_exact(g, k, p, config.constraint);
        let loglik = run.final_loglik();
        let degeneracy_events = run.degeneracy_events();
        Ok(Self {
            bic: bic_value(loglik, nu, data.n()),
            nu,
            nu_exact,
            loglik,
            labels,
            segmentations,
            mean_curves: mc.curves,
            empty_clusters: mc.empty,
            iterations: run.iterations,
            converged: run.converged,
            degeneracy_events,
            ridge_fallbacks: run.ridge_fallbacks,
            variance_floor_hits: run.variance_floor_hits,
            restart,
            restart_logliks,
            rescale: design.rescale(),
            params: run.params,
            posteriors: run.posteriors,
            loglik_trace: run.loglik_trace,
        })
    }
}

/// Fits the model with `config.n_init` random-partition restarts and keeps
/// the restart with the highest final log-likelihood.
pub fn fit_em(data: &Dataset, config: &ModelConfig) -> Result<FitResult> {
    config.validate()?;
    if data.n() < config.clusters {
        return Err(Error::invalid(format!(
            "{} curves cannot fill {} clusters",
            data.n(),
            config.clusters
        )));
    }
    if data.m() < config.regimes * (config.degree + 1) {
        log::warn!(
            "only {} points for {} regimes of degree {}",
            data.m(),
            config.regimes,
            config.degree
        );
    }
    let design = build_design_matrix(&data.grid, config.degree)?;

    let runs = map_indexed(config.n_init, |r| {
        let init = restart_init(data, config, r)?;
        run_em(data, &design, init, config, stream_seed(config.seed, &format!("reseed/{r}")))
    });

    let mut best: Option<(usize, EmRun)> = None;
    let mut restart_logliks = Vec::with_capacity(runs.len());
    let mut failures = Vec::new();
    for (r, run) in runs.into_iter().enumerate() {
        match run {
            Ok(run) => {
                let l = run.final_loglik();
                log::debug!("restart {r}: loglik {l}, {} iterations", run.iterations);
                restart_logliks.push(l);
                if !l.is_finite() {
                    failures.push(format!("restart {r}: non-finite log-likelihood"));
                    continue;
                }
                if best.as_ref().is_none_or(|(_, b)| beats(l, b.final_loglik())) {
                    best = Some((r, run));
                }
            }
            Err(e) => {
                restart_logliks.push(f64::NAN);
                failures.push(format!("restart {r}: {e}"));
            }
        }
    }
    let (restart, run) = best.ok_or_else(|| Error::FitFailure(failures.join("; ")))?;
    FitResult::from_run(data, &design, config, run, restart, restart_logliks)
}
