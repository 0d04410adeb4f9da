//! Scaled forward-backward, Viterbi decoding and an enumeration oracle for
//! Gaussian-emission Markov chains, optionally under the left-right
//! constraint (no backward moves, no jumps of more than one state).

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowest log value that still exponentiates to a non-zero double.
pub const LOG_FLOOR: f64 = -745.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Constraint {
    #[default]
    LeftRight,
    #[serde(alias = "unconstrained")]
    Full,
}

impl Constraint {
    /// Whether a transition `from -> to` is structurally allowed.
    pub fn allows(self, from: usize, to: usize) -> bool {
        match self {
            Constraint::LeftRight => to == from || to == from + 1,
            Constraint::Full => true,
        }
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Constraint::LeftRight => "left-right",
            Constraint::Full => "full",
        })
    }
}

impl FromStr for Constraint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left-right" | "leftright" => Ok(Constraint::LeftRight),
            "full" | "unconstrained" => Ok(Constraint::Full),
            other => Err(Error::invalid(format!("unknown constraint `{other}`"))),
        }
    }
}

/// Initial distribution and transition matrix of one cluster's chain.
/// `trans[[k, l]]` is p(z_j = l | z_{j-1} = k).
#[derive(Debug, Clone, PartialEq)]
pub struct ChainParams {
    pub pi: Vec<f64>,
    pub trans: Array2<f64>,
    pub constraint: Constraint,
}

impl ChainParams {
    pub fn new(pi: Vec<f64>, trans: Array2<f64>, constraint: Constraint) -> Result<Self> {
        let chain = Self {
            pi,
            trans,
            constraint,
        };
        chain.validate()?;
        Ok(chain)
    }

    /// Uniform initial distribution and rows, for unconstrained chains.
    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("chain needs at least one state"));
        }
        let p = 1.0 / k as f64;
        Self::new(vec![p; k], Array2::from_elem((k, k), p), Constraint::Full)
    }

    pub fn n_states(&self) -> usize {
        self.pi.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.pi.len();
        if k == 0 {
            return Err(Error::invalid("chain needs at least one state"));
        }
        if self.trans.dim() != (k, k) {
            return Err(Error::invalid(format!(
                "transition matrix is {:?}, expected {k}x{k}",
                self.trans.dim()
            )));
        }
        let tol = 1e-12 * k as f64;
        if self.pi.iter().any(|v| !(*v >= 0.0)) || (self.pi.iter().sum::<f64>() - 1.0).abs() > tol {
            return Err(Error::invalid("initial distribution is not a probability vector"));
        }
        for (r, row) in self.trans.rows().into_iter().enumerate() {
            if row.iter().any(|v| !(*v >= 0.0)) || (row.sum() - 1.0).abs() > tol {
                return Err(Error::invalid(format!("transition row {r} is not stochastic")));
            }
            for (c, &v) in row.iter().enumerate() {
                if v != 0.0 && !self.constraint.allows(r, c) {
                    return Err(Error::invalid(format!(
                        "transition {r}->{c} violates the left-right constraint"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Left-right chain started in state 0 with 0.5 self/next transitions and an
/// absorbing last state.
pub fn make_leftright_chain(k: usize) -> Result<ChainParams> {
    if k == 0 {
        return Err(Error::invalid("chain needs at least one state"));
    }
    let mut pi = vec![0.0; k];
    pi[0] = 1.0;
    let mut trans = Array2::zeros((k, k));
    for r in 0..k - 1 {
        trans[[r, r]] = 0.5;
        trans[[r, r + 1]] = 0.5;
    }
    trans[[k - 1, k - 1]] = 1.0;
    ChainParams::new(pi, trans, Constraint::LeftRight)
}

/// Per-observation log emission densities, `m x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionTable {
    pub logdens: Array2<f64>,
}

impl EmissionTable {
    pub fn new(logdens: Array2<f64>) -> Self {
        Self { logdens }
    }

    /// Gaussian log densities of `x` given per-state means (`m x K`) and
    /// variances.
    pub fn gaussian(x: ArrayView1<'_, f64>, means: &Array2<f64>, sigma2: &[f64]) -> Self {
        let (m, k) = means.dim();
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let consts: Vec<f64> = sigma2.iter().map(|s| -0.5 * (ln_2pi + s.ln())).collect();
        let logdens = Array2::from_shape_fn((m, k), |(j, s)| {
            let r = x[j] - means[[j, s]];
            consts[s] - 0.5 * r * r / sigma2[s]
        });
        Self { logdens }
    }

    pub fn len(&self) -> usize {
        self.logdens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.logdens.nrows() == 0
    }
}

/// Smoothing posteriors of one sequence under one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPosteriors {
    /// `gamma[[j, k]] = p(z_j = k | x)`.
    pub gamma: Array2<f64>,
    /// `xi[[j, k, l]] = p(z_j = k, z_{j+1} = l | x)` for j in 0..m-1.
    pub xi: Array3<f64>,
    /// log p(x), in nats.
    pub loglik: f64,
    /// Set when no state path has positive probability.
    pub degenerate: bool,
}

fn check_dims(chain: &ChainParams, em: &EmissionTable) -> Result<(usize, usize)> {
    let (m, k) = em.logdens.dim();
    if k != chain.n_states() {
        return Err(Error::invalid(format!(
            "emission table has {k} states, chain has {}",
            chain.n_states()
        )));
    }
    if m == 0 {
        return Err(Error::invalid("empty sequence"));
    }
    Ok((m, k))
}

/// Emission factors for one step, shifted by the largest log density among
/// states with positive predicted mass. States with no predicted mass get a
/// zero factor. Returns the shift.
fn step_factors(row: ArrayView1<'_, f64>, pred: &[f64], out: &mut [f64]) -> f64 {
    let shift = row
        .iter()
        .zip(pred)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        out.iter_mut().for_each(|v| *v = 0.0);
        return 0.0;
    }
    for ((o, &l), &p) in out.iter_mut().zip(row.iter()).zip(pred) {
        let d = (l - shift).max(LOG_FLOOR);
        *o = if p > 0.0 && l > f64::NEG_INFINITY { d.exp() } else { 0.0 };
    }
    shift
}

fn degenerate_posteriors(m: usize, k: usize) -> ChainPosteriors {
    let u = 1.0 / k as f64;
    ChainPosteriors {
        gamma: Array2::from_elem((m, k), u),
        xi: Array3::from_elem((m.saturating_sub(1), k, k), u * u),
        loglik: f64::NEG_INFINITY,
        degenerate: true,
    }
}

/// Scaled forward-backward recursions.
pub fn forward_backward(chain: &ChainParams, emissions: &EmissionTable) -> Result<ChainPosteriors> {
    let (m, k) = check_dims(chain, emissions)?;
    let trans = &chain.trans;

    let mut dens = Array2::<f64>::zeros((m, k));
    let mut alpha = Array2::<f64>::zeros((m, k));
    let mut c = vec![0.0; m];
    let mut pred = chain.pi.clone();
    let mut loglik = 0.0;
    for j in 0..m {
        if j > 0 {
            for l in 0..k {
                pred[l] = (0..k).map(|s| alpha[[j - 1, s]] * trans[[s, l]]).sum();
            }
        }
        let shift = step_factors(
            emissions.logdens.row(j),
            &pred,
            dens.row_mut(j).as_slice_mut().expect("standard layout"),
        );
        for l in 0..k {
            alpha[[j, l]] = pred[l] * dens[[j, l]];
        }
        let norm: f64 = alpha.row(j).sum();
        if !(norm > 0.0) || !norm.is_finite() {
            return Ok(degenerate_posteriors(m, k));
        }
        c[j] = norm;
        alpha.row_mut(j).mapv_inplace(|v| v / norm);
        loglik += shift + norm.ln();
    }

    // Backward pass with the same normalisers.
    let mut beta = Array2::<f64>::zeros((m, k));
    beta.row_mut(m - 1).fill(1.0);
    let mut tmp = vec![0.0; k];
    for j in (0..m - 1).rev() {
        for l in 0..k {
            tmp[l] = dens[[j + 1, l]] * beta[[j + 1, l]];
        }
        for s in 0..k {
            let mut acc = 0.0;
            for l in 0..k {
                acc += trans[[s, l]] * tmp[l];
            }
            beta[[j, s]] = acc / c[j + 1];
        }
    }

    let mut gamma = &alpha * &beta;
    for mut row in gamma.rows_mut() {
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }

    let mut xi = Array3::<f64>::zeros((m.saturating_sub(1), k, k));
    for j in 0..m.saturating_sub(1) {
        let mut z = 0.0;
        for s in 0..k {
            let a = alpha[[j, s]];
            if a == 0.0 {
                continue;
            }
            for l in 0..k {
                let v = a * trans[[s, l]] * dens[[j + 1, l]] * beta[[j + 1, l]];
                xi[[j, s, l]] = v;
                z += v;
            }
        }
        xi.index_axis_mut(ndarray::Axis(0), j)
            .mapv_inplace(|v| v / z);
    }

    Ok(ChainPosteriors {
        gamma,
        xi,
        loglik,
        degenerate: false,
    })
}

/// Upper bound on the number of enumerated paths.
pub const BRUTE_FORCE_LIMIT: u64 = 10_000_000;

/// Likelihood and state marginals by enumerating every state sequence.
/// Independent of [`forward_backward`]; used as a test oracle.
pub fn brute_force_loglik(chain: &ChainParams, emissions: &EmissionTable) -> Result<(f64, Array2<f64>)> {
    let (m, k) = check_dims(chain, emissions)?;
    let too_large = Error::TooLarge {
        states: k,
        len: m,
        limit: BRUTE_FORCE_LIMIT,
    };
    let total = (k as u64).checked_pow(m as u32).ok_or(too_large)?;
    if total > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            states: k,
            len: m,
            limit: BRUTE_FORCE_LIMIT,
        });
    }

    let mut path_logs = Vec::with_capacity(total as usize);
    let mut path = vec![0usize; m];
    for code in 0..total {
        let mut c = code;
        for j in (0..m).rev() {
            path[j] = (c % k as u64) as usize;
            c /= k as u64;
        }
        let mut lp = chain.pi[path[0]].ln() + emissions.logdens[[0, path[0]]];
        for j in 1..m {
            lp += chain.trans[[path[j - 1], path[j]]].ln() + emissions.logdens[[j, path[j]]];
        }
        path_logs.push(lp);
    }
    let max = path_logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Ok((f64::NEG_INFINITY, Array2::from_elem((m, k), 1.0 / k as f64)));
    }
    let mut total_mass = 0.0;
    let mut gamma = Array2::<f64>::zeros((m, k));
    for (code, lp) in path_logs.iter().enumerate() {
        let w = (lp - max).exp();
        total_mass += w;
        let mut c = code as u64;
        for j in (0..m).rev() {
            gamma[[j, (c % k as u64) as usize]] += w;
            c /= k as u64;
        }
    }
    gamma.mapv_inplace(|v| v / total_mass);
    Ok((max + total_mass.ln(), gamma))
}

/// Most probable state path. Ties go to the lowest state index.
pub fn viterbi(chain: &ChainParams, emissions: &EmissionTable) -> Result<Vec<usize>> {
    let (m, k) = check_dims(chain, emissions)?;
    let log_trans = chain.trans.mapv(f64::ln);
    let mut delta: Vec<f64> = (0..k)
        .map(|s| chain.pi[s].ln() + emissions.logdens[[0, s]])
        .collect();
    let mut back = Array2::<usize>::zeros((m, k));
    let mut next = vec![0.0; k];
    for j in 1..m {
        for l in 0..k {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for s in 0..k {
                let v = delta[s] + log_trans[[s, l]];
                if v > best {
                    best = v;
                    arg = s;
                }
            }
            next[l] = best + emissions.logdens[[j, l]];
            back[[j, l]] = arg;
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut last = 0;
    let mut best = f64::NEG_INFINITY;
    for (s, &v) in delta.iter().enumerate() {
        if v > best {
            best = v;
            last = s;
        }
    }
    if !best.is_finite() {
        return Err(Error::ImpossiblePath);
    }
    let mut path = vec![0; m];
    path[m - 1] = last;
    for j in (1..m).rev() {
        path[j - 1] = back[[j, path[j]]];
    }
    Ok(path)
}
