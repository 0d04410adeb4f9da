//! Polynomial design matrices and small weighted least-squares solves.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strictly increasing sample times shared by every curve of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid(format!(
                "time grid needs at least 2 points, got {}",
                points.len()
            )));
        }
        if let Some(j) = points.iter().position(|t| !t.is_finite()) {
            return Err(Error::invalid(format!("time point {j} is not finite")));
        }
        if let Some(j) = points.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "time grid not strictly increasing at index {}",
                j + 1
            )));
        }
        Ok(Self { points })
    }

    /// `m` evenly spaced points from `start` to `end` inclusive.
    pub fn linspace(start: f64, end: f64, m: usize) -> Result<Self> {
        if m < 2 {
            return Self::new(vec![start; m]);
        }
        let step = (end - start) / (m - 1) as f64;
        Self::new((0..m).map(|j| start + step * j as f64).collect())
    }

    /// The grid 0, 1, ..., m-1.
    pub fn unit(m: usize) -> Result<Self> {
        Self::new((0..m).map(|j| j as f64).collect())
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn rescale(&self) -> TimeRescale {
        let first = self.points[0];
        let last = self.points[self.points.len() - 1];
        TimeRescale {
            offset: first,
            scale: last - first,
        }
    }
}

/// Affine map `t -> (t - offset) / scale` onto [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeRescale {
    pub offset: f64,
    pub scale: f64,
}

impl TimeRescale {
    pub fn apply(&self, t: f64) -> f64 {
        (t - self.offset) / self.scale
    }
}

/// Vandermonde matrix over the rescaled grid: row j is (1, s_j, ..., s_j^p).
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    rows: Array2<f64>,
    degree: usize,
    rescale: TimeRescale,
}

impl DesignMatrix {
    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn row(&self, j: usize) -> ArrayView1<'_, f64> {
        self.rows.row(j)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of coefficients, p + 1.
    pub fn ncoef(&self) -> usize {
        self.degree + 1
    }

    /// Number of time points.
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn rescale(&self) -> TimeRescale {
        self.rescale
    }
}

pub fn build_design_matrix(grid: &TimeGrid, degree: usize) -> Result<DesignMatrix> {
    if grid.len() < 2 {
        return Err(Error::invalid("design matrix needs a grid of at least 2 points"));
    }
    let m = grid.len();
    if m < degree + 1 {
        log::warn!("polynomial degree {degree} with only {m} time points; normal equations will be singular");
    }
    let rescale = grid.rescale();
    let mut rows = Array2::<f64>::zeros((m, degree + 1));
    for (j, &t) in grid.points().iter().enumerate() {
        let s = rescale.apply(t);
        let mut v = 1.0;
        for k in 0..=degree {
            rows[[j, k]] = v;
            v *= s;
        }
    }
    Ok(DesignMatrix {
        rows,
        degree,
        rescale,
    })
}

/// Evaluates the polynomial `beta` at every row of `x`.
pub fn polyval(beta: &[f64], x: &DesignMatrix) -> Result<Array1<f64>> {
    if beta.len() != x.ncoef() {
        return Err(Error::invalid(format!(
            "coefficient vector has length {}, design has {} columns",
            beta.len(),
            x.ncoef()
        )));
    }
    Ok(x.rows.dot(&ArrayView1::from(beta)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WlsSolution {
    pub beta: Vec<f64>,
    /// True when the normal matrix was singular and a ridge term was added.
    pub ridge: bool,
}

/// Accumulated weighted normal equations `(X^T W X) beta = X^T W y`.
///
/// Rows can be pushed one at a time, so stacked systems (one block per
/// curve) are solved without materialising the stacked matrix.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    dim: usize,
    lhs: Vec<f64>,
    rhs: Vec<f64>,
    total_weight: f64,
}

impl NormalEquations {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            lhs: vec![0.0; dim * dim],
            rhs: vec![0.0; dim],
            total_weight: 0.0,
        }
    }

    pub fn push(&mut self, x: ArrayView1<'_, f64>, y: f64, w: f64) {
        debug_assert_eq!(x.len(), self.dim);
        if w == 0.0 {
            return;
        }
        let d = self.dim;
        for a in 0..d {
            let wa = w * x[a];
            self.rhs[a] += wa * y;
            for b in 0..=a {
                self.lhs[a * d + b] += wa * x[b];
            }
        }
        self.total_weight += w;
    }

    /// Adds a row from pre-aggregated moments: total weight `w` and weighted
    /// response sum `wy` of all observations sharing the covariates `x`.
    pub fn push_moments(&mut self, x: ArrayView1<'_, f64>, wy: f64, w: f64) {
        debug_assert_eq!(x.len(), self.dim);
        if w == 0.0 {
            return;
        }
        let d = self.dim;
        for a in 0..d {
            self.rhs[a] += x[a] * wy;
            let wa = w * x[a];
            for b in 0..=a {
                self.lhs[a * d + b] += wa * x[b];
            }
        }
        self.total_weight += w;
    }

    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    pub fn solve(&self) -> Result<WlsSolution> {
        self.solve_rhs(&self.rhs)
    }

    fn solve_rhs(&self, rhs: &[f64]) -> Result<WlsSolution> {
        let d = self.dim;
        if !(self.total_weight > 0.0) {
            return Err(Error::DegenerateWeights(
                "weights sum to zero".to_string(),
            ));
        }
        let mut lhs = self.lhs.clone();
        for a in 0..d {
            for b in 0..a {
                lhs[b * d + a] = lhs[a * d + b];
            }
        }
        // Jacobi equilibration: columns of high powers have small norms.
        let scale: Vec<f64> = (0..d)
            .map(|a| {
                let v = lhs[a * d + a];
                if v > 0.0 {
                    1.0 / v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        for a in 0..d {
            for b in 0..d {
                lhs[a * d + b] *= scale[a] * scale[b];
            }
        }
        let rhs: Vec<f64> = (0..d).map(|a| rhs[a] * scale[a]).collect();

        let mut ridge = false;
        let trace: f64 = (0..d).map(|a| lhs[a * d + a]).sum();
        let mut lambda = 1e-8 * trace.max(f64::MIN_POSITIVE) / d as f64;
        let mut z = cholesky_solve(&lhs, &rhs, d);
        for _ in 0..8 {
            if z.is_some() {
                break;
            }
            ridge = true;
            let mut reg = lhs.clone();
            for a in 0..d {
                reg[a * d + a] += lambda;
            }
            z = cholesky_solve(&reg, &rhs, d);
            lambda *= 100.0;
        }
        let z = z.ok_or_else(|| {
            Error::DegenerateWeights("normal equations could not be regularised".to_string())
        })?;
        Ok(WlsSolution {
            beta: z.iter().zip(&scale).map(|(v, s)| v * s).collect(),
            ridge,
        })
    }
}

/// Solves `a z = b` for a symmetric positive definite `a` (row-major, d x d).
/// Returns `None` if a pivot is not safely positive.
fn cholesky_solve(a: &[f64], b: &[f64], d: usize) -> Option<Vec<f64>> {
    let max_diag = (0..d).map(|i| a[i * d + i]).fold(0.0_f64, f64::max);
    let tiny = max_diag * f64::EPSILON * d as f64;
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > tiny) || !s.is_finite() {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * y[k];
        }
        y[i] = s / l[i * d + i];
    }
    let mut z = vec![0.0; d];
    for i in (0..d).rev() {
        let mut s = y[i];
        for k in i + 1..d {
            s -= l[k * d + i] * z[k];
        }
        z[i] = s / l[i * d + i];
    }
    Some(z)
}

/// Weighted least squares: minimises sum_i w_i (y_i - beta . x_i)^2 over the
/// rows of `x`.
pub fn solve_wls(x: ArrayView2<'_, f64>, y: &[f64], w: &[f64]) -> Result<WlsSolution> {
    let n = x.nrows();
    if y.len() != n || w.len() != n {
        return Err(Error::invalid(format!(
            "wls dimensions: {n} rows, {} responses, {} weights",
            y.len(),
            w.len()
        )));
    }
    if let Some(i) = w.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!("weight {i} is negative or not finite")));
    }
    let mut ne = NormalEquations::new(x.ncols());
    for i in 0..n {
        ne.push(x.row(i), y[i], w[i]);
    }
    let mut sol = ne.solve()?;
    if sol.ridge {
        return Ok(sol);
    }
    // One step of iterative refinement against the exact gradient.
    let d = x.ncols();
    let mut grad = vec![0.0; d];
    for i in 0..n {
        if w[i] == 0.0 {
            continue;
        }
        let row = x.row(i);
        let r = y[i] - row.iter().zip(&sol.beta).map(|(a, b)| a * b).sum::<f64>();
        for k in 0..d {
            grad[k] += w[i] * r * row[k];
        }
    }
    let delta = ne.solve_rhs(&grad)?;
    for k in 0..d {
        sol.beta[k] += delta.beta[k];
    }
    Ok(sol)
}
