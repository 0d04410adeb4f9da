use serde::{Deserialize, Serialize};

use super::em::fit_em;
use super::summary::{bic_value, free_parameters, free_parameters_exact};
use super::{Dataset, ModelConfig};
use crate::error::{Error, Result};

/// Model-selection grid: G in 1..=g_max, K in 1..=k_max, p in p_min..=p_max.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionGrid {
    pub g_max: usize,
    pub k_max: usize,
    pub p_min: usize,
    pub p_max: usize,
    pub max_cells: usize,
}

impl SelectionGrid {
    pub fn cells(&self) -> usize {
        self.g_max * self.k_max * (self.p_max + 1).saturating_sub(self.p_min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub clusters: usize,
    pub regimes: usize,
    pub degree: usize,
    pub loglik: f64,
    pub nu: usize,
    pub nu_exact: usize,
    pub bic: f64,
    pub bic_exact: f64,
    pub best: bool,
}

/// Fits every cell of `grid` and flags the row with the largest BIC. Cells
/// whose fit fails are reported with a log-likelihood of negative infinity.
pub fn select_model(data: &Dataset, grid: &SelectionGrid, base: &ModelConfig) -> Result<Vec<SelectionRow>> {
    if grid.g_max == 0 || grid.k_max == 0 || grid.p_min > grid.p_max {
        return Err(Error::invalid("empty selection grid"));
    }
    if grid.cells() > grid.max_cells {
        return Err(Error::invalid(format!(
            "selection grid has {} cells, more than the limit of {}",
            grid.cells(),
            grid.max_cells
        )));
    }
    if grid.g_max > data.n() {
        return Err(Error::invalid(format!(
            "{} curves cannot fill {} clusters",
            data.n(),
            grid.g_max
        )));
    }
    let n = data.n();
    let mut rows = Vec::with_capacity(grid.cells());
    for g in 1..=grid.g_max {
        for k in 1..=grid.k_max {
            for p in grid.p_min..=grid.p_max {
                let config = ModelConfig {
                    clusters: g,
                    regimes: k,
                    degree: p,
                    ..base.clone()
                };
                let loglik = match fit_em(data, &config) {
                    Ok(fit) => fit.loglik,
                    Err(e) => {
                        log::warn!("selection cell G={g} K={k} p={p} failed: {e}");
                        f64::NEG_INFINITY
                    }
                };
                let nu = free_parameters(g, k, p);
                let nu_exact = free_parameters_exact(g, k, p, base.constraint);
                rows.push(SelectionRow {
                    clusters: g,
                    regimes: k,
                    degree: p,
                    loglik,
                    nu,
                    nu_exact,
                    bic: bic_value(loglik, nu, n),
                    bic_exact: bic_value(loglik, nu_exact, n),
                    best: false,
                });
            }
        }
    }
    let mut best = 0;
    for (r, row) in rows.iter().enumerate() {
        if row.bic > rows[best].bic {
            best = r;
        }
    }
    rows[best].best = true;
    Ok(rows)
}
