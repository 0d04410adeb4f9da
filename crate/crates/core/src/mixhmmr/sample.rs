use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, ModelParams};
use crate::error::{Error, Result};
use crate::numcore::{build_design_matrix, TimeGrid};
use crate::rng::stream;

fn draw_categorical(rng: &mut impl Rng, probs: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, p) in probs.enumerate() {
        if p > 0.0 {
            last = k;
        }
        acc += p;
        if u < acc {
            return k;
        }
    }
    last
}

/// Draws `n` curves from the generative model: a cluster per curve, a state
/// path from that cluster's chain, then Gaussian noise around the active
/// regime polynomial. Latent labels and states are kept on the dataset.
pub fn sample(params: &ModelParams, grid: &TimeGrid, n: usize, seed: u64) -> Result<Dataset> {
    params.validate()?;
    if n == 0 {
        return Err(Error::invalid("cannot sample zero curves"));
    }
    let design = build_design_matrix(grid, params.degree())?;
    let m = grid.len();
    let means: Vec<Array2<f64>> = (0..params.clusters())
        .map(|g| params.regime_means(g, &design))
        .collect();
    let mut rng = stream(seed, "sample");
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut curves = Array2::<f64>::zeros((n, m));
    let mut states = Array2::<usize>::zeros((n, m));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let g = draw_categorical(&mut rng, params.weights.iter().copied());
        let chain = &params.chains[g];
        let mut z = draw_categorical(&mut rng, chain.pi.iter().copied());
        for j in 0..m {
            if j > 0 {
                z = draw_categorical(&mut rng, chain.trans.row(z).iter().copied());
            }
            states[[i, j]] = z;
            let eps: f64 = std_normal.sample(&mut rng);
            curves[[i, j]] = means[g][[j, z]] + params.sigma2[g][z].sqrt() * eps;
        }
        labels.push(g);
    }
    let mut data = Dataset::new(curves, grid.clone())?.with_labels(labels)?;
    data.truth_states = Some(states);
    Ok(data)
}
