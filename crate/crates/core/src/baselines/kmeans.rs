//! Lloyd's k-means on the raw curve vectors.

use ndarray::{Array2, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};
use crate::mixhmmr::{Dataset, ModelConfig};
use crate::par::map_indexed;
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    /// `G x m`.
    pub centroids: Array2<f64>,
    /// Within-cluster sum of squares.
    pub inertia: f64,
    /// Inertia after each assignment step of the winning run.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    pub restart: usize,
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding.
fn seed_centroids(data: &Dataset, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    let n = data.n();
    let mut centroids = Array2::zeros((k, data.m()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&data.curve(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.curve(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&data.curve(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(data.curve(i), centroids.row(c)));
        }
    }
    centroids
}

fn assign(data: &Dataset, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    let k = centroids.nrows();
    (0..data.n())
        .map(|i| {
            let mut best = (0, f64::INFINITY);
            for c in 0..k {
                let d = sq_dist(data.curve(i), centroids.row(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

fn lloyd(data: &Dataset, k: usize, max_iter: usize, rng: &mut impl Rng) -> KMeansResult {
    let (n, m) = (data.n(), data.m());
    let mut centroids = seed_centroids(data, k, rng);
    let (mut labels, mut dist) = assign(data, &centroids);
    let mut trace = vec![dist.iter().sum::<f64>()];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut sums = Array2::<f64>::zeros((k, m));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            sums.row_mut(labels[i]).scaled_add(1.0, &data.curve(i));
            counts[labels[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                // Re-seed from the curve farthest from its centroid.
                let far = (0..n)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("non-empty dataset");
                centroids.row_mut(c).assign(&data.curve(far));
                dist[far] = 0.0;
            }
        }
        let (next, next_dist) = assign(data, &centroids);
        trace.push(next_dist.iter().sum());
        let changed = next != labels;
        labels = next;
        dist = next_dist;
        if !changed {
            break;
        }
    }
    KMeansResult {
        labels,
        centroids,
        inertia: dist.iter().sum(),
        inertia_trace: trace,
        iterations,
        restart: 0,
    }
}

/// Best of `config.n_init` k-means++ / Lloyd runs by inertia.
pub fn kmeans_curves(data: &Dataset, clusters: usize, config: &ModelConfig) -> Result<KMeansResult> {
    if clusters == 0 || data.n() < clusters {
        return Err(Error::invalid(format!("{} curves cannot fill {clusters} clusters", data.n())));
    }
    let runs = map_indexed(config.n_init.max(1), |r| {
        let mut rng = stream(config.seed, &format!("kmeans/{r}"));
        lloyd(data, clusters, config.max_iter, &mut rng)
    });
    let mut best: Option<KMeansResult> = None;
    for (r, mut run) in runs.into_iter().enumerate() {
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            run.restart = r;
            best = Some(run);
        }
    }
    Ok(best.expect("at least one run"))
}
