#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use regimeclust::hmm::{make_leftright_chain, ChainParams, Constraint};
use regimeclust::mixhmmr::{Dataset, ModelParams};
use regimeclust::numcore::{DesignMatrix, TimeGrid};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_simplex(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

pub fn random_chain(rng: &mut impl Rng, k: usize, constraint: Constraint) -> ChainParams {
    match constraint {
        Constraint::LeftRight => {
            let mut a = Array2::zeros((k, k));
            for r in 0..k {
                if r + 1 < k {
                    let stay = rng.random_range(0.3..0.95);
                    a[[r, r]] = stay;
                    a[[r, r + 1]] = 1.0 - stay;
                } else {
                    a[[r, r]] = 1.0;
                }
            }
            let mut pi = vec![0.0; k];
            pi[0] = 1.0;
            ChainParams::new(pi, a, Constraint::LeftRight).unwrap()
        }
        Constraint::Full => {
            let mut a = Array2::zeros((k, k));
            for r in 0..k {
                for (c, v) in random_simplex(rng, k).into_iter().enumerate() {
                    a[[r, c]] = v;
                }
            }
            ChainParams::new(random_simplex(rng, k), a, Constraint::Full).unwrap()
        }
    }
}

pub fn random_params(
    rng: &mut impl Rng,
    clusters: usize,
    regimes: usize,
    degree: usize,
    constraint: Constraint,
) -> ModelParams {
    ModelParams {
        weights: random_simplex(rng, clusters),
        chains: (0..clusters).map(|_| random_chain(rng, regimes, constraint)).collect(),
        betas: (0..clusters)
            .map(|_| {
                (0..regimes)
                    .map(|_| (0..=degree).map(|_| rng.random_range(-3.0..3.0)).collect())
                    .collect()
            })
            .collect(),
        sigma2: (0..clusters)
            .map(|_| (0..regimes).map(|_| rng.random_range(0.3..2.0)).collect())
            .collect(),
    }
}

pub fn random_dataset(rng: &mut impl Rng, n: usize, m: usize) -> Dataset {
    let curves = Array2::from_shape_fn((n, m), |_| rng.random_range(-4.0..4.0));
    Dataset::new(curves, TimeGrid::linspace(0.0, 1.0, m).unwrap()).unwrap()
}

/// Piecewise-constant left-right parameters: cluster g, regime k has level
/// `levels[g][k]`.
pub fn step_params(levels: &[Vec<f64>], sigma2: f64) -> ModelParams {
    let g = levels.len();
    let k = levels[0].len();
    ModelParams {
        weights: vec![1.0 / g as f64; g],
        chains: (0..g).map(|_| make_leftright_chain(k).unwrap()).collect(),
        betas: levels.iter().map(|l| l.iter().map(|v| vec![*v]).collect()).collect(),
        sigma2: vec![vec![sigma2; k]; g],
    }
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean) * (x - mean) / var)
}

/// log p(x | c = g) by summing over every state path.
pub fn enumerate_cluster_loglik(
    x: &[f64],
    params: &ModelParams,
    g: usize,
    design: &DesignMatrix,
) -> f64 {
    let k = params.regimes();
    let m = x.len();
    let chain = &params.chains[g];
    let mean = |j: usize, s: usize| -> f64 {
        design
            .row(j)
            .iter()
            .zip(&params.betas[g][s])
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut total = 0.0;
    let mut path = vec![0usize; m];
    loop {
        let mut p = chain.pi[path[0]];
        let mut logd = log_normal(x[0], mean(0, path[0]), params.sigma2[g][path[0]]);
        for j in 1..m {
            p *= chain.trans[[path[j - 1], path[j]]];
            logd += log_normal(x[j], mean(j, path[j]), params.sigma2[g][path[j]]);
        }
        total += p * logd.exp();
        let mut pos = m;
        loop {
            if pos == 0 {
                return total.ln();
            }
            pos -= 1;
            path[pos] += 1;
            if path[pos] < k {
                break;
            }
            path[pos] = 0;
        }
    }
}

pub fn assert_close(a: f64, b: f64, rel: f64, what: &str) {
    assert!(
        (a - b).abs() <= rel * (1.0 + a.abs().max(b.abs())),
        "{what}: {a} vs {b}"
    );
}
