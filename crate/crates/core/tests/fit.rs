mod common;

use common::{assert_close, random_dataset, random_params, rng, step_params};
use ndarray::Array2;

use regimeclust::baselines::{fit_regression_mixture, misclassification_rate, run_regression_mixture, RegMixParams};
use regimeclust::datasets::gen_piecewise_sim;
use regimeclust::hmm::Constraint;
use regimeclust::mixhmmr::{
    e_step, fit_em, free_parameters, init_params, mean_curves, run_em, sample, Dataset, InitStrategy,
    ModelConfig,
};
use regimeclust::numcore::{build_design_matrix, polyval, TimeGrid};
use regimeclust::Error;

#[test]
fn one_cluster_one_regime_is_gaussian_regression() {
    let mut r = rng(2);
    let data = random_dataset(&mut r, 4, 30);
    let config = ModelConfig::new(1, 1, 2).with_restarts(2);
    let fit = fit_em(&data, &config).unwrap();

    // Pooled OLS over all curves, then the Gaussian log-likelihood at the
    // maximum-likelihood variance.
    let design = build_design_matrix(&data.grid, 2).unwrap();
    let rows = design.rows();
    let y: Vec<f64> = (0..data.m()).map(|j| data.curves.column(j).mean().unwrap()).collect();
    let w = vec![data.n() as f64; data.m()];
    let beta = regimeclust::numcore::solve_wls(rows, &y, &w).unwrap().beta;
    let mu = polyval(&beta, &design).unwrap();
    let sse: f64 = data
        .curves
        .rows()
        .into_iter()
        .map(|c| c.iter().zip(mu.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    let nm = (data.n() * data.m()) as f64;
    let s2 = sse / nm;
    let expected = -0.5 * nm * ((2.0 * std::f64::consts::PI * s2).ln() + 1.0);
    assert_close(fit.loglik, expected, 1e-10, "loglik");
    assert!(fit.iterations <= 2, "{} iterations", fit.iterations);
    let curve = fit.mean_curves.row(0);
    for j in 0..data.m() {
        assert_close(curve[j], mu[j], 1e-10, "mean curve");
    }
}

#[test]
fn labels_are_the_argmax_of_tau() {
    let data = gen_piecewise_sim(30, 4).unwrap();
    let fit = fit_em(&data, &ModelConfig::new(3, 3, 0).with_restarts(3)).unwrap();
    for (i, &l) in fit.labels.iter().enumerate() {
        let row = fit.posteriors.tau.row(i);
        assert!(row.iter().all(|&t| t <= row[l]));
    }
    assert_eq!(fit.loglik, *fit.loglik_trace.last().unwrap());
    assert_eq!(fit.nu, free_parameters(3, 3, 0));
}

#[test]
fn segmentations_follow_left_right_order() {
    let data = gen_piecewise_sim(30, 8).unwrap();
    let fit = fit_em(&data, &ModelConfig::new(3, 3, 0).with_restarts(2)).unwrap();
    for row in fit.segmentations.rows() {
        assert_eq!(row[0], 0);
        for j in 1..row.len() {
            assert!(row[j] == row[j - 1] || row[j] == row[j - 1] + 1);
        }
    }
}

#[test]
fn fits_are_deterministic_per_seed() {
    let data = gen_piecewise_sim(24, 1).unwrap();
    let config = ModelConfig::new(3, 2, 1).with_restarts(3).with_seed(99);
    let a = fit_em(&data, &config).unwrap();
    let b = fit_em(&data, &config).unwrap();
    assert_eq!(a.loglik_trace, b.loglik_trace);
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.params, b.params);
}

#[test]
fn adding_restarts_keeps_earlier_restarts() {
    let data = gen_piecewise_sim(24, 2).unwrap();
    let few = fit_em(&data, &ModelConfig::new(2, 2, 0).with_restarts(2).with_seed(5)).unwrap();
    let more = fit_em(&data, &ModelConfig::new(2, 2, 0).with_restarts(4).with_seed(5)).unwrap();
    assert_eq!(few.restart_logliks[..], more.restart_logliks[..2]);
}

#[test]
fn permuting_an_init_permutes_the_fit() {
    let mut r = rng(14);
    let truth = random_params(&mut r, 3, 2, 1, Constraint::LeftRight);
    let grid = TimeGrid::linspace(0.0, 1.0, 20).unwrap();
    let data = sample(&truth, &grid, 30, 3).unwrap();
    let design = build_design_matrix(&grid, 1).unwrap();
    let config = ModelConfig::new(3, 2, 1);
    let init = init_params(&data, &config, 17).unwrap();
    let perm = [2, 0, 1];
    let a = run_em(&data, &design, init.clone(), &config, 1).unwrap();
    let b = run_em(&data, &design, init.permuted(&perm), &config, 1).unwrap();
    assert_eq!(a.iterations, b.iterations);
    for (x, y) in a.loglik_trace.iter().zip(&b.loglik_trace) {
        assert_close(*x, *y, 1e-10, "trace");
    }
    let pa = a.params.permuted(&perm);
    for c in 0..3 {
        assert_close(pa.weights[c], b.params.weights[c], 1e-9, "weights");
        for k in 0..2 {
            for (x, y) in pa.betas[c][k].iter().zip(&b.params.betas[c][k]) {
                assert_close(*x, *y, 1e-8, "betas");
            }
        }
    }
    let la = a.posteriors.map_labels();
    let lb = b.posteriors.map_labels();
    for i in 0..data.n() {
        assert_eq!(perm[lb[i]], la[i]);
    }
}

#[test]
fn one_regime_matches_the_regression_mixture() {
    for seed in 0..3 {
        let mut r = rng(100 + seed);
        let data = random_dataset(&mut r, 20, 15);
        let design = build_design_matrix(&data.grid, 2).unwrap();
        let config = ModelConfig::new(2, 1, 2);
        let init = init_params(&data, &config, seed).unwrap();
        let hmm = run_em(&data, &design, init.clone(), &config, 0).unwrap();
        let reg = run_regression_mixture(&data, &design, RegMixParams::from_single_regime(&init).unwrap(), &config, 0)
            .unwrap();
        assert_eq!(hmm.loglik_trace.len(), reg.loglik_trace.len());
        for (a, b) in hmm.loglik_trace.iter().zip(&reg.loglik_trace) {
            assert!((a - b).abs() <= 1e-9 * a.abs(), "{a} vs {b}");
        }
    }
}

#[test]
fn mean_curve_of_one_hot_segments_is_piecewise() {
    let params = step_params(&[vec![1.0, 5.0, -2.0]], 1e-6);
    let grid = TimeGrid::linspace(0.0, 1.0, 30).unwrap();
    let mut curves = Array2::zeros((2, 30));
    for i in 0..2 {
        for j in 0..30 {
            curves[[i, j]] = [1.0, 5.0, -2.0][j / 10];
        }
    }
    let data = Dataset::new(curves, grid).unwrap();
    let design = build_design_matrix(&data.grid, 0).unwrap();
    let post = e_step(&data, &params, &design).unwrap();
    let mc = mean_curves(&post, &params, &design);
    for j in 0..30 {
        assert_close(mc.curves[[0, j]], [1.0, 5.0, -2.0][j / 10], 1e-9, "mean");
    }
}

#[test]
fn mean_curves_are_within_regime_ranges() {
    let mut r = rng(41);
    let data = random_dataset(&mut r, 10, 12);
    let params = random_params(&mut r, 2, 3, 2, Constraint::Full);
    let design = build_design_matrix(&data.grid, 2).unwrap();
    let post = e_step(&data, &params, &design).unwrap();
    let mc = mean_curves(&post, &params, &design);
    for g in 0..2 {
        let means = params.regime_means(g, &design);
        for j in 0..12 {
            let row = means.row(j);
            let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let v = mc.curves[[g, j]];
            assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
        }
    }
}

#[test]
fn too_few_curves_is_an_input_error() {
    let mut r = rng(1);
    let data = random_dataset(&mut r, 2, 10);
    assert!(matches!(fit_em(&data, &ModelConfig::new(3, 1, 0)), Err(Error::InvalidInput(_))));
}

#[test]
fn random_partition_strategy_is_available() {
    let data = gen_piecewise_sim(30, 0).unwrap();
    let config = ModelConfig::new(3, 3, 0).with_restarts(2).with_init(InitStrategy::RandomPartition);
    let fit = fit_em(&data, &config).unwrap();
    assert_eq!(fit.restart_logliks.len(), 2);
}

#[test]
fn regression_mixture_separates_distinct_trends() {
    let grid = TimeGrid::linspace(0.0, 1.0, 25).unwrap();
    let mut r = rng(6);
    let truth: Vec<usize> = (0..30).map(|i| i % 2).collect();
    let curves = Array2::from_shape_fn((30, 25), |(i, j)| {
        let t = j as f64 / 24.0;
        let base = if truth[i] == 0 { 2.0 * t } else { 1.0 - t * t };
        base + 0.1 * rand::Rng::random_range(&mut r, -1.0..1.0)
    });
    let data = Dataset::new(curves, grid).unwrap();
    let fit = fit_regression_mixture(&data, 2, 2, &ModelConfig::new(2, 1, 2).with_restarts(3)).unwrap();
    assert_eq!(misclassification_rate(&fit.labels, &truth).unwrap(), 0.0);
    assert_eq!(fit.nu, 1 + 2 * 3 + 2);
}
