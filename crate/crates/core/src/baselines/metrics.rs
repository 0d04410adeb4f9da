use ndarray::Array2;

use crate::error::{Error, Result};
use crate::mixhmmr::Dataset;

/// Largest label count handled by the exhaustive permutation search.
pub const MAX_MATCHED_LABELS: usize = 8;

fn for_each_permutation(items: &mut [usize], k: usize, f: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        f(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        for_each_permutation(items, k + 1, f);
        items.swap(k, i);
    }
}

/// Fraction of curves misassigned under the best one-to-one matching of
/// predicted to true labels.
pub fn misclassification_rate(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predicted labels vs {} true labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("no labels to compare"));
    }
    let l = pred.iter().chain(truth).copied().max().unwrap_or(0) + 1;
    if l > MAX_MATCHED_LABELS {
        return Err(Error::invalid(format!(
            "{l} labels exceed the matching limit of {MAX_MATCHED_LABELS}"
        )));
    }
    let mut confusion = vec![vec![0usize; l]; l];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[p][t] += 1;
    }
    let mut best = 0;
    let mut perm: Vec<usize> = (0..l).collect();
    for_each_permutation(&mut perm, 0, &mut |perm| {
        let hits: usize = (0..l).map(|p| confusion[p][perm[p]]).sum();
        best = best.max(hits);
    });
    Ok((pred.len() - best) as f64 / pred.len() as f64)
}

/// Sum over curves of the squared distance to the mean curve of the
/// assigned cluster.
pub fn intra_cluster_inertia(data: &Dataset, labels: &[usize], mean_curves: &Array2<f64>) -> Result<f64> {
    if labels.len() != data.n() {
        return Err(Error::invalid(format!("{} labels for {} curves", labels.len(), data.n())));
    }
    if mean_curves.ncols() != data.m() {
        return Err(Error::invalid("mean curves and data have different lengths"));
    }
    let mut total = 0.0;
    for (i, &g) in labels.iter().enumerate() {
        if g >= mean_curves.nrows() {
            return Err(Error::invalid(format!("label {g} has no mean curve")));
        }
        total += data
            .curve(i)
            .iter()
            .zip(mean_curves.row(g))
            .map(|(x, c)| (x - c) * (x - c))
            .sum::<f64>();
    }
    Ok(total)
}
