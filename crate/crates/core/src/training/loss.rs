use std::collections::BTreeSet;

use crate::autodiff::{Gradients, PROB_FLOOR};
use crate::model::{ModelParams, TensorKind};
use crate::scalar::Scalar;

/// Negative log-likelihood summed over supervised nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataLoss {
    pub value: f64,
    /// Number of gold probabilities that had to be floored at `PROB_FLOOR`.
    pub clamped: usize,
}

/// `-sum_k log p_k[gold_k] + (lambda / 2) * ||theta||^2` from already
/// computed distributions. The penalty covers non-bias tensors and the
/// embedding rows listed in `rows`.
pub fn compute_loss<T: Scalar>(
    distributions: &[Vec<T>],
    gold: &[usize],
    params: &ModelParams<T>,
    lambda: f64,
    rows: &BTreeSet<usize>,
) -> (f64, DataLoss) {
    let data = negative_log_likelihood(distributions, gold);
    (data.value + l2_penalty(params, lambda, rows), data)
}

pub fn negative_log_likelihood<T: Scalar>(distributions: &[Vec<T>], gold: &[usize]) -> DataLoss {
    assert_eq!(distributions.len(), gold.len(), "one gold label per distribution");
    let mut clamped = 0;
    let value = distributions
        .iter()
        .zip(gold)
        .map(|(d, &y)| {
            let p = d[y].as_f64();
            if p.is_nan() || p < PROB_FLOOR {
                clamped += 1;
                -PROB_FLOOR.ln()
            } else {
                -p.ln()
            }
        })
        .sum();
    DataLoss { value, clamped }
}

/// Tensors subject to L2: every weight matrix, no biases, and only the
/// listed embedding rows.
fn regularized<'a, T: Scalar>(
    params: &'a ModelParams<T>,
    rows: &'a BTreeSet<usize>,
) -> impl Iterator<Item = (usize, &'a [T], Option<usize>)> + 'a {
    params.tensors.iter().enumerate().flat_map(move |(id, t)| {
        let items: Vec<(usize, &[T], Option<usize>)> = match t.kind {
            TensorKind::Bias => Vec::new(),
            TensorKind::Embedding => rows.iter().map(|&r| (id, t.row(r), Some(r))).collect(),
            TensorKind::Recurrent | TensorKind::Gaussian => vec![(id, t.data.as_slice(), None)],
        };
        items
    })
}

pub fn l2_penalty<T: Scalar>(params: &ModelParams<T>, lambda: f64, rows: &BTreeSet<usize>) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let sq: f64 = regularized(params, rows)
        .map(|(_, data, _)| data.iter().map(|x| x.as_f64().powi(2)).sum::<f64>())
        .sum();
    0.5 * lambda * sq
}

/// Adds `lambda * theta` to the matching gradient entries.
pub fn add_l2_gradient<T: Scalar>(
    grads: &mut Gradients<T>,
    params: &ModelParams<T>,
    lambda: f64,
    rows: &BTreeSet<usize>,
) {
    if lambda == 0.0 {
        return;
    }
    let l = T::lit(lambda);
    for (id, data, row) in regularized(params, rows) {
        let slot = match row {
            None => grads.dense.entry(id).or_default(),
            Some(r) => grads.rows.entry((id, r)).or_default(),
        };
        if slot.is_empty() {
            slot.resize(data.len(), T::zero());
        }
        slot.iter_mut().zip(data).for_each(|(g, &x)| *g = *g + l * x);
    }
}
