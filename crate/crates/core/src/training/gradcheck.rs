use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{add_l2_gradient, l2_penalty};
use super::trainer::sentence_gradient;
use crate::embeddings::build_vocab;
use crate::error::Result;
use crate::model::{init_params, FlatTree, ModelConfig, ModelParams};
use crate::treebank::{Corpus, LabeledTree, Task};

/// Step of the fourth-order five-point central difference.
pub const FD_STEP: f64 = 1e-3;
/// Relative errors are measured against `max(|analytic|, |numeric|, floor)`.
pub const REL_ERR_FLOOR: f64 = 1e-6;
/// Pass threshold for the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Tensor name and flat index of the worst entry.
    pub worst: (String, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Parameters with every entry (biases and embeddings included) drawn
/// uniformly from `[-scale, scale]`.
pub fn random_params<R: Rng + ?Sized>(config: ModelConfig, scale: f64, rng: &mut R) -> Result<ModelParams<f64>> {
    let mut params = init_params(config, None, rng)?;
    for t in &mut params.tensors {
        t.data.iter_mut().for_each(|x| *x = rng.random_range(-scale..=scale));
    }
    Ok(params)
}

/// Full objective: summed node NLL plus L2 over the tree's embedding rows.
pub fn objective(params: &ModelParams<f64>, tree: &FlatTree, lambda: f64) -> Result<f64> {
    let rows: BTreeSet<usize> = tree.nodes.iter().filter_map(|n| n.word).collect();
    let (loss, _) = sentence_gradient(params, tree, None)?;
    Ok(loss + l2_penalty(params, lambda, &rows))
}

/// Compares the analytic gradient of the objective with central finite
/// differences over every scalar parameter.
pub fn check_params(params: &ModelParams<f64>, tree: &FlatTree, lambda: f64) -> Result<GradCheckReport> {
    let rows: BTreeSet<usize> = tree.nodes.iter().filter_map(|n| n.word).collect();
    let (_, mut grads) = sentence_gradient(params, tree, None)?;
    add_l2_gradient(&mut grads, params, lambda, &rows);

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (String::new(), 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for id in 0..probe.tensors.len() {
        let cols = probe.tensors[id].shape.cols;
        for i in 0..probe.tensors[id].len() {
            let analytic = grads
                .dense
                .get(&id)
                .map(|g| g[i])
                .or_else(|| grads.rows.get(&(id, i / cols)).map(|g| g[i % cols]))
                .unwrap_or(0.0);
            let orig = probe.tensors[id].data[i];
            let mut at = |offset: f64| {
                probe.tensors[id].data[i] = orig + offset * FD_STEP;
                objective(&probe, tree, lambda)
            };
            let (p2, p1, m1, m2) = (at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?);
            probe.tensors[id].data[i] = orig;
            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * FD_STEP);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.0.is_empty() {
                report.max_rel_err = err;
                report.worst = (probe.tensors[id].name.clone(), i);
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Builds a vocabulary from `tree`, draws random parameters for
/// `config` from `seed`, and runs [`check_params`].
pub fn gradient_check(config: ModelConfig, tree: &LabeledTree, seed: u64, lambda: f64) -> Result<GradCheckReport> {
    let corpus = Corpus::new(vec![tree.clone()], "gradcheck", Task::Fine);
    let vocab = build_vocab(&corpus)?;
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..config
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = random_params(config, 0.5, &mut rng)?;
    check_params(&params, &FlatTree::new(tree, &vocab), lambda)
}
