use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::adagrad::{adagrad_step, OptimizerState};
use super::loss::{add_l2_gradient, l2_penalty};
use crate::autodiff::Gradients;
use crate::embeddings::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{infer, run_tree, AttentionNorm, Dropout, FlatTree, ModelParams, Variant};
use crate::scalar::{Precision, Scalar};
use crate::treebank::{Corpus, Task};

/// Gradient norm above which a warning is logged.
pub const GRAD_NORM_WARNING: f64 = 1e3;

/// A complete experiment description. Defaults reproduce the reference
/// recipe: AdaGrad at 0.01, minibatches of 25 sentences, L2 of 1e-4,
/// dropout 0.5, 40 epochs with four development evaluations per epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub attention: bool,
    pub attention_norm: AttentionNorm,
    pub task: Task,
    pub dim: usize,
    pub lr: f64,
    pub batch: usize,
    pub l2: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub evals_per_epoch: usize,
    pub seed: u64,
    pub threads: Option<usize>,
    pub precision: Precision,
    pub data: Option<PathBuf>,
    pub glove: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::TreeBiGru,
            attention: true,
            attention_norm: AttentionNorm::Softmax,
            task: Task::Fine,
            dim: 300,
            lr: 0.01,
            batch: 25,
            l2: 1e-4,
            dropout: 0.5,
            epochs: 40,
            evals_per_epoch: 4,
            seed: 1,
            threads: None,
            precision: Precision::F64,
            data: None,
            glove: None,
            out: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 {
            return fail("dimension must be positive");
        }
        if self.batch == 0 {
            return fail("batch size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("learning rate must be positive");
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return fail("L2 strength must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if self.evals_per_epoch == 0 {
            return fail("at least one evaluation per epoch is required");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub root_accuracy: f64,
    pub node_accuracy: f64,
    /// Mean summed node NLL per sentence.
    pub loss: f64,
}

/// Flattens every tree of a corpus against `vocab`.
pub fn flatten(corpus: &Corpus, vocab: &Vocabulary) -> Vec<FlatTree> {
    corpus.trees.iter().map(|t| FlatTree::new(t, vocab)).collect()
}

/// Root and node accuracy with dropout disabled.
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, trees: &[FlatTree], task: Task) -> Result<Metrics> {
    if params.config.classes != task.class_count() {
        return Err(Error::Config(format!(
            "model has {} classes, {task} task has {}",
            params.config.classes,
            task.class_count()
        )));
    }
    let per_tree = trees
        .par_iter()
        .map(|tree| {
            let inf = infer(params, tree)?;
            let mut correct = 0usize;
            let mut supervised = 0usize;
            let mut loss = 0.0;
            for (node, (label, dist)) in tree.nodes.iter().zip(inf.labels.iter().zip(&inf.distributions)) {
                if node.supervised {
                    supervised += 1;
                    correct += usize::from(*label == node.label);
                    loss -= dist[node.label].as_f64().max(crate::autodiff::PROB_FLOOR).ln();
                }
            }
            let root = &tree.nodes[tree.root()];
            let root_ok = root.supervised && inf.root_label() == root.label;
            Ok((root_ok, correct, supervised, loss))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_tree.len();
    let (mut roots, mut correct, mut supervised, mut loss) = (0usize, 0usize, 0usize, 0.0);
    for (r, c, s, l) in per_tree {
        roots += usize::from(r);
        correct += c;
        supervised += s;
        loss += l;
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(Metrics {
        root_accuracy: ratio(roots, n),
        node_accuracy: ratio(correct, supervised),
        loss: if n == 0 { 0.0 } else { loss / n as f64 },
    })
}

/// Loss and parameter gradients for one sentence.
pub fn sentence_gradient<T: Scalar>(
    params: &ModelParams<T>,
    tree: &FlatTree,
    dropout: Option<Dropout<'_>>,
) -> Result<(f64, Gradients<T>)> {
    let mut run = run_tree(params, tree, dropout)?;
    match run.loss()? {
        None => Ok((0.0, Gradients::default())),
        Some(loss) => {
            let value = run.fwd.tape.scalar(loss).as_f64();
            let grads = run.fwd.tape.backward(loss)?.into_params();
            Ok((value, grads))
        }
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Summed data loss, merged gradients, and the set of embedding rows used.
pub struct BatchGradient<T> {
    pub data_loss: f64,
    pub grads: Gradients<T>,
    pub rows: BTreeSet<usize>,
}

/// Per-sentence gradients computed in parallel and summed in batch order.
/// Each sentence draws its dropout masks from a generator keyed by
/// `(seed, step, position)`, so results do not depend on scheduling.
pub fn batch_gradient<T: Scalar>(
    params: &ModelParams<T>,
    trees: &[&FlatTree],
    indices: &[usize],
    dropout: f64,
    seed: u64,
    step: u64,
) -> Result<BatchGradient<T>> {
    let parts = trees
        .par_iter()
        .enumerate()
        .map(|(pos, tree)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, step, pos as u64));
            let drop = (dropout > 0.0).then_some(Dropout {
                rate: dropout,
                rng: &mut rng,
            });
            let (loss, grads) = sentence_gradient(params, tree, drop)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss",
                    name: format!("sentence {}", indices.get(pos).copied().unwrap_or(pos)),
                });
            }
            Ok((loss, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let emb = params.embeddings_id();
    let mut out = BatchGradient {
        data_loss: 0.0,
        grads: Gradients::default(),
        rows: BTreeSet::new(),
    };
    for (loss, g) in &parts {
        out.data_loss += loss;
        out.grads.merge(g);
    }
    for tree in trees {
        out.rows.extend(tree.nodes.iter().filter_map(|n| n.word));
    }
    debug_assert!(out.grads.rows.keys().all(|&(id, _)| id == emb));
    Ok(out)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub step: u64,
    /// Mean per-sentence objective (data loss plus L2) since the previous evaluation.
    pub train_loss: f64,
    pub dev_root_acc: f64,
    pub wall_seconds: f64,
}

impl LogEntry {
    /// The columns that are reproducible for a fixed seed.
    pub fn deterministic_part(&self) -> (usize, u64, u64, u64) {
        (
            self.epoch,
            self.step,
            self.train_loss.to_bits(),
            self.dev_root_acc.to_bits(),
        )
    }
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{:.6}\t{:.4}\t{:.1}",
            self.epoch, self.step, self.train_loss, self.dev_root_acc, self.wall_seconds
        )
    }
}

pub struct TrainOutcome<T> {
    /// Parameters with the best development root accuracy seen.
    pub best: ModelParams<T>,
    pub best_dev: f64,
    pub final_params: ModelParams<T>,
    pub log: Vec<LogEntry>,
}

/// Number of evaluations triggered in an epoch of `batches` minibatches.
pub fn evaluation_points(batches: usize, evals_per_epoch: usize) -> Vec<usize> {
    let every = batches.div_ceil(evals_per_epoch).max(1);
    (1..=batches).filter(|b| b % every == 0 || *b == batches).collect()
}

/// Minibatch AdaGrad with periodic development evaluation and best-dev
/// model selection. `on_eval` sees each log entry as it is produced.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    train_trees: &[FlatTree],
    dev_trees: &[FlatTree],
    mut params: ModelParams<T>,
    on_eval: &mut dyn FnMut(&LogEntry),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let start = Instant::now();
    let mut opt = OptimizerState::new(&params);
    let mut order: Vec<usize> = (0..train_trees.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batches = train_trees.len().div_ceil(config.batch);
    let points = evaluation_points(batches, config.evals_per_epoch);

    let mut best = params.clone();
    let mut best_dev = f64::NEG_INFINITY;
    let mut log = Vec::new();
    let mut step: u64 = 0;
    let mut window_loss = 0.0;
    let mut window_sentences = 0usize;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        for (b, chunk) in order.chunks(config.batch).enumerate() {
            let trees: Vec<&FlatTree> = chunk.iter().map(|&i| &train_trees[i]).collect();
            let mut batch = batch_gradient(&params, &trees, chunk, config.dropout, config.seed, step)?;
            let penalty = l2_penalty(&params, config.l2, &batch.rows);
            add_l2_gradient(&mut batch.grads, &params, config.l2, &batch.rows);

            let norm = batch
                .grads
                .dense
                .values()
                .chain(batch.grads.rows.values())
                .flat_map(|g| g.iter())
                .map(|x| x.as_f64().powi(2))
                .sum::<f64>()
                .sqrt();
            if norm > GRAD_NORM_WARNING {
                log::warn!("step {step}: gradient norm {norm:.1} exceeds {GRAD_NORM_WARNING}");
            }
            adagrad_step(&mut params, &batch.grads, &mut opt, config.lr)?;
            step += 1;
            window_loss += batch.data_loss + penalty;
            window_sentences += chunk.len();

            if points.contains(&(b + 1)) {
                let dev = evaluate(&params, dev_trees, config.task)?;
                let entry = LogEntry {
                    epoch,
                    step,
                    train_loss: window_loss / window_sentences.max(1) as f64,
                    dev_root_acc: dev.root_accuracy,
                    wall_seconds: start.elapsed().as_secs_f64(),
                };
                window_loss = 0.0;
                window_sentences = 0;
                if entry.dev_root_acc > best_dev {
                    best_dev = entry.dev_root_acc;
                    best = params.clone();
                }
                on_eval(&entry);
                log.push(entry);
            }
        }
    }
    if log.is_empty() {
        best_dev = evaluate(&params, dev_trees, config.task)?.root_accuracy;
        best = params.clone();
    }
    Ok(TrainOutcome {
        best,
        best_dev,
        final_params: params,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluation_schedule() {
        assert_eq!(evaluation_points(342, 4), vec![86, 172, 258, 342]);
        assert_eq!(evaluation_points(2, 4), vec![1, 2]);
        assert_eq!(evaluation_points(10, 4), vec![3, 6, 9, 10]);
        assert_eq!(evaluation_points(1, 4), vec![1]);
        assert!(evaluation_points(0, 4).is_empty());
    }

    #[test]
    fn defaults_are_the_reference_recipe() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.batch, c.l2, c.dropout), (0.01, 25, 1e-4, 0.5));
        assert_eq!((c.epochs, c.evals_per_epoch, c.dim), (40, 4, 300));
        c.validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in [
            TrainConfig {
                batch: 0,
                ..Default::default()
            },
            TrainConfig {
                dim: 0,
                ..Default::default()
            },
            TrainConfig {
                dropout: 1.0,
                ..Default::default()
            },
            TrainConfig {
                lr: -1.0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
