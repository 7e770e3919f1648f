//! Random trees and small synthetic treebanks for tests, gradient checks
//! and smoke runs.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::treebank::{Corpus, LabeledTree, Task, FINE_CLASSES};

/// Random binary bracketing over `words`, with random fine-grained labels.
/// Each internal node is wrapped in a unary parent with probability
/// `unary` as long as the node budget `max_nodes` allows it.
pub fn random_tree<R: Rng + ?Sized>(rng: &mut R, words: &[String], max_nodes: usize, unary: f64) -> LabeledTree {
    assert!(max_nodes >= 1 && !words.is_empty());
    let leaves = rng.random_range(1..=max_nodes.div_ceil(2));
    let mut budget = max_nodes - (2 * leaves - 1);
    build(rng, words, leaves, unary, &mut budget)
}

fn build<R: Rng + ?Sized>(rng: &mut R, words: &[String], leaves: usize, unary: f64, budget: &mut usize) -> LabeledTree {
    let label = rng.random_range(0..FINE_CLASSES as u8);
    let node = if leaves == 1 {
        LabeledTree::leaf(label, words.choose(rng).expect("non-empty").clone())
    } else {
        let left = rng.random_range(1..leaves);
        let l = build(rng, words, left, unary, budget);
        let r = build(rng, words, leaves - left, unary, budget);
        LabeledTree::node(label, vec![l, r])
    };
    if *budget > 0 && rng.random_bool(unary) {
        *budget -= 1;
        LabeledTree::node(rng.random_range(0..FINE_CLASSES as u8), vec![node])
    } else {
        node
    }
}

pub fn word_list(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("w{i}")).collect()
}

/// A compositional toy treebank: every word has a polarity in `-2..=2`,
/// each phrase's score is the clamped sum of its children's scores, and the
/// label is `score + 2`.
pub fn sentiment_corpus<R: Rng + ?Sized>(rng: &mut R, sentences: usize, vocab: usize, max_words: usize) -> Corpus {
    let words = word_list(vocab);
    let polarity: Vec<i32> = (0..vocab).map(|_| rng.random_range(-2..=2)).collect();
    let trees = (0..sentences)
        .map(|_| {
            let n = rng.random_range(2..=max_words.max(2));
            let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
            compose(rng, &picks, &words, &polarity).0
        })
        .collect();
    Corpus::new(trees, "synthetic", Task::Fine)
}

fn compose<R: Rng + ?Sized>(rng: &mut R, picks: &[usize], words: &[String], polarity: &[i32]) -> (LabeledTree, i32) {
    let to_label = |s: i32| (s + 2) as u8;
    if picks.len() == 1 {
        let s = polarity[picks[0]];
        return (LabeledTree::leaf(to_label(s), words[picks[0]].clone()), s);
    }
    let split = rng.random_range(1..picks.len());
    let (l, ls) = compose(rng, &picks[..split], words, polarity);
    let (r, rs) = compose(rng, &picks[split..], words, polarity);
    let s = (ls + rs).clamp(-2, 2);
    (LabeledTree::node(to_label(s), vec![l, r]), s)
}
