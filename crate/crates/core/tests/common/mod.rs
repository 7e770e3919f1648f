//! A direct recursive implementation of the network over `LabeledTree`,
//! written with plain vectors and no tape, used as an oracle.
#![allow(dead_code)]

use arbo::embeddings::Vocabulary;
use arbo::model::{AttentionNorm, ModelParams, Variant};
use arbo::synth::{random_tree, word_list};
use arbo::treebank::LabeledTree;
use rand::Rng;

pub struct Gated {
    pub h: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub cand: Vec<f64>,
}

pub struct Oracle {
    /// Post-order, root last.
    pub up: Vec<Gated>,
    pub down: Option<Vec<Vec<f64>>>,
    pub weights: Option<Vec<f64>>,
    pub sentence: Option<Vec<f64>>,
    pub distributions: Vec<Vec<f64>>,
}

fn mat(p: &ModelParams<f64>, name: &str, x: &[f64]) -> Vec<f64> {
    let t = p.get(name).unwrap_or_else(|| panic!("missing {name}"));
    assert_eq!(t.shape.cols, x.len(), "{name}");
    (0..t.shape.rows)
        .map(|i| (0..t.shape.cols).map(|j| t.get(i, j) * x[j]).sum())
        .collect()
}

fn vec_of(p: &ModelParams<f64>, name: &str) -> Vec<f64> {
    p.get(name).unwrap_or_else(|| panic!("missing {name}")).data.clone()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

fn sigmoid(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect()
}

fn tanh(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(f64::tanh).collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn up(p: &ModelParams<f64>, vocab: &Vocabulary, t: &LabeledTree, out: &mut Vec<Gated>) -> usize {
    let d = p.config.dim;
    let kids: Vec<usize> = t.children.iter().map(|c| up(p, vocab, c, out)).collect();
    let gate_pre = |g: &str, out: &Vec<Gated>, reset: Option<&[f64]>| -> Vec<f64> {
        let mut acc = vec_of(p, &format!("up.b_{g}"));
        if let Some(word) = &t.token {
            let e = p.get("embeddings").unwrap().row(vocab.lookup(word)).to_vec();
            acc = add(&acc, &mat(p, &format!("up.U_{g}"), &e));
        }
        for (k, &c) in kids.iter().enumerate() {
            let h = match reset {
                Some(r) => hadamard(&out[c].h, r),
                None => out[c].h.clone(),
            };
            acc = add(&acc, &mat(p, &format!("up.W_{g}.{}", k + 1), &h));
        }
        acc
    };
    let z = sigmoid(gate_pre("z", out, None));
    let r = sigmoid(gate_pre("r", out, None));
    let cand = tanh(gate_pre("h", out, Some(&r)));
    let mut sum = vec![0.0; d];
    for &c in &kids {
        sum = add(&sum, &out[c].h);
    }
    let h = (0..d).map(|i| z[i] * sum[i] + (1.0 - z[i]) * cand[i]).collect();
    out.push(Gated { h, z, r, cand });
    out.len() - 1
}

/// `start` is the post-order index of the first node in `t`'s subtree.
fn down(
    p: &ModelParams<f64>,
    t: &LabeledTree,
    ups: &[Gated],
    parent: Option<&[f64]>,
    start: usize,
    out: &mut [Option<Vec<f64>>],
) {
    let me = start + t.node_count() - 1;
    let h_up = &ups[me].h;
    let h: Vec<f64> = match parent {
        None => h_up.clone(),
        Some(hp) => {
            let pre = |g: &str, hp_in: &[f64]| {
                add(
                    &add(
                        &mat(p, &format!("down.U_{g}"), h_up),
                        &mat(p, &format!("down.W_{g}"), hp_in),
                    ),
                    &vec_of(p, &format!("down.b_{g}")),
                )
            };
            let z = sigmoid(pre("z", hp));
            let r = sigmoid(pre("r", hp));
            let cand = tanh(pre("h", &hadamard(hp, &r)));
            (0..hp.len()).map(|i| z[i] * hp[i] + (1.0 - z[i]) * cand[i]).collect()
        }
    };
    let mut offset = start;
    for c in &t.children {
        down(p, c, ups, Some(&h), offset, out);
        offset += c.node_count();
    }
    out[me] = Some(h);
}

pub fn oracle(p: &ModelParams<f64>, vocab: &Vocabulary, tree: &LabeledTree) -> Oracle {
    let cfg = p.config;
    let mut ups = Vec::new();
    up(p, vocab, tree, &mut ups);
    let n = ups.len();

    let downs = (cfg.variant == Variant::TreeBiGru).then(|| {
        let mut out = vec![None; n];
        down(p, tree, &ups, None, 0, &mut out);
        out.into_iter()
            .map(|h| h.expect("every node visited"))
            .collect::<Vec<_>>()
    });

    let reps: Vec<Vec<f64>> = (0..n)
        .map(|j| match &downs {
            Some(dn) => ups[j].h.iter().chain(&dn[j]).cloned().collect(),
            None => ups[j].h.clone(),
        })
        .collect();

    let (weights, sentence) = if cfg.attention {
        let ctx = vec_of(p, "attn.u_w");
        let scores: Vec<f64> = reps
            .iter()
            .map(|rep| {
                let u = tanh(add(&mat(p, "attn.W_w", rep), &vec_of(p, "attn.b_w")));
                u.iter().zip(&ctx).map(|(a, b)| a * b).sum()
            })
            .collect();
        let w = match cfg.attention_norm {
            AttentionNorm::Softmax => softmax(&scores),
            AttentionNorm::Linear => {
                let s: f64 = scores.iter().sum();
                scores.iter().map(|x| x / s).collect()
            }
        };
        let mut s = vec![0.0; reps[0].len()];
        for (a, rep) in w.iter().zip(&reps) {
            s = s.iter().zip(rep).map(|(x, y)| x + a * y).collect();
        }
        (Some(w), Some(s))
    } else {
        (None, None)
    };

    let d = cfg.dim;
    let classify = |rep: &[f64]| -> Vec<f64> {
        let logits = match cfg.variant {
            Variant::TreeGru => mat(p, "cls.W_s", rep),
            Variant::TreeBiGru => add(&mat(p, "cls.W_up", &rep[..d]), &mat(p, "cls.W_down", &rep[d..])),
        };
        softmax(&add(&logits, &vec_of(p, "cls.b")))
    };
    let distributions = (0..n)
        .map(|j| match (&sentence, j == n - 1) {
            (Some(s), true) => classify(s),
            _ => classify(&reps[j]),
        })
        .collect();

    Oracle {
        up: ups,
        down: downs,
        weights,
        sentence,
        distributions,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub const VARIANTS: [(Variant, bool); 4] = [
    (Variant::TreeGru, false),
    (Variant::TreeGru, true),
    (Variant::TreeBiGru, false),
    (Variant::TreeBiGru, true),
];

/// A random tree over a small word list, some words unseen by the vocabulary.
pub fn sample_tree<R: Rng + ?Sized>(rng: &mut R, max_nodes: usize) -> LabeledTree {
    random_tree(rng, &word_list(8), max_nodes, 0.25)
}

/// Vocabulary covering `w0..w5`; `w6` and `w7` map to the unknown row.
pub fn sample_vocab() -> Vocabulary {
    let mut words = vec![arbo::embeddings::UNK.to_string()];
    words.extend(word_list(6));
    Vocabulary::from_words(words).unwrap()
}
