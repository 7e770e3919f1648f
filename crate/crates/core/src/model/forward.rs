use rand::RngCore;

use super::{AttentionNorm, ModelParams, Variant};
use crate::autodiff::{softmax, Tape, Var};
use crate::embeddings::Vocabulary;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::training::dropout_mask;
use crate::treebank::LabeledTree;

/// A tree node after flattening. Indices refer to post-order positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatNode {
    pub children: Vec<usize>,
    pub parent: Option<usize>,
    /// Vocabulary id, present iff the node is a leaf.
    pub word: Option<usize>,
    pub label: usize,
    pub supervised: bool,
}

/// Post-order view of a tree with tokens resolved to vocabulary ids.
/// The root is the last node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatTree {
    pub nodes: Vec<FlatNode>,
}

impl FlatTree {
    pub fn new(tree: &LabeledTree, vocab: &Vocabulary) -> Self {
        fn walk(t: &LabeledTree, vocab: &Vocabulary, out: &mut Vec<FlatNode>) -> usize {
            let children: Vec<usize> = t.children.iter().map(|c| walk(c, vocab, out)).collect();
            let id = out.len();
            for &c in &children {
                out[c].parent = Some(id);
            }
            out.push(FlatNode {
                children,
                parent: None,
                word: t.token.as_deref().map(|w| vocab.lookup(w)),
                label: usize::from(t.label),
                supervised: t.supervised,
            });
            id
        }
        let mut nodes = Vec::with_capacity(tree.node_count());
        walk(tree, vocab, &mut nodes);
        FlatTree { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> usize {
        self.nodes.len() - 1
    }
}

/// Training-time dropout: rate and the generator that draws masks.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut dyn RngCore,
}

/// One forward pass in progress: a tape over borrowed parameters.
pub struct Forward<'p, 'r, T: Scalar> {
    pub tape: Tape<'p, T>,
    pub params: &'p ModelParams<T>,
    leaves: Vec<Option<Var>>,
    dropout: Option<Dropout<'r>>,
}

impl<'p, 'r, T: Scalar> Forward<'p, 'r, T> {
    pub fn new(params: &'p ModelParams<T>, dropout: Option<Dropout<'r>>) -> Self {
        Forward {
            tape: Tape::new(),
            params,
            leaves: vec![None; params.tensors.len()],
            dropout: dropout.filter(|d| d.rate > 0.0),
        }
    }

    /// Leaf for a whole tensor, recorded once per tape.
    fn param(&mut self, id: usize) -> Result<Var> {
        if let Some(v) = self.leaves[id] {
            return Ok(v);
        }
        let t = &self.params.tensors[id];
        let v = self.tape.param(id, &t.data, t.shape)?;
        self.leaves[id] = Some(v);
        Ok(v)
    }

    fn embedding(&mut self, word: usize) -> Result<Var> {
        let id = self.params.layout.embeddings;
        let t = &self.params.tensors[id];
        self.tape.param_row(id, &t.data, t.shape.cols, word)
    }

    fn drop(&mut self, v: Var) -> Result<Var> {
        match &mut self.dropout {
            None => Ok(v),
            Some(d) => {
                let mask = dropout_mask::<T, _>(self.tape.shape(v).len(), d.rate, &mut *d.rng);
                let m = self.tape.constant(mask);
                self.tape.mul(v, m)
            }
        }
    }

    /// `sum_i M_i v_i + b`.
    fn affine(&mut self, terms: &[(usize, Var)], bias: usize) -> Result<Var> {
        let mut parts = Vec::with_capacity(terms.len() + 1);
        for &(m, v) in terms {
            let mv = self.param(m)?;
            parts.push(self.tape.matvec(mv, v)?);
        }
        parts.push(self.param(bias)?);
        self.tape.sum(&parts)
    }

    /// `a * keep + (1 - a) * cand`, written as `cand + a * (keep - cand)`.
    fn interpolate(&mut self, gate: Var, keep: Option<Var>, cand: Var) -> Result<Var> {
        match keep {
            Some(k) => {
                let diff = self.tape.sub(k, cand)?;
                let scaled = self.tape.mul(gate, diff)?;
                self.tape.add(cand, scaled)
            }
            None => {
                let scaled = self.tape.mul(gate, cand)?;
                self.tape.sub(cand, scaled)
            }
        }
    }
}

/// Upward-pass activations of one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpState {
    pub h: Var,
    pub z: Var,
    pub r: Var,
    pub candidate: Var,
}

/// Downward-pass activations of one node. The root has no gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DownState {
    pub h: Var,
    pub gates: Option<(Var, Var, Var)>,
}

/// Bottom-up pass over `tree` in post-order.
///
/// Leaves read their word embedding as input; internal nodes have no input
/// term. Child `k` is combined through the position-`k` weight set, so a
/// node may have at most `arity` children.
pub fn upward_pass<T: Scalar>(fwd: &mut Forward<'_, '_, T>, tree: &FlatTree) -> Result<Vec<UpState>> {
    let layout = &fwd.params.layout;
    let (u, w, b) = (layout.up_u, layout.up_w.clone(), layout.up_b);
    let mut states: Vec<UpState> = Vec::with_capacity(tree.len());
    for node in &tree.nodes {
        if node.children.len() > w.len() {
            return Err(Error::Model(format!(
                "node has {} children, model arity is {}",
                node.children.len(),
                w.len()
            )));
        }
        let x = match node.word {
            Some(id) => {
                let e = fwd.embedding(id)?;
                Some(fwd.drop(e)?)
            }
            None => None,
        };
        let children: Vec<Var> = node.children.iter().map(|&c| states[c].h).collect();

        let gate = |fwd: &mut Forward<'_, '_, T>, g: usize| -> Result<Var> {
            let mut terms: Vec<(usize, Var)> = x.iter().map(|&x| (u[g], x)).collect();
            terms.extend(children.iter().enumerate().map(|(k, &h)| (w[k][g], h)));
            fwd.affine(&terms, b[g])
        };
        let z_pre = gate(fwd, 0)?;
        let z = fwd.tape.sigmoid(z_pre)?;
        let r_pre = gate(fwd, 1)?;
        let r = fwd.tape.sigmoid(r_pre)?;

        let mut terms: Vec<(usize, Var)> = x.iter().map(|&x| (u[2], x)).collect();
        for (k, &h) in children.iter().enumerate() {
            terms.push((w[k][2], fwd.tape.mul(h, r)?));
        }
        let cand_pre = fwd.affine(&terms, b[2])?;
        let candidate = fwd.tape.tanh(cand_pre)?;

        let child_sum = if children.is_empty() {
            None
        } else {
            Some(fwd.tape.sum(&children)?)
        };
        let h = fwd.interpolate(z, child_sum, candidate)?;
        states.push(UpState { h, z, r, candidate });
    }
    Ok(states)
}

/// Top-down pass: the root keeps its upward state; every other node gates
/// between its parent's downward state and a candidate built from its own
/// upward state.
pub fn downward_pass<T: Scalar>(
    fwd: &mut Forward<'_, '_, T>,
    tree: &FlatTree,
    up: &[UpState],
) -> Result<Vec<DownState>> {
    let ids = fwd
        .params
        .layout
        .down
        .ok_or_else(|| Error::Model("downward pass needs bidirectional parameters".into()))?;
    if up.len() != tree.len() || tree.is_empty() {
        return Err(Error::Model("missing upward states".into()));
    }
    let mut down: Vec<Option<DownState>> = vec![None; tree.len()];
    for j in (0..tree.len()).rev() {
        let Some(p) = tree.nodes[j].parent else {
            down[j] = Some(DownState {
                h: up[j].h,
                gates: None,
            });
            continue;
        };
        let parent = down[p].expect("parents precede children in reverse post-order").h;
        let own = up[j].h;
        let z_pre = fwd.affine(&[(ids.u[0], own), (ids.w[0], parent)], ids.b[0])?;
        let z = fwd.tape.sigmoid(z_pre)?;
        let r_pre = fwd.affine(&[(ids.u[1], own), (ids.w[1], parent)], ids.b[1])?;
        let r = fwd.tape.sigmoid(r_pre)?;
        let reset = fwd.tape.mul(parent, r)?;
        let cand_pre = fwd.affine(&[(ids.u[2], own), (ids.w[2], reset)], ids.b[2])?;
        let cand = fwd.tape.tanh(cand_pre)?;
        let h = fwd.interpolate(z, Some(parent), cand)?;
        down[j] = Some(DownState {
            h,
            gates: Some((z, r, cand)),
        });
    }
    Ok(down.into_iter().map(|d| d.expect("every node visited")).collect())
}

/// Attention pooling on the tape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionVars {
    pub scores: Var,
    pub weights: Var,
    /// Weighted sums of each representation part (`[s]` or `[s_up, s_down]`).
    pub parts: Vec<Var>,
    pub sentence: Var,
}

/// Representation parts per node: `[h]` or `[h_up, h_down]`.
fn representation_parts(up: &[UpState], down: Option<&[DownState]>) -> Vec<Vec<Var>> {
    match down {
        None => up.iter().map(|s| vec![s.h]).collect(),
        Some(down) => up.iter().zip(down).map(|(u, d)| vec![u.h, d.h]).collect(),
    }
}

/// Scores every node representation against the context vector, normalizes
/// the scores into weights and returns the weighted sum of representations.
pub fn attention_pool<T: Scalar>(
    fwd: &mut Forward<'_, '_, T>,
    up: &[UpState],
    down: Option<&[DownState]>,
) -> Result<AttentionVars> {
    let ids = fwd
        .params
        .layout
        .attention
        .ok_or_else(|| Error::Model("model has no attention parameters".into()))?;
    if up.is_empty() {
        return Err(Error::Model("attention over an empty node set".into()));
    }
    let parts = representation_parts(up, down);
    let context = fwd.param(ids.context)?;
    let mut scores = Vec::with_capacity(parts.len());
    for p in &parts {
        let rep = if p.len() == 1 { p[0] } else { fwd.tape.concat(p)? };
        let pre = fwd.affine(&[(ids.projection, rep)], ids.bias)?;
        let hidden = fwd.tape.tanh(pre)?;
        scores.push(fwd.tape.dot(hidden, context)?);
    }
    let scores = fwd.tape.concat(&scores)?;
    let weights = match fwd.params.config.attention_norm {
        AttentionNorm::Softmax => fwd.tape.softmax(scores)?,
        AttentionNorm::Linear => fwd.tape.linear_normalize(scores)?,
    };
    let coeffs = (0..parts.len())
        .map(|j| fwd.tape.element(weights, j))
        .collect::<Result<Vec<_>>>()?;
    let mut pooled = Vec::new();
    for k in 0..parts[0].len() {
        let terms = coeffs
            .iter()
            .zip(&parts)
            .map(|(&a, p)| fwd.tape.scale(a, p[k]))
            .collect::<Result<Vec<_>>>()?;
        pooled.push(fwd.tape.sum(&terms)?);
    }
    let sentence = if pooled.len() == 1 {
        pooled[0]
    } else {
        fwd.tape.concat(&pooled)?
    };
    Ok(AttentionVars {
        scores,
        weights,
        parts: pooled,
        sentence,
    })
}

fn classify<T: Scalar>(fwd: &mut Forward<'_, '_, T>, inputs: &[Var]) -> Result<Var> {
    let layout = &fwd.params.layout;
    let mats: Vec<usize> = std::iter::once(layout.cls_up).chain(layout.cls_down).collect();
    let bias = layout.cls_bias;
    debug_assert_eq!(mats.len(), inputs.len());
    let mut terms = Vec::with_capacity(inputs.len());
    for (&m, &x) in mats.iter().zip(inputs) {
        terms.push((m, fwd.drop(x)?));
    }
    fwd.affine(&terms, bias)
}

/// Class logits for every node. With attention the root is classified from
/// the pooled sentence vector instead of its own state.
pub fn predict_nodes<T: Scalar>(
    fwd: &mut Forward<'_, '_, T>,
    up: &[UpState],
    down: Option<&[DownState]>,
    attention: Option<&AttentionVars>,
) -> Result<Vec<Var>> {
    let parts = representation_parts(up, down);
    let root = parts
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::Model("empty tree".into()))?;
    let mut logits = Vec::with_capacity(parts.len());
    for (j, p) in parts.iter().enumerate() {
        let inputs = match attention {
            Some(a) if j == root => &a.parts,
            _ => p,
        };
        logits.push(classify(fwd, inputs)?);
    }
    Ok(logits)
}

/// Everything recorded for one tree.
pub struct TreeRun<'p, 'r, T: Scalar> {
    pub fwd: Forward<'p, 'r, T>,
    pub tree: &'p FlatTree,
    pub up: Vec<UpState>,
    pub down: Option<Vec<DownState>>,
    pub attention: Option<AttentionVars>,
    pub logits: Vec<Var>,
}

/// Full forward pass for the architecture `params` describes.
pub fn run_tree<'p, 'r, T: Scalar>(
    params: &'p ModelParams<T>,
    tree: &'p FlatTree,
    dropout: Option<Dropout<'r>>,
) -> Result<TreeRun<'p, 'r, T>> {
    let mut fwd = Forward::new(params, dropout);
    let up = upward_pass(&mut fwd, tree)?;
    let down = match params.config.variant {
        Variant::TreeBiGru => Some(downward_pass(&mut fwd, tree, &up)?),
        Variant::TreeGru => None,
    };
    let attention = if params.config.attention {
        Some(attention_pool(&mut fwd, &up, down.as_deref())?)
    } else {
        None
    };
    let logits = predict_nodes(&mut fwd, &up, down.as_deref(), attention.as_ref())?;
    Ok(TreeRun {
        fwd,
        tree,
        up,
        down,
        attention,
        logits,
    })
}

impl<'p, 'r, T: Scalar> TreeRun<'p, 'r, T> {
    /// Summed negative log-likelihood over supervised nodes, or `None` when
    /// the tree has no supervised node.
    pub fn loss(&mut self) -> Result<Option<Var>> {
        let mut terms = Vec::new();
        for (node, &z) in self.tree.nodes.iter().zip(&self.logits) {
            if node.supervised {
                terms.push(self.fwd.tape.softmax_xent(z, node.label)?);
            }
        }
        if terms.is_empty() {
            return Ok(None);
        }
        Ok(Some(self.fwd.tape.sum(&terms)?))
    }

    pub fn distributions(&self) -> Vec<Vec<T>> {
        self.logits.iter().map(|&z| softmax(self.fwd.tape.value(z))).collect()
    }

    pub fn attention_values(&self) -> Option<AttentionResult<T>> {
        self.attention.as_ref().map(|a| AttentionResult {
            weights: self.fwd.tape.value(a.weights).to_vec(),
            sentence: self.fwd.tape.value(a.sentence).to_vec(),
        })
    }

    pub fn states(&self) -> NodeStates<T> {
        let tape = &self.fwd.tape;
        let val = |v: Var| tape.value(v).to_vec();
        NodeStates {
            up: self
                .up
                .iter()
                .map(|s| GateValues {
                    h: val(s.h),
                    gates: Some([val(s.z), val(s.r), val(s.candidate)]),
                })
                .collect(),
            down: self.down.as_ref().map(|d| {
                d.iter()
                    .map(|s| GateValues {
                        h: val(s.h),
                        gates: s.gates.map(|(z, r, c)| [val(z), val(r), val(c)]),
                    })
                    .collect()
            }),
        }
    }
}

/// Values of one node's state: `h` plus `[z, r, candidate]` when gated.
#[derive(Debug, Clone, PartialEq)]
pub struct GateValues<T> {
    pub h: Vec<T>,
    pub gates: Option<[Vec<T>; 3]>,
}

/// Per-node activations read back from a tape, indexed in post-order.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStates<T> {
    pub up: Vec<GateValues<T>>,
    pub down: Option<Vec<GateValues<T>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult<T> {
    pub weights: Vec<T>,
    pub sentence: Vec<T>,
}

/// Predictions for one tree, dropout disabled.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference<T> {
    pub distributions: Vec<Vec<T>>,
    /// Argmax per node; ties go to the lowest class index.
    pub labels: Vec<usize>,
    pub attention: Option<AttentionResult<T>>,
}

impl<T: Scalar> Inference<T> {
    pub fn root_label(&self) -> usize {
        *self.labels.last().expect("non-empty tree")
    }

    pub fn root_distribution(&self) -> &[T] {
        self.distributions.last().expect("non-empty tree")
    }
}

pub(crate) fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn infer<T: Scalar>(params: &ModelParams<T>, tree: &FlatTree) -> Result<Inference<T>> {
    let run = run_tree(params, tree, None)?;
    let distributions = run.distributions();
    let labels = distributions.iter().map(|d| argmax(d)).collect();
    Ok(Inference {
        attention: run.attention_values(),
        distributions,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::treebank::parse_tree;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::from_words(vec!["<unk>".into(), "a".into(), "b".into(), "c".into()]).unwrap()
    }

    #[test]
    fn flattening_is_post_order_with_parents() {
        let t = parse_tree("(3 (2 a) (1 (0 b) (4 zzz)))").unwrap();
        let f = FlatTree::new(&t, &vocab());
        assert_eq!(f.len(), 5);
        assert_eq!(f.root(), 4);
        assert_eq!(f.nodes[0].word, Some(1));
        assert_eq!(f.nodes[2].word, Some(0));
        assert_eq!(f.nodes[3].children, vec![1, 2]);
        assert_eq!(f.nodes[4].children, vec![0, 3]);
        assert_eq!(f.nodes[1].parent, Some(3));
        assert_eq!(f.nodes[4].parent, None);
        assert_eq!(f.nodes[4].label, 3);
    }

    #[test]
    fn zero_input_leaf() {
        let config = ModelConfig::new(Variant::TreeGru, false, 3, 4, 5);
        let mut p: ModelParams<f64> = init_params(config, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.get_mut("embeddings").unwrap().data.iter_mut().for_each(|x| *x = 0.0);
        let f = FlatTree::new(&parse_tree("(2 a)").unwrap(), &vocab());
        let run = run_tree(&p, &f, None).unwrap();
        let s = run.states();
        let [z, _, cand] = s.up[0].gates.clone().unwrap();
        assert_eq!(z, vec![0.5; 3]);
        assert_eq!(cand, vec![0.0; 3]);
        assert_eq!(s.up[0].h, vec![0.0; 3]);
    }

    #[test]
    fn scalar_leaf_by_hand() {
        let config = ModelConfig::new(Variant::TreeGru, false, 1, 2, 2);
        let mut p: ModelParams<f64> = init_params(config, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.get_mut("embeddings").unwrap().data = vec![0.0, 1.0];
        let v = Vocabulary::from_words(vec!["<unk>".into(), "a".into()]).unwrap();
        let f = FlatTree::new(&parse_tree("(1 a)").unwrap(), &v);
        let s = run_tree(&p, &f, None).unwrap().states();
        let [z, _, cand] = s.up[0].gates.clone().unwrap();
        assert!((z[0] - 0.622_459_331).abs() < 1e-8);
        assert!((cand[0] - 0.462_117_157).abs() < 1e-8);
        assert!((s.up[0].h[0] - 0.174_468_021).abs() < 1e-8);
    }

    #[test]
    fn arity_is_enforced() {
        let config = ModelConfig::new(Variant::TreeGru, false, 2, 4, 5);
        let p: ModelParams<f64> = init_params(config, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let f = FlatTree::new(&parse_tree("(2 (1 a) (1 b) (1 c))").unwrap(), &vocab());
        assert!(run_tree(&p, &f, None).is_err());
    }

    #[test]
    fn single_leaf_downward_copies_upward() {
        let config = ModelConfig::new(Variant::TreeBiGru, false, 3, 4, 5);
        let p: ModelParams<f64> = init_params(config, None, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let f = FlatTree::new(&parse_tree("(2 a)").unwrap(), &vocab());
        let s = run_tree(&p, &f, None).unwrap().states();
        let down = s.down.unwrap();
        assert_eq!(down[0].h, s.up[0].h);
        assert!(down[0].gates.is_none());
    }

    #[test]
    fn zero_classifier_is_uniform_and_picks_class_zero() {
        for variant in [Variant::TreeGru, Variant::TreeBiGru] {
            for attention in [false, true] {
                let config = ModelConfig::new(variant, attention, 3, 4, 5);
                let mut p: ModelParams<f64> = init_params(config, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
                for t in &mut p.tensors {
                    if t.name.starts_with("cls.") {
                        t.data.iter_mut().for_each(|x| *x = 0.0);
                    }
                }
                let f = FlatTree::new(&parse_tree("(3 (2 a) (1 b))").unwrap(), &vocab());
                let inf = infer(&p, &f).unwrap();
                for d in &inf.distributions {
                    assert!(d.iter().all(|&x| (x - 0.2).abs() < 1e-15));
                }
                assert_eq!(inf.labels, vec![0, 0, 0]);
            }
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
        assert_eq!(argmax(&[0.25f64; 4]), 0);
    }

    #[test]
    fn single_node_attention_is_one() {
        let config = ModelConfig::new(Variant::TreeBiGru, true, 3, 4, 5);
        let p: ModelParams<f64> = init_params(config, None, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let f = FlatTree::new(&parse_tree("(2 a)").unwrap(), &vocab());
        let run = run_tree(&p, &f, None).unwrap();
        let a = run.attention_values().unwrap();
        let s = run.states();
        assert_eq!(a.weights, vec![1.0]);
        let mut rep = s.up[0].h.clone();
        rep.extend(&s.down.unwrap()[0].h);
        assert_eq!(a.sentence, rep);
    }

    #[test]
    fn dropout_changes_training_pass_only() {
        let config = ModelConfig::new(Variant::TreeGru, true, 4, 4, 5);
        let p: ModelParams<f64> = init_params(config, None, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let f = FlatTree::new(&parse_tree("(3 (2 a) (1 b))").unwrap(), &vocab());
        let plain = run_tree(&p, &f, None).unwrap().distributions();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dropped = run_tree(
            &p,
            &f,
            Some(Dropout {
                rate: 0.5,
                rng: &mut rng,
            }),
        )
        .unwrap()
        .distributions();
        assert_ne!(plain, dropped);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let zero_rate = run_tree(
            &p,
            &f,
            Some(Dropout {
                rate: 0.0,
                rng: &mut rng,
            }),
        )
        .unwrap()
        .distributions();
        assert_eq!(plain, zero_rate);
    }
}
