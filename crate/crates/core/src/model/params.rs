use std::collections::HashMap;
use std::fmt;

use rand::Rng;

use super::{ModelConfig, Variant};
use crate::autodiff::Shape;
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Diagonal value of every recurrent matrix at initialization.
pub const RECURRENT_INIT: f64 = 0.5;
/// Standard deviation of the Gaussian used for classifier and attention weights.
pub const CLASSIFIER_INIT_SCALE: f64 = 0.01;

/// Role of a tensor; decides its initialization and whether L2 applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Embedding,
    /// Square gate matrix, initialized to a scaled identity.
    Recurrent,
    /// Classifier or attention weight, initialized from a scaled Gaussian.
    Gaussian,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Shape,
    pub kind: TensorKind,
}

impl TensorSpec {
    fn new(name: impl Into<String>, rows: usize, cols: usize, kind: TensorKind) -> Self {
        TensorSpec {
            name: name.into(),
            shape: Shape::matrix(rows, cols),
            kind,
        }
    }
}

const GATES: [&str; 3] = ["z", "r", "h"];

/// Every trainable tensor for `config`, in canonical (checkpoint) order.
pub fn tensor_specs(config: &ModelConfig) -> Vec<TensorSpec> {
    use TensorKind::*;
    let d = config.dim;
    let c = config.classes;
    let mut specs = vec![TensorSpec::new("embeddings", config.vocab_size, d, Embedding)];
    for g in GATES {
        specs.push(TensorSpec::new(format!("up.U_{g}"), d, d, Recurrent));
    }
    for k in 1..=config.arity {
        for g in GATES {
            specs.push(TensorSpec::new(format!("up.W_{g}.{k}"), d, d, Recurrent));
        }
    }
    for g in GATES {
        specs.push(TensorSpec::new(format!("up.b_{g}"), d, 1, Bias));
    }
    if config.variant == Variant::TreeBiGru {
        for g in GATES {
            specs.push(TensorSpec::new(format!("down.U_{g}"), d, d, Recurrent));
        }
        for g in GATES {
            specs.push(TensorSpec::new(format!("down.W_{g}"), d, d, Recurrent));
        }
        for g in GATES {
            specs.push(TensorSpec::new(format!("down.b_{g}"), d, 1, Bias));
        }
    }
    if config.attention {
        specs.push(TensorSpec::new("attn.W_w", d, config.representation_dim(), Gaussian));
        specs.push(TensorSpec::new("attn.b_w", d, 1, Bias));
        specs.push(TensorSpec::new("attn.u_w", d, 1, Gaussian));
    }
    match config.variant {
        Variant::TreeGru => specs.push(TensorSpec::new("cls.W_s", c, d, Gaussian)),
        Variant::TreeBiGru => {
            specs.push(TensorSpec::new("cls.W_up", c, d, Gaussian));
            specs.push(TensorSpec::new("cls.W_down", c, d, Gaussian));
        }
    }
    specs.push(TensorSpec::new("cls.b", c, 1, Bias));
    specs
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Shape,
    pub kind: TensorKind,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.shape.cols + col]
    }

    pub fn row(&self, row: usize) -> &[T] {
        &self.data[row * self.shape.cols..(row + 1) * self.shape.cols]
    }
}

/// Tensor ids of the three gates (z, r, candidate).
pub type GateIds = [usize; 3];

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub embeddings: usize,
    pub up_u: GateIds,
    /// Indexed by child position.
    pub up_w: Vec<GateIds>,
    pub up_b: GateIds,
    pub down: Option<DownIds>,
    pub attention: Option<AttentionIds>,
    pub cls_up: usize,
    pub cls_down: Option<usize>,
    pub cls_bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct DownIds {
    pub u: GateIds,
    pub w: GateIds,
    pub b: GateIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct AttentionIds {
    pub projection: usize,
    pub bias: usize,
    pub context: usize,
}

impl Layout {
    fn resolve(config: &ModelConfig, tensors: &[Tensor<impl Scalar>]) -> Result<Self> {
        let index: HashMap<&str, usize> = tensors.iter().enumerate().map(|(i, t)| (t.name.as_str(), i)).collect();
        let get = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::Model(format!("missing tensor `{name}`")))
        };
        let gates = |prefix: &str, suffix: &str| -> Result<GateIds> {
            Ok([
                get(&format!("{prefix}_z{suffix}"))?,
                get(&format!("{prefix}_r{suffix}"))?,
                get(&format!("{prefix}_h{suffix}"))?,
            ])
        };
        let down = match config.variant {
            Variant::TreeBiGru => Some(DownIds {
                u: gates("down.U", "")?,
                w: gates("down.W", "")?,
                b: gates("down.b", "")?,
            }),
            Variant::TreeGru => None,
        };
        let attention = if config.attention {
            Some(AttentionIds {
                projection: get("attn.W_w")?,
                bias: get("attn.b_w")?,
                context: get("attn.u_w")?,
            })
        } else {
            None
        };
        let (cls_up, cls_down) = match config.variant {
            Variant::TreeGru => (get("cls.W_s")?, None),
            Variant::TreeBiGru => (get("cls.W_up")?, Some(get("cls.W_down")?)),
        };
        Ok(Layout {
            embeddings: get("embeddings")?,
            up_u: gates("up.U", "")?,
            up_w: (1..=config.arity)
                .map(|k| gates("up.W", &format!(".{k}")))
                .collect::<Result<_>>()?,
            up_b: gates("up.b", "")?,
            down,
            attention,
            cls_up,
            cls_down,
            cls_bias: get("cls.b")?,
        })
    }
}

/// All trainable tensors of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor<T>>,
    pub(crate) layout: Layout,
}

impl<T: Scalar> ModelParams<T> {
    /// Assembles parameters from tensors, checking names and shapes against
    /// the layout `config` implies.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let specs = tensor_specs(&config);
        if specs.len() != tensors.len() {
            return Err(Error::Model(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (spec, t) in specs.iter().zip(&tensors) {
            if spec.name != t.name || spec.shape != t.shape || spec.shape.len() != t.data.len() {
                return Err(Error::Model(format!(
                    "tensor `{}` {} does not match expected `{}` {}",
                    t.name, t.shape, spec.name, spec.shape
                )));
            }
        }
        let layout = Layout::resolve(&config, &tensors)?;
        Ok(ModelParams {
            config,
            tensors,
            layout,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn embeddings_id(&self) -> usize {
        self.layout.embeddings
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Zeroes every downward-pass tensor (no-op for `TreeGru`).
    pub fn zero_downward(&mut self) {
        for t in &mut self.tensors {
            if t.name.starts_with("down.") {
                t.data.iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    /// Converts every element to another precision.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape,
                    kind: t.kind,
                    data: t.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }
}

/// Fresh parameters: recurrent matrices `0.5 * I`, classifier and
/// attention weights `N(0, 1) * 0.01`, biases zero. Embedding rows come
/// from `embeddings` when given, otherwise from the uniform OOV range.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(
    config: ModelConfig,
    embeddings: Option<&EmbeddingMatrix<T>>,
    rng: &mut R,
) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut tensors = Vec::new();
    for spec in tensor_specs(&config) {
        let (rows, cols) = (spec.shape.rows, spec.shape.cols);
        let data = match spec.kind {
            TensorKind::Embedding => match embeddings {
                Some(m) => {
                    if m.rows != rows || m.dim != cols {
                        return Err(Error::Model(format!(
                            "embedding matrix is {}x{}, model expects {rows}x{cols}",
                            m.rows, m.dim
                        )));
                    }
                    m.vectors.clone()
                }
                None => EmbeddingMatrix::<T>::random(rows, cols, rng).vectors,
            },
            TensorKind::Recurrent => {
                let mut data = vec![T::zero(); rows * cols];
                for i in 0..rows.min(cols) {
                    data[i * cols + i] = T::lit(RECURRENT_INIT);
                }
                data
            }
            TensorKind::Gaussian => (0..rows * cols)
                .map(|_| T::sample_normal(rng) * T::lit(CLASSIFIER_INIT_SCALE))
                .collect(),
            TensorKind::Bias => vec![T::zero(); rows * cols],
        };
        tensors.push(Tensor {
            name: spec.name,
            shape: spec.shape,
            kind: spec.kind,
            data,
        });
    }
    ModelParams::from_tensors(config, tensors)
}

/// Itemized scalar-parameter count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub items: Vec<(String, usize)>,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.items.iter().map(|(_, n)| n).sum()
    }

    /// Sum over tensors whose name starts with `prefix`.
    pub fn group(&self, prefix: &str) -> usize {
        self.items
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, n)| n)
            .sum()
    }
}

impl fmt::Display for ParamCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.items.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        for (name, n) in &self.items {
            writeln!(f, "{name:<width$}  {n:>10}")?;
        }
        write!(f, "{:<width$}  {:>10}", "total", self.total())
    }
}

pub fn count_parameters(config: &ModelConfig) -> ParamCount {
    ParamCount {
        items: tensor_specs(config)
            .into_iter()
            .map(|s| (s.name, s.shape.len()))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(variant: Variant, attention: bool, d: usize, v: usize, c: usize) -> ModelConfig {
        ModelConfig::new(variant, attention, d, v, c)
    }

    #[test]
    fn reference_counts_for_the_unidirectional_model() {
        let plain = count_parameters(&cfg(Variant::TreeGru, false, 300, 21_702, 5));
        assert_eq!(plain.group("embeddings"), 6_510_600);
        assert_eq!(plain.group("up.U"), 270_000);
        assert_eq!(plain.group("up.W"), 540_000);
        assert_eq!(plain.group("up.b"), 900);
        assert_eq!(plain.group("cls."), 1_505);
        assert_eq!(plain.total(), 7_323_005);

        let attn = count_parameters(&cfg(Variant::TreeGru, true, 300, 21_702, 5));
        assert_eq!(attn.group("attn."), 90_600);
        assert_eq!(attn.total(), 7_413_605);
    }

    #[test]
    fn bidirectional_counts() {
        let plain = count_parameters(&cfg(Variant::TreeBiGru, false, 300, 21_702, 5));
        assert_eq!(plain.total(), 7_865_405);
        let attn = count_parameters(&cfg(Variant::TreeBiGru, true, 300, 21_702, 5));
        assert_eq!(attn.group("attn."), 180_600);
        assert_eq!(attn.total(), 8_046_005);
    }

    #[test]
    fn toy_count() {
        assert_eq!(count_parameters(&cfg(Variant::TreeGru, false, 2, 3, 2)).total(), 54);
    }

    #[test]
    fn init_follows_recipe() {
        let config = cfg(Variant::TreeBiGru, true, 4, 5, 3);
        let p: ModelParams<f64> = init_params(config, None, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for t in &p.tensors {
            match t.kind {
                TensorKind::Recurrent => {
                    for i in 0..4 {
                        for j in 0..4 {
                            assert_eq!(t.get(i, j), if i == j { 0.5 } else { 0.0 }, "{}", t.name);
                        }
                    }
                }
                TensorKind::Bias => assert!(t.data.iter().all(|&x| x == 0.0), "{}", t.name),
                TensorKind::Gaussian => assert!(t.data.iter().any(|&x| x != 0.0)),
                TensorKind::Embedding => {
                    assert!(t.data.iter().all(|x| x.abs() <= crate::embeddings::OOV_RANGE))
                }
            }
        }
        assert_eq!(p.scalar_count(), count_parameters(&config).total());
    }

    #[test]
    fn init_is_seeded() {
        let config = cfg(Variant::TreeGru, true, 3, 4, 5);
        let a: ModelParams<f64> = init_params(config, None, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b: ModelParams<f64> = init_params(config, None, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let c: ModelParams<f64> = init_params(config, None, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_mismatched_embeddings_and_tensors() {
        let config = cfg(Variant::TreeGru, false, 3, 4, 5);
        let emb = EmbeddingMatrix::<f64>::random(4, 2, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(init_params(config, Some(&emb), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let p: ModelParams<f64> = init_params(config, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tensors = p.tensors.clone();
        tensors.pop();
        assert!(ModelParams::from_tensors(config, tensors).is_err());
    }
}
