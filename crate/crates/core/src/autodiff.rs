//! Reverse-mode automatic differentiation over a dynamically built tape.
//!
//! A [`Tape`] is grown during one forward pass. Nodes are appended in
//! evaluation order, so every node's operands have smaller indices and the
//! reverse of insertion order is a valid topological order for backward.
//! Parameter leaves borrow their storage instead of copying it; a tape lives
//! no longer than the parameters it reads.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower bound applied to the gold-class probability inside the fused loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-major shape. Vectors are `(len, 1)`; scalars `(1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn vector(len: usize) -> Self {
        Shape { rows: len, cols: 1 }
    }

    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn len(self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    pub fn is_vector(self) -> bool {
        self.cols == 1
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// Where a leaf's value comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Leaf {
    /// Input that receives no parameter gradient.
    Constant,
    /// A whole parameter tensor.
    Param(usize),
    /// One row of a parameter matrix (embedding lookup).
    ParamRow { param: usize, row: usize },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(Leaf),
    MatVec(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Scale(Var, Var),
    Sum(Vec<Var>),
    Dot(Var, Var),
    Concat(Vec<Var>),
    Element(Var, usize),
    Softmax(Var),
    LinearNormalize(Var),
    SoftmaxXent { logits: Var, gold: usize, clamped: bool },
}

struct Node<'p, T: Clone> {
    value: Cow<'p, [T]>,
    shape: Shape,
    op: Op,
}

pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    clamped: usize,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in v.iter_mut() {
        *x = *x / total;
    }
}

/// Numerically stable softmax of `logits`.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    max + v.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            clamped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of fused-loss evaluations whose gold probability hit the floor.
    pub fn clamped_losses(&self) -> usize {
        self.clamped
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    fn push(&mut self, value: Cow<'p, [T]>, shape: Shape, op: Op) -> Var {
        debug_assert_eq!(value.len(), shape.len());
        self.nodes.push(Node { value, shape, op });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Vec<T>, shape: Shape, op: Op) -> Var {
        self.push(Cow::Owned(value), shape, op)
    }

    pub fn constant(&mut self, value: Vec<T>) -> Var {
        let shape = Shape::vector(value.len());
        self.owned(value, shape, Op::Leaf(Leaf::Constant))
    }

    pub fn zeros(&mut self, len: usize) -> Var {
        self.constant(vec![T::zero(); len])
    }

    /// Records a parameter tensor without copying it.
    pub fn param(&mut self, id: usize, data: &'p [T], shape: Shape) -> Result<Var> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "param",
                format!("{} values for shape {shape}", data.len()),
            ));
        }
        Ok(self.push(Cow::Borrowed(data), shape, Op::Leaf(Leaf::Param(id))))
    }

    /// Records row `row` of a row-major parameter matrix as a vector leaf.
    pub fn param_row(&mut self, id: usize, data: &'p [T], cols: usize, row: usize) -> Result<Var> {
        let start = row * cols;
        let slice = data
            .get(start..start + cols)
            .ok_or_else(|| Error::shape("param_row", format!("row {row} outside {} values", data.len())))?;
        Ok(self.push(
            Cow::Borrowed(slice),
            Shape::vector(cols),
            Op::Leaf(Leaf::ParamRow { param: id, row }),
        ))
    }

    fn expect_vector(&self, op: &'static str, v: Var) -> Result<usize> {
        let s = self.shape(v);
        if s.is_vector() {
            Ok(s.rows)
        } else {
            Err(Error::shape(op, format!("expected a vector, got {s}")))
        }
    }

    fn same_vectors(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (la, lb) = (self.expect_vector(op, a)?, self.expect_vector(op, b)?);
        if la != lb {
            return Err(Error::shape(op, format!("lengths {la} and {lb}")));
        }
        Ok(la)
    }

    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let ms = self.shape(m);
        let n = self.expect_vector("matvec", v)?;
        if ms.cols != n {
            return Err(Error::shape("matvec", format!("{ms} times vector of {n}")));
        }
        let (mat, vec) = (self.value(m), self.value(v));
        let out: Vec<T> = mat
            .chunks_exact(ms.cols)
            .map(|row| row.iter().zip(vec).map(|(&a, &b)| a * b).sum())
            .collect();
        Ok(self.owned(out, Shape::vector(ms.rows), Op::MatVec(m, v)))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op) -> Result<Var> {
        let n = self.same_vectors(op, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.owned(out, Shape::vector(n), node))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let n = self.expect_vector("sigmoid", a)?;
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        Ok(self.owned(out, Shape::vector(n), Op::Sigmoid(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let n = self.expect_vector("tanh", a)?;
        let out = self.value(a).iter().map(|&x| x.tanh()).collect();
        Ok(self.owned(out, Shape::vector(n), Op::Tanh(a)))
    }

    /// `s * v` for a one-element `s`.
    pub fn scale(&mut self, s: Var, v: Var) -> Result<Var> {
        if self.shape(s).len() != 1 {
            return Err(Error::shape(
                "scale",
                format!("scalar operand has shape {}", self.shape(s)),
            ));
        }
        let n = self.expect_vector("scale", v)?;
        let k = self.scalar(s);
        let out = self.value(v).iter().map(|&x| k * x).collect();
        Ok(self.owned(out, Shape::vector(n), Op::Scale(s, v)))
    }

    /// Elementwise sum of a non-empty list of equal-length vectors.
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("sum", "empty operand list"))?;
        let n = self.expect_vector("sum", first)?;
        let mut out = vec![T::zero(); n];
        for &x in xs {
            if self.expect_vector("sum", x)? != n {
                return Err(Error::shape("sum", format!("length {} vs {n}", self.shape(x).rows)));
            }
            out.iter_mut().zip(self.value(x)).for_each(|(o, &v)| *o = *o + v);
        }
        Ok(self.owned(out, Shape::vector(n), Op::Sum(xs.to_vec())))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_vectors("dot", a, b)?;
        let d = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).sum();
        Ok(self.owned(vec![d], Shape::vector(1), Op::Dot(a, b)))
    }

    /// Stacks vectors (or scalars) end to end.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("concat", "empty operand list"));
        }
        let mut out = Vec::new();
        for &x in xs {
            self.expect_vector("concat", x)?;
            out.extend_from_slice(self.value(x));
        }
        let n = out.len();
        Ok(self.owned(out, Shape::vector(n), Op::Concat(xs.to_vec())))
    }

    pub fn element(&mut self, v: Var, i: usize) -> Result<Var> {
        let n = self.expect_vector("element", v)?;
        if i >= n {
            return Err(Error::shape("element", format!("index {i} of length {n}")));
        }
        let x = self.value(v)[i];
        Ok(self.owned(vec![x], Shape::vector(1), Op::Element(v, i)))
    }

    pub fn softmax(&mut self, v: Var) -> Result<Var> {
        let n = self.expect_vector("softmax", v)?;
        if n == 0 {
            return Err(Error::shape("softmax", "empty vector"));
        }
        let out = softmax(self.value(v));
        Ok(self.owned(out, Shape::vector(n), Op::Softmax(v)))
    }

    /// `v / sum(v)`.
    pub fn linear_normalize(&mut self, v: Var) -> Result<Var> {
        let n = self.expect_vector("linear_normalize", v)?;
        if n == 0 {
            return Err(Error::shape("linear_normalize", "empty vector"));
        }
        let total: T = self.value(v).iter().copied().sum();
        let out = self.value(v).iter().map(|&x| x / total).collect();
        Ok(self.owned(out, Shape::vector(n), Op::LinearNormalize(v)))
    }

    /// `-log softmax(logits)[gold]`, with the probability floored at
    /// [`PROB_FLOOR`].
    pub fn softmax_xent(&mut self, logits: Var, gold: usize) -> Result<Var> {
        let n = self.expect_vector("softmax_xent", logits)?;
        if gold >= n {
            return Err(Error::shape("softmax_xent", format!("gold class {gold} of {n}")));
        }
        let z = self.value(logits);
        let log_p = z[gold] - log_sum_exp(z);
        let floor = T::lit(PROB_FLOOR).ln();
        let clamped = log_p < floor || log_p.is_nan();
        if clamped {
            self.clamped += 1;
        }
        let loss = -(if clamped { floor } else { log_p });
        Ok(self.owned(vec![loss], Shape::vector(1), Op::SoftmaxXent { logits, gold, clamped }))
    }

    /// Reverse sweep from a scalar node. Fan-out contributions are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf(_) => {}
                Op::MatVec(m, v) => {
                    let ms = self.shape(*m);
                    let vv = self.value(*v);
                    let dm = slot(&mut grads, *m, ms.len());
                    for (row, &gi) in dm.chunks_exact_mut(ms.cols).zip(&g) {
                        row.iter_mut().zip(vv).for_each(|(d, &x)| *d = *d + gi * x);
                    }
                    let mv = self.value(*m);
                    let dv = slot(&mut grads, *v, ms.cols);
                    for (row, &gi) in mv.chunks_exact(ms.cols).zip(&g) {
                        dv.iter_mut().zip(row).for_each(|(d, &w)| *d = *d + gi * w);
                    }
                }
                Op::Add(a, b) => {
                    for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                        let d = slot(&mut grads, v, g.len());
                        d.iter_mut().zip(&g).for_each(|(d, &x)| *d = *d + sign * x);
                    }
                }
                Op::Sub(a, b) => {
                    for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                        let d = slot(&mut grads, v, g.len());
                        d.iter_mut().zip(&g).for_each(|(d, &x)| *d = *d + sign * x);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = slot(&mut grads, *a, g.len());
                    for ((d, &gi), &x) in da.iter_mut().zip(&g).zip(bv) {
                        *d = *d + gi * x;
                    }
                    let db = slot(&mut grads, *b, g.len());
                    for ((d, &gi), &x) in db.iter_mut().zip(&g).zip(av) {
                        *d = *d + gi * x;
                    }
                }
                Op::Sigmoid(a) => {
                    let da = slot(&mut grads, *a, g.len());
                    for ((d, &gi), &s) in da.iter_mut().zip(&g).zip(y.iter()) {
                        *d = *d + gi * s * (T::one() - s);
                    }
                }
                Op::Tanh(a) => {
                    let da = slot(&mut grads, *a, g.len());
                    for ((d, &gi), &t) in da.iter_mut().zip(&g).zip(y.iter()) {
                        *d = *d + gi * (T::one() - t * t);
                    }
                }
                Op::Scale(s, v) => {
                    let k = self.scalar(*s);
                    let vv = self.value(*v);
                    let ds: T = g.iter().zip(vv).map(|(&gi, &x)| gi * x).sum();
                    let dsv = slot(&mut grads, *s, 1);
                    dsv[0] = dsv[0] + ds;
                    let dv = slot(&mut grads, *v, g.len());
                    dv.iter_mut().zip(&g).for_each(|(d, &gi)| *d = *d + k * gi);
                }
                Op::Sum(xs) => {
                    for &x in xs {
                        let d = slot(&mut grads, x, g.len());
                        d.iter_mut().zip(&g).for_each(|(d, &gi)| *d = *d + gi);
                    }
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let n = av.len();
                    let da = slot(&mut grads, *a, n);
                    da.iter_mut().zip(bv).for_each(|(d, &x)| *d = *d + g[0] * x);
                    let db = slot(&mut grads, *b, n);
                    db.iter_mut().zip(av).for_each(|(d, &x)| *d = *d + g[0] * x);
                }
                Op::Concat(xs) => {
                    let mut offset = 0;
                    for &x in xs {
                        let n = self.shape(x).len();
                        let d = slot(&mut grads, x, n);
                        d.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(d, &gi)| *d = *d + gi);
                        offset += n;
                    }
                }
                Op::Element(v, idx) => {
                    let n = self.shape(*v).len();
                    let d = slot(&mut grads, *v, n);
                    d[*idx] = d[*idx] + g[0];
                }
                Op::Softmax(a) => {
                    let inner: T = g.iter().zip(y.iter()).map(|(&gi, &p)| gi * p).sum();
                    let da = slot(&mut grads, *a, g.len());
                    for ((d, &gi), &p) in da.iter_mut().zip(&g).zip(y.iter()) {
                        *d = *d + p * (gi - inner);
                    }
                }
                Op::LinearNormalize(a) => {
                    let av = self.value(*a);
                    let total: T = av.iter().copied().sum();
                    let inner: T = g.iter().zip(y.iter()).map(|(&gi, &p)| gi * p).sum();
                    let da = slot(&mut grads, *a, g.len());
                    for (d, &gi) in da.iter_mut().zip(&g) {
                        *d = *d + (gi - inner) / total;
                    }
                }
                Op::SoftmaxXent { logits, gold, clamped } => {
                    if !*clamped {
                        let p = softmax(self.value(*logits));
                        let d = slot(&mut grads, *logits, p.len());
                        for (k, (d, &pk)) in d.iter_mut().zip(&p).enumerate() {
                            let target = if k == *gold { T::one() } else { T::zero() };
                            *d = *d + g[0] * (pk - target);
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }

        let mut out = Gradients::default();
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if let Op::Leaf(leaf) = self.nodes[i].op {
                match leaf {
                    Leaf::Constant => {}
                    Leaf::Param(id) => add_into(out.dense.entry(id).or_default(), &g),
                    Leaf::ParamRow { param, row } => add_into(out.rows.entry((param, row)).or_default(), &g),
                }
            }
            out.nodes.insert(Var(i), g);
        }
        Ok(out)
    }
}

fn add_into<T: Scalar>(acc: &mut Vec<T>, g: &[T]) {
    if acc.is_empty() {
        acc.extend_from_slice(g);
    } else {
        acc.iter_mut().zip(g).for_each(|(a, &x)| *a = *a + x);
    }
}

/// Gradients of one backward sweep.
///
/// `dense` holds whole-tensor parameter gradients keyed by parameter id;
/// `rows` holds row gradients keyed by `(parameter id, row)`. Both maps
/// iterate in canonical (sorted) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub dense: BTreeMap<usize, Vec<T>>,
    pub rows: BTreeMap<(usize, usize), Vec<T>>,
    nodes: BTreeMap<Var, Vec<T>>,
}

impl<T> Default for Gradients<T> {
    fn default() -> Self {
        Gradients {
            dense: BTreeMap::new(),
            rows: BTreeMap::new(),
            nodes: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any recorded node, if it was reached.
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(&v).map(Vec::as_slice)
    }

    /// Drops per-node gradients, keeping only parameter gradients.
    pub fn into_params(mut self) -> Self {
        self.nodes.clear();
        self
    }

    /// Adds another sweep's parameter gradients into this one.
    pub fn merge(&mut self, other: &Gradients<T>) {
        for (id, g) in &other.dense {
            add_into(self.dense.entry(*id).or_default(), g);
        }
        for (key, g) in &other.rows {
            add_into(self.rows.entry(*key).or_default(), g);
        }
    }
}
