use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scalar::Scalar;

/// Damping constant added to the root of the accumulator.
pub const ADAGRAD_EPS: f64 = 1e-8;

/// Per-parameter sums of squared gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub accumulators: Vec<Vec<T>>,
    pub eps: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        OptimizerState {
            accumulators: params.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect(),
            eps: ADAGRAD_EPS,
        }
    }
}

fn update<T: Scalar>(theta: &mut [T], acc: &mut [T], grad: &[T], lr: T, eps: T) {
    for ((p, a), &g) in theta.iter_mut().zip(acc.iter_mut()).zip(grad) {
        if g == T::zero() {
            continue;
        }
        *a = *a + g * g;
        *p = *p - lr * g / (a.sqrt() + eps);
    }
}

/// One AdaGrad update: `acc += g^2; theta -= lr * g / (sqrt(acc) + eps)`.
///
/// Row gradients touch only their rows. The whole step is rejected if any
/// gradient entry is non-finite.
pub fn adagrad_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &Gradients<T>,
    opt: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    let bad = |id: usize| Error::NonFinite {
        what: "gradient",
        name: params.tensors[id].name.clone(),
    };
    for (&id, g) in &grads.dense {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(bad(id));
        }
    }
    for (&(id, _), g) in &grads.rows {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(bad(id));
        }
    }
    let (lr, eps) = (T::lit(lr), T::lit(opt.eps));
    for (&id, g) in &grads.dense {
        update(&mut params.tensors[id].data, &mut opt.accumulators[id], g, lr, eps);
    }
    for (&(id, row), g) in &grads.rows {
        let cols = params.tensors[id].shape.cols;
        let range = row * cols..(row + 1) * cols;
        update(
            &mut params.tensors[id].data[range.clone()],
            &mut opt.accumulators[id][range],
            g,
            lr,
            eps,
        );
    }
    Ok(())
}
