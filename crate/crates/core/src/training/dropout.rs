use rand::Rng;

use crate::scalar::Scalar;

/// Inverted-dropout mask: each entry is 0 with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    assert!((0.0..1.0).contains(&rate), "dropout rate {rate} outside [0, 1)");
    if rate == 0.0 {
        return vec![T::one(); len];
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

/// Applies inverted dropout in training mode; identity otherwise.
pub fn apply_dropout<T: Scalar, R: Rng + ?Sized>(values: &[T], rate: f64, rng: &mut R, training: bool) -> Vec<T> {
    if !training || rate == 0.0 {
        return values.to_vec();
    }
    dropout_mask::<T, R>(values.len(), rate, rng)
        .into_iter()
        .zip(values)
        .map(|(m, &v)| m * v)
        .collect()
}
