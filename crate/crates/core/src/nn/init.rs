use rand::Rng;

use crate::scalar::Scalar;

/// Uniform Glorot initialization: `U(−a, a)` with `a = √(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, len: usize, fan_in: usize, fan_out: usize) -> Vec<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    scaled_uniform(rng, len, limit)
}

/// `U(−limit, limit)` samples.
pub fn scaled_uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, len: usize, limit: f64) -> Vec<T> {
    (0..len).map(|_| T::of(rng.random_range(-limit..=limit))).collect()
}
