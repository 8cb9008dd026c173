use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Added inside the logarithm so a zero probability gives a finite loss.
pub const PROB_FLOOR: f64 = 1e-10;

fn check(len: usize, target: usize, weights: &[f64]) -> Result<()> {
    if target >= len {
        return Err(Error::Invalid(format!("target class {target} outside {len} classes")));
    }
    if weights.len() != len {
        return Err(Error::Invalid(format!("{} class weights for {len} classes", weights.len())));
    }
    Ok(())
}

/// Class-weighted cross-entropy `−w_target · ln(p_target + floor)`.
pub fn weighted_xent<T: Scalar>(probs: ArrayView1<T>, target: usize, class_weights: &[f64]) -> Result<f64> {
    check(probs.len(), target, class_weights)?;
    Ok(-class_weights[target] * (probs[target].as_f64() + PROB_FLOOR).ln())
}

/// Gradient of [`weighted_xent`] with respect to the logits that produced
/// `probs` through a softmax.
pub fn weighted_xent_grad<T: Scalar>(probs: ArrayView1<T>, target: usize, class_weights: &[f64]) -> Result<Array1<T>> {
    check(probs.len(), target, class_weights)?;
    let pt = probs[target].as_f64();
    let coef = -class_weights[target] / (pt + PROB_FLOOR) * pt;
    Ok(Array1::from_shape_fn(probs.len(), |k| {
        let delta = if k == target { 1.0 } else { 0.0 };
        T::of(coef * (delta - probs[k].as_f64()))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn examples() {
        let certain = array![0.0, 1.0, 0.0];
        assert!(weighted_xent(certain.view(), 1, &[3.0, 2.0, 1.0]).unwrap().abs() < 1e-9);
        let half = array![0.5, 0.5];
        assert!((weighted_xent(half.view(), 0, &[1.0, 1.0]).unwrap() - 0.6931).abs() < 1e-4);
        assert!((weighted_xent(half.view(), 0, &[2.5, 1.0]).unwrap() - 1.7329).abs() < 1e-4);
    }

    #[test]
    fn bad_target() {
        let p = array![0.5f32, 0.5];
        assert!(weighted_xent(p.view(), 2, &[1.0, 1.0]).is_err());
    }
}
