use ndarray::{Array, Array2, Array3, Axis, Dimension, ShapeBuilder};
use rand::Rng;

use super::{shape_err, Layer, Mode};
use crate::error::Result;
use crate::scalar::Scalar;

/// Inverted-dropout mask: each entry is `0` with probability `p`, else `1/(1−p)`.
pub fn dropout_mask<T: Scalar, D: Dimension, Sh: ShapeBuilder<Dim = D>, R: Rng + ?Sized>(
    rng: &mut R,
    shape: Sh,
    p: f64,
) -> Array<T, D> {
    let keep = T::of(1.0 / (1.0 - p));
    Array::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { T::zero() } else { keep })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Relu;

impl<T: Scalar> Layer<T> for Relu {
    type Input = Array3<T>;
    type Output = Array3<T>;
    type Cache = Array3<T>;
    type Grads = ();

    fn name(&self) -> &'static str {
        "relu"
    }

    fn forward(&self, input: &Array3<T>, _mode: &mut Mode) -> Result<(Array3<T>, Array3<T>)> {
        let out = input.mapv(|v| if v > T::zero() { v } else { T::zero() });
        Ok((out.clone(), out))
    }

    fn backward(&self, out: &Array3<T>, grad_out: &Array3<T>) -> Result<(Array3<T>, ())> {
        if out.dim() != grad_out.dim() {
            return Err(shape_err("relu", out.dim(), grad_out.dim()));
        }
        let mut dx = grad_out.clone();
        ndarray::Zip::from(&mut dx).and(out).for_each(|d, &o| {
            if o <= T::zero() {
                *d = T::zero();
            }
        });
        Ok((dx, ()))
    }
}

/// Non-overlapping max pooling over `(channels, time, freq)` maps. Trailing
/// rows/columns that do not fill a window are dropped.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub time: usize,
    pub freq: usize,
}

#[derive(Debug)]
pub struct PoolCache {
    input_dim: (usize, usize, usize),
    output_dim: (usize, usize, usize),
    /// flat input index of each output's maximum
    argmax: Vec<usize>,
}

impl<T: Scalar> Layer<T> for MaxPool2d {
    type Input = Array3<T>;
    type Output = Array3<T>;
    type Cache = PoolCache;
    type Grads = ();

    fn name(&self) -> &'static str {
        "maxpool2d"
    }

    fn forward(&self, input: &Array3<T>, _mode: &mut Mode) -> Result<(Array3<T>, PoolCache)> {
        let (c, t, f) = input.dim();
        let (ot, of) = (t / self.time, f / self.freq);
        if ot == 0 || of == 0 {
            return Err(shape_err("maxpool2d", (c, self.time, self.freq), (c, t, f)));
        }
        let x = input.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(c * ot * of);
        let mut argmax = Vec::with_capacity(c * ot * of);
        for ch in 0..c {
            for i in 0..ot {
                for j in 0..of {
                    let mut best = (ch * t + i * self.time) * f + j * self.freq;
                    let mut val = src[best];
                    for a in 0..self.time {
                        let base = (ch * t + i * self.time + a) * f + j * self.freq;
                        for (b, &v) in src[base..base + self.freq].iter().enumerate() {
                            if v > val {
                                val = v;
                                best = base + b;
                            }
                        }
                    }
                    out.push(val);
                    argmax.push(best);
                }
            }
        }
        Ok((
            Array3::from_shape_vec((c, ot, of), out).expect("pool shape"),
            PoolCache {
                input_dim: (c, t, f),
                output_dim: (c, ot, of),
                argmax,
            },
        ))
    }

    fn backward(&self, cache: &PoolCache, grad_out: &Array3<T>) -> Result<(Array3<T>, ())> {
        if cache.output_dim != grad_out.dim() {
            return Err(shape_err("maxpool2d", cache.output_dim, grad_out.dim()));
        }
        let mut dx = Array3::zeros(cache.input_dim);
        let dst = dx.as_slice_mut().expect("fresh array");
        for (&i, &g) in cache.argmax.iter().zip(grad_out.iter()) {
            dst[i] += g;
        }
        Ok((dx, ()))
    }
}

/// Inverted dropout on `(time, features)` activations; identity in eval mode.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub rate: f64,
}

impl<T: Scalar> Layer<T> for Dropout {
    type Input = Array2<T>;
    type Output = Array2<T>;
    type Cache = Option<Array2<T>>;
    type Grads = ();

    fn name(&self) -> &'static str {
        "dropout"
    }

    fn forward(&self, input: &Array2<T>, mode: &mut Mode) -> Result<(Array2<T>, Option<Array2<T>>)> {
        match mode.rng() {
            Some(rng) if self.rate > 0.0 => {
                let mask: Array2<T> = dropout_mask(rng, input.dim(), self.rate);
                Ok((input * &mask, Some(mask)))
            }
            _ => Ok((input.clone(), None)),
        }
    }

    fn backward(&self, mask: &Option<Array2<T>>, grad_out: &Array2<T>) -> Result<(Array2<T>, ())> {
        match mask {
            Some(m) => {
                if m.dim() != grad_out.dim() {
                    return Err(shape_err("dropout", m.dim(), grad_out.dim()));
                }
                Ok((grad_out * m, ()))
            }
            None => Ok((grad_out.clone(), ())),
        }
    }
}

/// Row-wise softmax.
#[derive(Debug, Clone, Copy, Default)]
pub struct Softmax;

impl Softmax {
    pub fn apply<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
        let mut out = logits.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        out
    }

    /// Vector-Jacobian product: `p ⊙ (dy − ⟨dy, p⟩)` per row.
    pub fn vjp<T: Scalar>(probs: &Array2<T>, grad_out: &Array2<T>) -> Array2<T> {
        let mut dx = Array2::zeros(probs.dim());
        for ((p, dy), mut d) in probs.rows().into_iter().zip(grad_out.rows()).zip(dx.rows_mut()) {
            let dot = p.iter().zip(dy.iter()).fold(T::zero(), |a, (&x, &y)| a + x * y);
            for ((dv, &pv), &gv) in d.iter_mut().zip(p.iter()).zip(dy.iter()) {
                *dv = pv * (gv - dot);
            }
        }
        dx
    }
}

impl<T: Scalar> Layer<T> for Softmax {
    type Input = Array2<T>;
    type Output = Array2<T>;
    type Cache = Array2<T>;
    type Grads = ();

    fn name(&self) -> &'static str {
        "softmax"
    }

    fn forward(&self, input: &Array2<T>, _mode: &mut Mode) -> Result<(Array2<T>, Array2<T>)> {
        let p = Softmax::apply(input);
        Ok((p.clone(), p))
    }

    fn backward(&self, probs: &Array2<T>, grad_out: &Array2<T>) -> Result<(Array2<T>, ())> {
        if probs.dim() != grad_out.dim() {
            return Err(shape_err("softmax", probs.dim(), grad_out.dim()));
        }
        Ok((Softmax::vjp(probs, grad_out), ()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Stateful;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pool_block_maxima() {
        // 4×6 ramp: value = 6·t + f; the max of each 2×3 block is its bottom-right cell.
        let x = Array3::from_shape_fn((1, 4, 6), |(_, t, f)| (6 * t + f) as f64);
        let (y, _) = MaxPool2d { time: 2, freq: 3 }.forward(&x, &mut Mode::Eval).unwrap();
        assert_eq!(y.dim(), (1, 2, 2));
        assert_eq!(y.into_raw_vec_and_offset().0, vec![8.0, 11.0, 20.0, 23.0]);
    }

    #[test]
    fn pool_floors_odd_sizes() {
        let x = Array3::<f64>::zeros((2, 5, 41));
        let (y, _) = MaxPool2d { time: 2, freq: 3 }.forward(&x, &mut Mode::Eval).unwrap();
        assert_eq!(y.dim(), (2, 2, 13));
    }

    #[test]
    fn dropout_eval_is_identity_both_ways() {
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64);
        let d = Dropout { rate: 0.5 };
        let (y, cache) = d.forward(&x, &mut Mode::Eval).unwrap();
        assert_eq!(y, x);
        let (dx, ()) = Layer::<f64>::backward(&d, &cache, &x).unwrap();
        assert_eq!(dx, x);
    }

    #[test]
    fn dropout_train_scales_kept_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::<f64>::ones((50, 40));
        let (y, _) = Dropout { rate: 0.2 }.forward(&x, &mut Mode::Train(&mut rng)).unwrap();
        assert!(y.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));
        let kept = y.iter().filter(|&&v| v > 0.0).count() as f64 / 2000.0;
        assert!((kept - 0.8).abs() < 0.05);
    }

    #[test]
    fn softmax_rows_normalized() {
        let x = Array2::from_shape_fn((5, 7), |(i, j)| ((i * 7 + j) as f64).sin() * 30.0);
        let p = Softmax::apply(&x);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn backward_requires_forward() {
        let mut relu = Stateful::<f64, _>::new(Relu);
        let g = Array3::<f64>::zeros((1, 2, 2));
        assert!(relu.backward(&g).is_err());
        relu.forward(&g, &mut Mode::Eval).unwrap();
        assert!(relu.backward(&g).is_ok());
        assert!(relu.backward(&g).is_err());
    }
}
