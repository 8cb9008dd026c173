use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{glorot_uniform, join, shape_err, standard, Layer, Mode, Parameterized};
use crate::error::Result;
use crate::scalar::Scalar;

/// Time-distributed affine map `y_t = x_t · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T: Scalar> {
    /// `in × out`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let w = glorot_uniform(rng, inputs * outputs, inputs, outputs);
        Dense {
            weight: Array2::from_shape_vec((inputs, outputs), w).expect("dense shape"),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Dense {
            weight: Array2::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.dim()),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }
}

impl<T: Scalar> Layer<T> for Dense<T> {
    type Input = Array2<T>;
    type Output = Array2<T>;
    type Cache = Array2<T>;
    type Grads = Dense<T>;

    fn name(&self) -> &'static str {
        "dense"
    }

    fn forward(&self, input: &Array2<T>, _mode: &mut Mode) -> Result<(Array2<T>, Array2<T>)> {
        if input.ncols() != self.inputs() {
            return Err(shape_err("dense", ("T", self.inputs()), input.dim()));
        }
        let mut y = input.dot(&self.weight);
        y += &self.bias;
        Ok((y, input.clone()))
    }

    fn backward(&self, input: &Array2<T>, grad_out: &Array2<T>) -> Result<(Array2<T>, Dense<T>)> {
        if grad_out.dim() != (input.nrows(), self.outputs()) {
            return Err(shape_err("dense", (input.nrows(), self.outputs()), grad_out.dim()));
        }
        let grads = Dense {
            weight: standard(input.t().dot(grad_out)),
            bias: grad_out.sum_axis(Axis(0)),
        };
        Ok((grad_out.dot(&self.weight.t()), grads))
    }
}

impl<T: Scalar> Parameterized<T> for Dense<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f(&join(prefix, "weight"), self.weight.shape(), self.weight.as_slice().expect("contiguous"));
        f(&join(prefix, "bias"), self.bias.shape(), self.bias.as_slice().expect("contiguous"));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        let (ws, bs) = (self.weight.shape().to_vec(), self.bias.shape().to_vec());
        f(&join(prefix, "weight"), &ws, self.weight.as_slice_mut().expect("contiguous"));
        f(&join(prefix, "bias"), &bs, self.bias.as_slice_mut().expect("contiguous"));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn input_gradient_is_w_transpose_dy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Dense::<f64>::new(3, 2, &mut rng);
        let x = array![[1.0, -2.0, 0.5]];
        let dy = array![[0.3, -0.7]];
        let (_, cache) = d.forward(&x, &mut Mode::Eval).unwrap();
        let (dx, g) = d.backward(&cache, &dy).unwrap();
        for i in 0..3 {
            let expect = d.weight[[i, 0]] * 0.3 - d.weight[[i, 1]] * 0.7;
            assert!((dx[[0, i]] - expect).abs() < 1e-14);
        }
        assert_eq!(g.bias, array![0.3, -0.7]);
        assert!((g.weight[[1, 1]] - (-2.0 * -0.7)).abs() < 1e-14);
    }
}
