use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;

use super::{glorot_uniform, join, shape_err, standard, Layer, Mode, Parameterized};
use crate::error::Result;
use crate::scalar::Scalar;

/// 2-D convolution over `(channels, time, freq)` maps, stride 1, zero "same"
/// padding, odd square kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T: Scalar> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `out × (in · k · k)`, inner order `(channel, dt, df)`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug)]
pub struct ConvCache<T> {
    input_dim: (usize, usize, usize),
    cols: Array2<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let fan = kernel * kernel;
        let w = glorot_uniform(rng, out_channels * in_channels * fan, in_channels * fan, out_channels * fan);
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            weight: Array2::from_shape_vec((out_channels, in_channels * fan), w).expect("weight shape"),
            bias: Array1::zeros(out_channels),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            weight: Array2::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.dim()),
            ..*self
        }
    }

    /// Patch matrix `(in · k · k) × (T · F)`: row `(channel, dt, df)` is the
    /// channel plane shifted by `(dt − k/2, df − k/2)` with zero fill.
    fn im2col(&self, x: &Array3<T>) -> Array2<T> {
        let (c, t, f) = x.dim();
        let k = self.kernel;
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let mut cols = Array2::zeros((c * k * k, t * f));
        let dst = cols.as_slice_mut().expect("fresh array");
        for_each_shift(c, t, f, k, |row, ch, ts, td, f_lo, f_hi, shift| {
            let s = (ch * t + ts) * f;
            let d = row * t * f + td * f;
            let n = f_hi - f_lo;
            let s0 = (s as isize + f_lo as isize + shift) as usize;
            dst[d + f_lo..d + f_lo + n].copy_from_slice(&src[s0..s0 + n]);
        });
        cols
    }

    fn col2im(&self, dcols: &Array2<T>, dim: (usize, usize, usize)) -> Array3<T> {
        let (c, t, f) = dim;
        let k = self.kernel;
        let src = dcols.as_slice().expect("standard layout");
        let mut dx = Array3::zeros(dim);
        let dst = dx.as_slice_mut().expect("fresh array");
        for_each_shift(c, t, f, k, |row, ch, ts, td, f_lo, f_hi, shift| {
            let s = row * t * f + td * f;
            let d = (ch * t + ts) * f;
            let n = f_hi - f_lo;
            let d0 = (d as isize + f_lo as isize + shift) as usize;
            for (o, i) in dst[d0..d0 + n].iter_mut().zip(&src[s + f_lo..s + f_lo + n]) {
                *o += *i;
            }
        });
        dx
    }
}

/// Enumerate, for every patch row `(channel, dt, df)` and output time `td`,
/// the valid source time `ts` and the output frequency range `[f_lo, f_hi)`
/// whose source lies inside the map; `shift` is the frequency offset.
#[allow(clippy::type_complexity)]
fn for_each_shift(
    c: usize,
    t: usize,
    f: usize,
    k: usize,
    mut body: impl FnMut(usize, usize, usize, usize, usize, usize, isize),
) {
    let pad = (k / 2) as isize;
    for ch in 0..c {
        for a in 0..k {
            for b in 0..k {
                let row = (ch * k + a) * k + b;
                let dt = a as isize - pad;
                let df = b as isize - pad;
                let f_lo = (-df).max(0) as usize;
                let f_hi = (f as isize - df).min(f as isize).max(0) as usize;
                if f_lo >= f_hi {
                    continue;
                }
                for td in 0..t {
                    let ts = td as isize + dt;
                    if ts < 0 || ts >= t as isize {
                        continue;
                    }
                    body(row, ch, ts as usize, td, f_lo, f_hi, df);
                }
            }
        }
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    type Input = Array3<T>;
    type Output = Array3<T>;
    type Cache = ConvCache<T>;
    type Grads = Conv2d<T>;

    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&self, input: &Array3<T>, _mode: &mut Mode) -> Result<(Array3<T>, ConvCache<T>)> {
        let (c, t, f) = input.dim();
        if c != self.in_channels {
            return Err(shape_err("conv2d", (self.in_channels, "T", "F"), (c, t, f)));
        }
        let cols = self.im2col(input);
        let mut y = self.weight.dot(&cols);
        y += &self.bias.view().insert_axis(Axis(1));
        let out = y.into_shape_with_order((self.out_channels, t, f)).expect("conv output shape");
        Ok((
            out,
            ConvCache {
                input_dim: (c, t, f),
                cols,
            },
        ))
    }

    fn backward(&self, cache: &ConvCache<T>, grad_out: &Array3<T>) -> Result<(Array3<T>, Conv2d<T>)> {
        let (_, t, f) = cache.input_dim;
        if grad_out.dim() != (self.out_channels, t, f) {
            return Err(shape_err("conv2d", (self.out_channels, t, f), grad_out.dim()));
        }
        let dy = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_channels, t * f))
            .expect("conv grad shape");
        let grads = self.param_grads(cache, &dy);
        let dcols = self.weight.t().dot(&dy);
        Ok((self.col2im(&dcols, cache.input_dim), grads))
    }
}

impl<T: Scalar> Conv2d<T> {
    fn param_grads(&self, cache: &ConvCache<T>, dy: &Array2<T>) -> Conv2d<T> {
        let mut grads = self.zeros_like();
        grads.weight = standard(dy.dot(&cache.cols.t()));
        grads.bias = dy.sum_axis(Axis(1));
        grads
    }

    /// Parameter gradients only, for a first layer whose input needs none.
    pub fn backward_params(&self, cache: &ConvCache<T>, grad_out: &Array3<T>) -> Result<Conv2d<T>> {
        let (_, t, f) = cache.input_dim;
        if grad_out.dim() != (self.out_channels, t, f) {
            return Err(shape_err("conv2d", (self.out_channels, t, f), grad_out.dim()));
        }
        let dy = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_channels, t * f))
            .expect("conv grad shape");
        Ok(self.param_grads(cache, &dy))
    }
}

impl<T: Scalar> Parameterized<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        let wshape = [self.out_channels, self.in_channels, self.kernel, self.kernel];
        f(&join(prefix, "weight"), &wshape, self.weight.as_slice().expect("contiguous"));
        f(&join(prefix, "bias"), &[self.out_channels], self.bias.as_slice().expect("contiguous"));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        let wshape = [self.out_channels, self.in_channels, self.kernel, self.kernel];
        f(&join(prefix, "weight"), &wshape, self.weight.as_slice_mut().expect("contiguous"));
        f(&join(prefix, "bias"), &[self.out_channels], self.bias.as_slice_mut().expect("contiguous"));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_center_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::<f64>::new(2, 2, 3, &mut rng);
        conv.weight.fill(0.0);
        // output channel o copies input channel o through the kernel centre
        for o in 0..2 {
            conv.weight[[o, (o * 3 + 1) * 3 + 1]] = 1.0;
        }
        let x = Array3::from_shape_fn((2, 5, 7), |(c, t, f)| (c * 100 + t * 10 + f) as f64);
        let (y, _) = conv.forward(&x, &mut Mode::Eval).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn channel_mismatch_names_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::<f64>::new(3, 4, 3, &mut rng);
        let err = conv.forward(&Array3::zeros((2, 4, 4)), &mut Mode::Eval).unwrap_err();
        assert!(err.to_string().contains("conv2d"));
    }
}
