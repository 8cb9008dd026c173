//! Convolutional-recurrent acoustic model: features to per-frame token
//! logits and posteriorgram.

use ndarray::{Array2, Array3, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::STATIC_DIM;
use crate::nn::{BiLstm, BiLstmCache, Conv2d, Dense, Dropout, Layer, MaxPool2d, Mode, Parameterized, Relu, Softmax};
use crate::scalar::Scalar;

/// Static, delta and delta-delta blocks become input channels.
pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcousticConfig {
    pub conv_blocks: usize,
    pub conv_filters: usize,
    pub kernel: usize,
    pub pool_time: usize,
    pub pool_freq: usize,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    pub dropout: f64,
    pub recurrent_dropout: f64,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        AcousticConfig {
            conv_blocks: 2,
            conv_filters: 32,
            kernel: 3,
            pool_time: 2,
            pool_freq: 3,
            lstm_layers: 3,
            lstm_hidden: 256,
            dropout: 0.1,
            recurrent_dropout: 0.1,
        }
    }
}

impl AcousticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("acoustic: {m}")));
        if self.conv_blocks == 0 || self.conv_filters == 0 || self.lstm_layers == 0 || self.lstm_hidden == 0 {
            return bad("layer counts and sizes must be positive");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel must be odd");
        }
        if self.pool_time == 0 || self.pool_freq == 0 || self.pooled_bins() == 0 {
            return bad("pooling leaves no frequency bins");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.recurrent_dropout) {
            return bad("dropout rates must lie in [0, 1)");
        }
        Ok(())
    }

    /// Frequency bins left after all pooling stages.
    pub fn pooled_bins(&self) -> usize {
        (0..self.conv_blocks).fold(STATIC_DIM, |b, _| b / self.pool_freq.max(1))
    }

    /// Minimum input frames for one output frame.
    pub fn min_frames(&self) -> usize {
        self.pool_time.pow(self.conv_blocks as u32)
    }

    /// Output frames for `frames` input frames.
    pub fn output_frames(&self, frames: usize) -> usize {
        (0..self.conv_blocks).fold(frames, |n, _| n / self.pool_time)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticModel<T: Scalar> {
    pub config: AcousticConfig,
    pub convs: Vec<Conv2d<T>>,
    pub lstms: Vec<BiLstm<T>>,
    pub output: Dense<T>,
}

/// Activations kept for the backward pass.
#[derive(Debug)]
pub struct AcousticCache<T: Scalar> {
    conv: Vec<<Conv2d<T> as Layer<T>>::Cache>,
    relu: Vec<Array3<T>>,
    pool: Vec<<MaxPool2d as Layer<T>>::Cache>,
    pooled_dim: (usize, usize, usize),
    lstm: Vec<BiLstmCache<T>>,
    dropout: Vec<Option<Array2<T>>>,
    dense: Array2<T>,
}

/// Output of a forward pass.
pub struct AcousticOutput<T: Scalar> {
    pub logits: Array2<T>,
    pub posteriorgram: Array2<T>,
    pub cache: AcousticCache<T>,
}

/// `(N, 3·41)` feature rows to `(3, N, 41)` channel maps.
fn to_channels<T: Scalar>(features: ArrayView2<T>) -> Array3<T> {
    let n = features.nrows();
    Array3::from_shape_fn((INPUT_CHANNELS, n, STATIC_DIM), |(c, t, f)| features[[t, c * STATIC_DIM + f]])
}

/// `(K, N', B)` maps to `(N', K·B)` frame vectors, channel-major.
fn to_frames<T: Scalar>(maps: &Array3<T>) -> Array2<T> {
    let (k, n, b) = maps.dim();
    Array2::from_shape_fn((n, k * b), |(t, j)| maps[[j / b, t, j % b]])
}

fn from_frames<T: Scalar>(frames: &Array2<T>, dim: (usize, usize, usize)) -> Array3<T> {
    let (_, _, b) = dim;
    Array3::from_shape_fn(dim, |(c, t, f)| frames[[t, c * b + f]])
}

pub fn features_as<T: Scalar>(data: ArrayView2<f32>) -> Array2<T> {
    data.mapv(|v| T::of(v as f64))
}

impl<T: Scalar> AcousticModel<T> {
    pub fn new(config: AcousticConfig, vocab: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab < 2 {
            return Err(Error::Config("acoustic: charset needs at least 2 tokens".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut channels = INPUT_CHANNELS;
        for _ in 0..config.conv_blocks {
            convs.push(Conv2d::new(channels, config.conv_filters, config.kernel, &mut rng));
            channels = config.conv_filters;
        }
        let mut lstms = Vec::new();
        let mut width = config.conv_filters * config.pooled_bins();
        for _ in 0..config.lstm_layers {
            lstms.push(BiLstm::new(width, config.lstm_hidden, true, config.recurrent_dropout, &mut rng));
            width = 2 * config.lstm_hidden;
        }
        let output = Dense::new(width, vocab, &mut rng);
        Ok(AcousticModel {
            config,
            convs,
            lstms,
            output,
        })
    }

    pub fn vocab(&self) -> usize {
        self.output.outputs()
    }

    pub fn zeros_like(&self) -> Self {
        AcousticModel {
            config: self.config.clone(),
            convs: self.convs.iter().map(Conv2d::zeros_like).collect(),
            lstms: self.lstms.iter().map(BiLstm::zeros_like).collect(),
            output: self.output.zeros_like(),
        }
    }

    fn pool(&self) -> MaxPool2d {
        MaxPool2d {
            time: self.config.pool_time,
            freq: self.config.pool_freq,
        }
    }

    /// Logits and posteriorgram for one excerpt of `N × 123` features.
    pub fn forward(&self, features: ArrayView2<T>, mode: &mut Mode) -> Result<AcousticOutput<T>> {
        let n = features.nrows();
        if features.ncols() != INPUT_CHANNELS * STATIC_DIM {
            return Err(crate::nn::shape_err("acoustic", ("N", INPUT_CHANNELS * STATIC_DIM), features.dim()));
        }
        if n < self.config.min_frames() {
            return Err(Error::Invalid(format!(
                "acoustic model needs at least {} frames, got {n}",
                self.config.min_frames()
            )));
        }
        let pool = self.pool();
        let mut maps = to_channels(features);
        let (mut conv_c, mut relu_c, mut pool_c) = (Vec::new(), Vec::new(), Vec::new());
        for conv in &self.convs {
            let (y, c) = conv.forward(&maps, mode)?;
            conv_c.push(c);
            let (y, r) = Relu.forward(&y, mode)?;
            relu_c.push(r);
            let (y, p) = pool.forward(&y, mode)?;
            pool_c.push(p);
            maps = y;
        }
        let pooled_dim = maps.dim();
        let mut x = to_frames(&maps);
        let drop = Dropout {
            rate: self.config.dropout,
        };
        let (mut lstm_c, mut drop_c) = (Vec::new(), Vec::new());
        for (i, lstm) in self.lstms.iter().enumerate() {
            let (y, c) = lstm.forward(&x, mode)?;
            lstm_c.push(c);
            x = y;
            if i + 1 < self.lstms.len() {
                let (y, d) = drop.forward(&x, mode)?;
                drop_c.push(d);
                x = y;
            }
        }
        let (logits, dense) = self.output.forward(&x, mode)?;
        let posteriorgram = Softmax::apply(&logits);
        Ok(AcousticOutput {
            logits,
            posteriorgram,
            cache: AcousticCache {
                conv: conv_c,
                relu: relu_c,
                pool: pool_c,
                pooled_dim,
                lstm: lstm_c,
                dropout: drop_c,
                dense,
            },
        })
    }

    /// Parameter gradients from the gradient with respect to the logits.
    pub fn backward(&self, cache: &AcousticCache<T>, grad_logits: &Array2<T>) -> Result<AcousticModel<T>> {
        let mut grads = self.zeros_like();
        let (mut dx, g) = self.output.backward(&cache.dense, grad_logits)?;
        grads.output = g;
        let drop = Dropout {
            rate: self.config.dropout,
        };
        for i in (0..self.lstms.len()).rev() {
            if i + 1 < self.lstms.len() {
                dx = Layer::<T>::backward(&drop, &cache.dropout[i], &dx)?.0;
            }
            let (d, g) = self.lstms[i].backward(&cache.lstm[i], &dx)?;
            grads.lstms[i] = g;
            dx = d;
        }
        let pool = self.pool();
        let mut dmaps = from_frames(&dx, cache.pooled_dim);
        for i in (0..self.convs.len()).rev() {
            dmaps = Layer::<T>::backward(&pool, &cache.pool[i], &dmaps)?.0;
            dmaps = Layer::<T>::backward(&Relu, &cache.relu[i], &dmaps)?.0;
            if i == 0 {
                grads.convs[0] = self.convs[0].backward_params(&cache.conv[0], &dmaps)?;
            } else {
                let (d, g) = self.convs[i].backward(&cache.conv[i], &dmaps)?;
                grads.convs[i] = g;
                dmaps = d;
            }
        }
        Ok(grads)
    }

    /// Posteriorgram in evaluation mode.
    pub fn posteriorgram(&self, features: ArrayView2<T>) -> Result<Array2<T>> {
        Ok(self.forward(features, &mut Mode::Eval)?.posteriorgram)
    }
}

impl<T: Scalar> Parameterized<T> for AcousticModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&crate::nn::join(prefix, &format!("conv{i}")), f);
        }
        for (i, l) in self.lstms.iter().enumerate() {
            l.visit(&crate::nn::join(prefix, &format!("lstm{i}")), f);
        }
        self.output.visit(&crate::nn::join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&crate::nn::join(prefix, &format!("conv{i}")), f);
        }
        for (i, l) in self.lstms.iter_mut().enumerate() {
            l.visit_mut(&crate::nn::join(prefix, &format!("lstm{i}")), f);
        }
        self.output.visit_mut(&crate::nn::join(prefix, "output"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::ctc_loss_grad;
    use crate::selftest::{fd_params, rel_err};
    use rand::Rng;

    fn tiny() -> AcousticConfig {
        AcousticConfig {
            conv_filters: 2,
            lstm_layers: 2,
            lstm_hidden: 3,
            ..Default::default()
        }
    }

    fn random_features(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, 123), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn output_frames_halve_twice() {
        let cfg = AcousticConfig::default();
        assert_eq!(cfg.output_frames(1249), 312);
        assert_eq!(cfg.pooled_bins(), 4);
        assert_eq!(cfg.min_frames(), 4);
    }

    #[test]
    fn shapes_and_normalization() {
        let m = AcousticModel::<f64>::new(tiny(), 7, 1).unwrap();
        let out = m.forward(random_features(37, 2).view(), &mut Mode::Eval).unwrap();
        assert_eq!(out.posteriorgram.dim(), (9, 7));
        for row in out.posteriorgram.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!(m.forward(random_features(3, 2).view(), &mut Mode::Eval).is_err());
    }

    #[test]
    fn standard_width_and_seeded_init() {
        let m = AcousticModel::<f32>::new(AcousticConfig { lstm_hidden: 8, ..Default::default() }, 66, 9).unwrap();
        assert_eq!(m.output.outputs(), 66);
        assert_eq!(m.lstms[0].fwd.inputs(), 128);
        assert_eq!(m, AcousticModel::<f32>::new(m.config.clone(), 66, 9).unwrap());
    }

    #[test]
    fn ctc_gradient_spot_check() {
        let m = AcousticModel::<f64>::new(tiny(), 5, 4).unwrap();
        let x = random_features(24, 5);
        let labels = [3, 4, 3];
        let loss = |model: &AcousticModel<f64>| {
            let out = model.forward(x.view(), &mut Mode::Eval).unwrap();
            ctc_loss_grad(out.logits.view(), &labels, 0).unwrap().0
        };
        let out = m.forward(x.view(), &mut Mode::Eval).unwrap();
        let (_, g) = ctc_loss_grad(out.logits.view(), &labels, 0).unwrap();
        let grads = m.backward(&out.cache, &g).unwrap().flat();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let idx: Vec<usize> = (0..24).map(|_| rng.random_range(0..grads.len())).collect();
        let numeric = fd_params(&m, Some(&idx), loss);
        for (k, &i) in idx.iter().enumerate() {
            assert!(rel_err(grads[i], numeric[k]) < 1e-3, "param {i}: {} vs {}", grads[i], numeric[k]);
        }
    }
}
