//! Small reverse-mode layer library: just the layers the acoustic model and
//! the language classifier need, each with a hand-written backward pass.
//!
//! Layers are immutable during a forward pass. `forward` returns the output
//! together with a cache; `backward` consumes that cache and the upstream
//! gradient and returns the input gradient plus a gradient value shaped like
//! the layer itself. Training code sums those per-item gradients in a fixed
//! order before the optimizer step.

mod adam;
mod basic;
mod conv;
mod dense;
mod init;
mod loss;
mod lstm;

pub use adam::{Adam, AdamConfig};
pub use basic::{dropout_mask, Dropout, MaxPool2d, Relu, Softmax};
pub use conv::Conv2d;
pub use dense::Dense;
pub use init::{glorot_uniform, scaled_uniform};
pub use loss::{weighted_xent, weighted_xent_grad};
pub use lstm::{BiLstm, BiLstmCache, Lstm, LstmCache};

use std::marker::PhantomData;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Forward-pass mode. Dropout draws its masks from the carried generator,
/// so a seeded generator makes training passes reproducible.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        match self {
            Mode::Eval => None,
            Mode::Train(rng) => Some(rng),
        }
    }
}

/// Visit every trainable tensor as a flat slice, in a fixed order.
pub trait Parameterized<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, v| n += v.len());
        n
    }

    /// All parameters concatenated in visit order.
    fn flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, _, v| out.extend_from_slice(v));
        out
    }

    fn set_flat(&mut self, values: &[T]) {
        let mut off = 0;
        self.visit_mut("", &mut |_, _, v| {
            v.copy_from_slice(&values[off..off + v.len()]);
            off += v.len();
        });
        assert_eq!(off, values.len(), "flat parameter length mismatch");
    }

    fn fill_zero(&mut self) {
        self.visit_mut("", &mut |_, _, v| v.iter_mut().for_each(|x| *x = T::zero()));
    }

    /// `self += other`, parameter by parameter.
    fn add_assign_from(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.flat();
        let mut off = 0;
        self.visit_mut("", &mut |_, _, v| {
            let n = v.len();
            for (d, s) in v.iter_mut().zip(&src[off..off + n]) {
                *d += *s;
            }
            off += n;
        });
    }

    fn scale(&mut self, factor: T) {
        self.visit_mut("", &mut |_, _, v| v.iter_mut().for_each(|x| *x *= factor));
    }

    /// Euclidean norm over every parameter.
    fn norm(&self) -> f64 {
        let mut sq = 0.0;
        self.visit("", &mut |_, _, v| sq += v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>());
        sq.sqrt()
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A differentiable layer.
pub trait Layer<T: Scalar> {
    type Input;
    type Output;
    type Cache;
    /// Parameter gradient, shaped like the layer (unit for parameter-free layers).
    type Grads;

    fn name(&self) -> &'static str;

    fn forward(&self, input: &Self::Input, mode: &mut Mode) -> Result<(Self::Output, Self::Cache)>;

    fn backward(&self, cache: &Self::Cache, grad_out: &Self::Output) -> Result<(Self::Input, Self::Grads)>;
}

/// A layer paired with the cache of its latest forward pass.
pub struct Stateful<T: Scalar, L: Layer<T>> {
    pub layer: L,
    cache: Option<L::Cache>,
    _scalar: PhantomData<T>,
}

impl<T: Scalar, L: Layer<T>> Stateful<T, L> {
    pub fn new(layer: L) -> Self {
        Stateful {
            layer,
            cache: None,
            _scalar: PhantomData,
        }
    }

    pub fn forward(&mut self, input: &L::Input, mode: &mut Mode) -> Result<L::Output> {
        let (out, cache) = self.layer.forward(input, mode)?;
        self.cache = Some(cache);
        Ok(out)
    }

    /// Consumes the cached activations; a second call without a new forward fails.
    pub fn backward(&mut self, grad_out: &L::Output) -> Result<(L::Input, L::Grads)> {
        let cache = self.cache.take().ok_or(Error::BackwardBeforeForward(self.layer.name()))?;
        self.layer.backward(&cache, grad_out)
    }
}

pub(crate) fn shape_err(layer: &'static str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Error {
    Error::Shape {
        layer,
        expected: format!("{expected:?}"),
        got: format!("{got:?}"),
    }
}

/// Force row-major layout; matrix products of transposed operands may come
/// back column-major, and parameters are visited as row-major slices.
pub(crate) fn standard<T: Scalar>(a: ndarray::Array2<T>) -> ndarray::Array2<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}
