//! Recurrent language classifier over cleaned posteriorgrams.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Charset;
use crate::error::{Error, Result};
use crate::nn::{join, BiLstm, BiLstmCache, Dense, Dropout, Layer, Mode, Parameterized, Softmax};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub lstm_hidden: usize,
    pub dropout: f64,
    pub recurrent_dropout: f64,
    /// Frames whose blank probability exceeds this are removed.
    pub clean_threshold: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            lstm_hidden: 64,
            dropout: 0.2,
            recurrent_dropout: 0.1,
            clean_threshold: 0.95,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("classifier: {m}")));
        if self.lstm_hidden == 0 {
            return bad("lstm_hidden must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.recurrent_dropout) {
            return bad("dropout rates must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.clean_threshold) {
            return bad("clean_threshold must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Keep the rows whose blank probability is at most `threshold`, in order.
/// Returns the retained rows and their indices.
pub fn clean_posteriorgram<T: Scalar>(r: ArrayView2<T>, threshold: f64) -> (Array2<T>, Vec<usize>) {
    let kept: Vec<usize> = r
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(_, row)| row[Charset::BLANK_ID].as_f64() <= threshold)
        .map(|(i, _)| i)
        .collect();
    (r.select(Axis(0), &kept), kept)
}

/// BiLSTM (sequence) → dropout → BiLSTM (final state) → dropout → dense → softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageClassifier<T: Scalar> {
    pub config: ClassifierConfig,
    pub first: BiLstm<T>,
    pub second: BiLstm<T>,
    pub output: Dense<T>,
}

#[derive(Debug)]
pub struct ClassifierCache<T: Scalar> {
    first: BiLstmCache<T>,
    drop_first: Option<Array2<T>>,
    second: BiLstmCache<T>,
    drop_second: Option<Array2<T>>,
    dense: Array2<T>,
}

pub struct ClassifierOutput<T: Scalar> {
    pub logits: Array1<T>,
    pub probs: Array1<T>,
    pub cache: ClassifierCache<T>,
}

impl<T: Scalar> LanguageClassifier<T> {
    pub fn new(config: ClassifierConfig, vocab: usize, classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes < 2 {
            return Err(Error::Config("classifier: need at least 2 classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.lstm_hidden;
        let first = BiLstm::new(vocab, h, true, config.recurrent_dropout, &mut rng);
        let second = BiLstm::new(2 * h, h, false, config.recurrent_dropout, &mut rng);
        let output = Dense::new(2 * h, classes, &mut rng);
        Ok(LanguageClassifier {
            config,
            first,
            second,
            output,
        })
    }

    pub fn classes(&self) -> usize {
        self.output.outputs()
    }

    pub fn zeros_like(&self) -> Self {
        LanguageClassifier {
            config: self.config.clone(),
            first: self.first.zeros_like(),
            second: self.second.zeros_like(),
            output: self.output.zeros_like(),
        }
    }

    fn dropout(&self) -> Dropout {
        Dropout {
            rate: self.config.dropout,
        }
    }

    /// Language scores for a cleaned posteriorgram.
    pub fn forward(&self, cleaned: &Array2<T>, mode: &mut Mode) -> Result<ClassifierOutput<T>> {
        if cleaned.nrows() == 0 {
            return Err(Error::NoVoicedFrames);
        }
        let drop = self.dropout();
        let (x, first) = self.first.forward(cleaned, mode)?;
        let (x, drop_first) = drop.forward(&x, mode)?;
        let (x, second) = self.second.forward(&x, mode)?;
        let (x, drop_second) = drop.forward(&x, mode)?;
        let (logits, dense) = self.output.forward(&x, mode)?;
        let logits = logits.row(0).to_owned();
        let probs = Softmax::apply(&logits.clone().insert_axis(Axis(0))).row(0).to_owned();
        Ok(ClassifierOutput {
            logits,
            probs,
            cache: ClassifierCache {
                first,
                drop_first,
                second,
                drop_second,
                dense,
            },
        })
    }

    /// Gradient with respect to the cleaned posteriorgram, and parameter
    /// gradients, from the gradient with respect to the logits.
    pub fn backward(&self, cache: &ClassifierCache<T>, grad_logits: &Array1<T>) -> Result<(Array2<T>, Self)> {
        let drop = self.dropout();
        let g = grad_logits.clone().insert_axis(Axis(0));
        let (dx, output) = self.output.backward(&cache.dense, &g)?;
        let (dx, ()) = Layer::<T>::backward(&drop, &cache.drop_second, &dx)?;
        let (dx, second) = self.second.backward(&cache.second, &dx)?;
        let (dx, ()) = Layer::<T>::backward(&drop, &cache.drop_first, &dx)?;
        let (dx, first) = self.first.backward(&cache.first, &dx)?;
        Ok((
            dx,
            LanguageClassifier {
                config: self.config.clone(),
                first,
                second,
                output,
            },
        ))
    }

    /// Evaluation-mode scores for a raw posteriorgram (cleaned here).
    pub fn scores(&self, posteriorgram: ArrayView2<T>) -> Result<Array1<T>> {
        let (cleaned, _) = clean_posteriorgram(posteriorgram, self.config.clean_threshold);
        Ok(self.forward(&cleaned, &mut Mode::Eval)?.probs)
    }
}

impl<T: Scalar> Parameterized<T> for LanguageClassifier<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.first.visit(&join(prefix, "first"), f);
        self.second.visit(&join(prefix, "second"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.first.visit_mut(&join(prefix, "first"), f);
        self.second.visit_mut(&join(prefix, "second"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::weighted_xent_grad;
    use crate::selftest::{fd_params, rel_err};
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn cleaning_is_strict() {
        let r = array![[0.97, 0.03], [0.50, 0.50], [0.95, 0.05]];
        let (kept, idx) = clean_posteriorgram(r.view(), 0.95);
        assert_eq!(idx, vec![1, 2]);
        assert_eq!(kept.nrows(), 2);
        let all_blank = array![[1.0, 0.0], [0.99, 0.01]];
        assert_eq!(clean_posteriorgram(all_blank.view(), 0.95).0.nrows(), 0);
        assert_eq!(clean_posteriorgram(r.view(), 1.0).0, r);
    }

    fn random_r(n: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Array2::from_shape_simple_fn((n, c), || rng.random_range(-2.0..2.0));
        Softmax::apply(&raw)
    }

    #[test]
    fn scores_normalized_and_shape_stable() {
        let cfg = ClassifierConfig {
            lstm_hidden: 4,
            ..Default::default()
        };
        let clf = LanguageClassifier::<f64>::new(cfg, 6, 3, 1).unwrap();
        let r = random_r(10, 6, 2);
        let p = clf.forward(&r, &mut Mode::Eval).unwrap().probs;
        assert!((p.sum() - 1.0).abs() < 1e-12);
        let rev = r.slice(ndarray::s![..;-1, ..]).to_owned();
        assert_eq!(clf.forward(&rev, &mut Mode::Eval).unwrap().probs.len(), 3);
        let empty = Array2::<f64>::zeros((0, 6));
        assert!(matches!(clf.forward(&empty, &mut Mode::Eval), Err(Error::NoVoicedFrames)));
    }

    #[test]
    fn gradient_spot_check_in_train_mode() {
        let cfg = ClassifierConfig {
            lstm_hidden: 3,
            ..Default::default()
        };
        let clf = LanguageClassifier::<f64>::new(cfg, 5, 3, 3).unwrap();
        let r = random_r(7, 5, 4);
        let w = [1.0, 2.0, 0.5];
        let loss = |m: &LanguageClassifier<f64>| {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let p = m.forward(&r, &mut Mode::Train(&mut rng)).unwrap().probs;
            crate::nn::weighted_xent(p.view(), 1, &w).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = clf.forward(&r, &mut Mode::Train(&mut rng)).unwrap();
        let g = weighted_xent_grad(out.probs.view(), 1, &w).unwrap();
        let (_, grads) = clf.backward(&out.cache, &g).unwrap();
        let analytic = grads.flat();
        let numeric = fd_params(&clf, None, loss);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(rel_err(*a, *n) < 1e-4, "{a} vs {n}");
        }
    }
}
