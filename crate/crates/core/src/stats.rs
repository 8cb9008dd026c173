//! Song-level posteriorgram statistics and a linear max-margin classifier
//! over them.

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-class mean then per-class population variance over all rows of all
/// parts (the retained frames of every segment of a song).
pub fn stats_pool<T: Scalar>(parts: &[ArrayView2<T>]) -> Result<Vec<f64>> {
    let classes = parts.first().map(|p| p.ncols()).unwrap_or(0);
    let frames: usize = parts.iter().map(|p| p.nrows()).sum();
    if frames == 0 {
        return Err(Error::NoVoicedFrames);
    }
    if parts.iter().any(|p| p.ncols() != classes) {
        return Err(Error::Invalid("posteriorgrams disagree on class count".into()));
    }
    let n = frames as f64;
    let mut mean = vec![0.0; classes];
    for p in parts {
        for row in p.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v.as_f64();
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; classes];
    for p in parts {
        for row in p.rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v.as_f64() - m).powi(2);
            }
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    mean.extend(var);
    Ok(mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearConfig {
    /// L2 regularization strength.
    pub l2: f64,
    /// Initial step size; decays as `lr / sqrt(1 + step)`.
    pub lr: f64,
    pub iterations: usize,
}

impl Default for LinearConfig {
    fn default() -> Self {
        LinearConfig {
            l2: 1e-3,
            lr: 0.5,
            iterations: 3000,
        }
    }
}

impl LinearConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2 >= 0.0) || !(self.lr > 0.0) || self.iterations == 0 {
            return Err(Error::Config("linear: need l2 >= 0, lr > 0, iterations > 0".into()));
        }
        Ok(())
    }
}

/// One-vs-rest linear classifier trained with a class-weighted hinge loss.
/// Inputs are length-normalized, then standardized with training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

fn normalize(x: &[f64]) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        x.iter().map(|v| v / norm).collect()
    } else {
        x.to_vec()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LinearClassifier {
    pub fn train(
        vectors: &[Vec<f64>],
        labels: &[usize],
        classes: usize,
        class_weights: &[f64],
        cfg: &LinearConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if classes < 2 {
            return Err(Error::Invalid("a linear classifier needs at least two classes".into()));
        }
        if vectors.len() != labels.len() || vectors.is_empty() {
            return Err(Error::Invalid("need one label per training vector".into()));
        }
        if class_weights.len() != classes || labels.iter().any(|&l| l >= classes) {
            return Err(Error::Invalid("labels or class weights outside the class range".into()));
        }
        for c in 0..classes {
            if !labels.contains(&c) {
                return Err(Error::Invalid(format!("class {c} has no training sample")));
            }
        }
        let dim = vectors[0].len();
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::Invalid("training vectors differ in length".into()));
        }

        // canonical order makes the full-batch sums independent of input order
        let mut samples: Vec<(usize, Vec<f64>)> =
            labels.iter().zip(vectors).map(|(&l, v)| (l, normalize(v))).collect();
        samples.sort_by(|a, b| {
            a.0.cmp(&b.0).then_with(|| {
                a.1.iter()
                    .zip(&b.1)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
        });

        let n = samples.len() as f64;
        let center: Vec<f64> = (0..dim).map(|j| samples.iter().map(|s| s.1[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..dim)
            .map(|j| {
                let var = samples.iter().map(|s| (s.1[j] - center[j]).powi(2)).sum::<f64>() / n;
                if var > 1e-24 { var.sqrt() } else { 1.0 }
            })
            .collect();
        let xs: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| s.1.iter().zip(&center).zip(&scale).map(|((v, c), k)| (v - c) / k).collect())
            .collect();
        let sw: Vec<f64> = samples.iter().map(|s| class_weights[s.0]).collect();
        let total_w: f64 = sw.iter().sum();

        let mut weights = Vec::with_capacity(classes);
        let mut bias = Vec::with_capacity(classes);
        for c in 0..classes {
            let ys: Vec<f64> = samples.iter().map(|s| if s.0 == c { 1.0 } else { -1.0 }).collect();
            let objective = |w: &[f64], b: f64| {
                let hinge: f64 = xs
                    .iter()
                    .zip(&ys)
                    .zip(&sw)
                    .map(|((x, y), s)| s * (1.0 - y * (dot(w, x) + b)).max(0.0))
                    .sum();
                hinge / total_w + 0.5 * cfg.l2 * dot(w, w)
            };
            let mut w = vec![0.0; dim];
            let mut b = 0.0;
            let mut best = (objective(&w, b), w.clone(), b);
            for step in 0..cfg.iterations {
                let mut gw: Vec<f64> = w.iter().map(|v| cfg.l2 * v).collect();
                let mut gb = 0.0;
                for ((x, y), s) in xs.iter().zip(&ys).zip(&sw) {
                    if y * (dot(&w, x) + b) < 1.0 {
                        let k = s * y / total_w;
                        gw.iter_mut().zip(x).for_each(|(g, xv)| *g -= k * xv);
                        gb -= k;
                    }
                }
                let lr = cfg.lr / (1.0 + step as f64).sqrt();
                w.iter_mut().zip(&gw).for_each(|(wv, g)| *wv -= lr * g);
                b -= lr * gb;
                let obj = objective(&w, b);
                if obj < best.0 {
                    best = (obj, w.clone(), b);
                }
            }
            weights.push(best.1);
            bias.push(best.2);
        }
        Ok(LinearClassifier {
            weights,
            bias,
            center,
            scale,
        })
    }

    pub fn margins(&self, x: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = normalize(x)
            .iter()
            .zip(&self.center)
            .zip(&self.scale)
            .map(|((v, c), k)| (v - c) / k)
            .collect();
        self.weights.iter().zip(&self.bias).map(|(w, b)| dot(w, &z) + b).collect()
    }

    /// Softmax-normalized margins.
    pub fn predict(&self, x: &[f64]) -> Array1<f64> {
        let m = self.margins(x);
        let max = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = m.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn constant_posteriorgram_has_zero_variance() {
        let r = array![[0.2, 0.8], [0.2, 0.8], [0.2, 0.8]];
        let s = stats_pool(&[r.view()]).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s[2].abs() < 1e-15 && s[3].abs() < 1e-15);
    }

    #[test]
    fn two_frame_moments() {
        let a = array![[1.0, 0.0]];
        let b = array![[0.0, 1.0]];
        assert_eq!(stats_pool(&[a.view(), b.view()]).unwrap(), vec![0.5, 0.5, 0.25, 0.25]);
        assert_eq!(stats_pool(&[b.view(), a.view()]).unwrap(), vec![0.5, 0.5, 0.25, 0.25]);
        let empty = ndarray::Array2::<f64>::zeros((0, 2));
        assert!(stats_pool(&[empty.view()]).is_err());
    }

    fn toy() -> (Vec<Vec<f64>>, Vec<usize>) {
        let xs = vec![
            vec![1.0, 0.1, 0.0],
            vec![0.9, 0.2, 0.1],
            vec![0.1, 1.0, 0.0],
            vec![0.2, 0.8, 0.1],
            vec![0.0, 0.1, 1.0],
            vec![0.1, 0.2, 0.9],
        ];
        (xs, vec![0, 0, 1, 1, 2, 2])
    }

    #[test]
    fn separable_toy_is_fit() {
        let (xs, ys) = toy();
        let clf = LinearClassifier::train(&xs, &ys, 3, &[1.0; 3], &LinearConfig::default()).unwrap();
        for (x, &y) in xs.iter().zip(&ys) {
            let p = clf.predict(x);
            assert!((p.sum() - 1.0).abs() < 1e-12);
            let arg = (0..3).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
            assert_eq!(arg, y);
        }
    }

    #[test]
    fn sample_order_does_not_matter() {
        let (mut xs, mut ys) = toy();
        let cfg = LinearConfig::default();
        let a = LinearClassifier::train(&xs, &ys, 3, &[1.0, 2.0, 1.0], &cfg).unwrap();
        xs.swap(0, 5);
        ys.swap(0, 5);
        let b = LinearClassifier::train(&xs, &ys, 3, &[1.0, 2.0, 1.0], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_class_rejected() {
        let (xs, _) = toy();
        assert!(LinearClassifier::train(&xs, &[0; 6], 1, &[1.0], &LinearConfig::default()).is_err());
        assert!(LinearClassifier::train(&xs, &[0; 6], 2, &[1.0, 1.0], &LinearConfig::default()).is_err());
    }
}
