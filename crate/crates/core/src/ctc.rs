//! Connectionist temporal classification: loss, gradient, best-path decoding.
//!
//! Every recursion runs in log space and in `f64`, whatever the activation
//! precision, since posteriorgrams of a few hundred frames underflow quickly.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Upper bound on the number of paths [`oracle_ctc`] agrees to enumerate.
pub const ORACLE_MAX_PATHS: f64 = 1e6;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Interleave blanks around every label: `ε y1 ε y2 … ε`.
pub fn expand_labels(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(2 * labels.len() + 1);
    out.push(blank);
    for &l in labels {
        out.push(l);
        out.push(blank);
    }
    out
}

/// Minimum number of frames able to emit `labels`: one per label plus one
/// separating blank per consecutive repeat.
pub fn required_frames(labels: &[usize]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

fn check_labels(labels: &[usize], classes: usize, blank: usize) -> Result<()> {
    if blank >= classes {
        return Err(Error::Invalid(format!("blank id {blank} outside {classes} classes")));
    }
    for &l in labels {
        if l == blank || l >= classes {
            return Err(Error::Invalid(format!("label id {l} is blank or out of range")));
        }
    }
    Ok(())
}

fn check_alignable(frames: usize, labels: &[usize]) -> Result<()> {
    let required = required_frames(labels);
    if frames < required.max(1) {
        return Err(Error::Unalignable {
            frames,
            label_len: labels.len(),
            required,
        });
    }
    Ok(())
}

/// Whether state `s` may be reached by skipping the blank at `s - 1`.
fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

fn forward_table(lp: &Array2<f64>, ext: &[usize], blank: usize) -> Array2<f64> {
    let (frames, _) = lp.dim();
    let states = ext.len();
    let mut alpha = Array2::from_elem((frames, states), f64::NEG_INFINITY);
    alpha[[0, 0]] = lp[[0, ext[0]]];
    if states > 1 {
        alpha[[0, 1]] = lp[[0, ext[1]]];
    }
    for t in 1..frames {
        for s in 0..states {
            let mut acc = alpha[[t - 1, s]];
            if s >= 1 {
                acc = log_add(acc, alpha[[t - 1, s - 1]]);
            }
            if can_skip(ext, s, blank) {
                acc = log_add(acc, alpha[[t - 1, s - 2]]);
            }
            alpha[[t, s]] = acc + lp[[t, ext[s]]];
        }
    }
    alpha
}

fn backward_table(lp: &Array2<f64>, ext: &[usize], blank: usize) -> Array2<f64> {
    let (frames, _) = lp.dim();
    let states = ext.len();
    let last = frames - 1;
    let mut beta = Array2::from_elem((frames, states), f64::NEG_INFINITY);
    beta[[last, states - 1]] = lp[[last, ext[states - 1]]];
    if states > 1 {
        beta[[last, states - 2]] = lp[[last, ext[states - 2]]];
    }
    for t in (0..last).rev() {
        for s in 0..states {
            let mut acc = beta[[t + 1, s]];
            if s + 1 < states {
                acc = log_add(acc, beta[[t + 1, s + 1]]);
            }
            if s + 2 < states && can_skip(ext, s + 2, blank) {
                acc = log_add(acc, beta[[t + 1, s + 2]]);
            }
            beta[[t, s]] = acc + lp[[t, ext[s]]];
        }
    }
    beta
}

fn total_log_prob(alpha: &Array2<f64>) -> f64 {
    let (frames, states) = alpha.dim();
    let mut total = alpha[[frames - 1, states - 1]];
    if states > 1 {
        total = log_add(total, alpha[[frames - 1, states - 2]]);
    }
    total
}

fn to_f64<T: Scalar>(m: ArrayView2<T>) -> Array2<f64> {
    m.mapv(|v| v.as_f64())
}

fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// `−log P(labels | input)` from per-frame log-probabilities (`frames × classes`).
///
/// Returns [`Error::Unalignable`] when the sequence cannot be emitted in the
/// available frames.
pub fn ctc_loss<T: Scalar>(log_probs: ArrayView2<T>, labels: &[usize], blank: usize) -> Result<f64> {
    let (frames, classes) = log_probs.dim();
    check_labels(labels, classes, blank)?;
    check_alignable(frames, labels)?;
    let lp = to_f64(log_probs);
    let ext = expand_labels(labels, blank);
    let alpha = forward_table(&lp, &ext, blank);
    let total = total_log_prob(&alpha);
    if total == f64::NEG_INFINITY {
        return Err(Error::Unalignable {
            frames,
            label_len: labels.len(),
            required: required_frames(labels),
        });
    }
    Ok(-total)
}

/// [`ctc_loss`] from pre-softmax logits.
pub fn ctc_loss_logits<T: Scalar>(logits: ArrayView2<T>, labels: &[usize], blank: usize) -> Result<f64> {
    ctc_loss(log_softmax_rows(&to_f64(logits)).view(), labels, blank)
}

/// Loss and its gradient with respect to the pre-softmax logits.
///
/// The gradient row for frame `t` is `softmax(logits_t) − γ_t`, where `γ_t`
/// is the label-occupancy posterior from the forward-backward pass.
pub fn ctc_loss_grad<T: Scalar>(
    logits: ArrayView2<T>,
    labels: &[usize],
    blank: usize,
) -> Result<(f64, Array2<f64>)> {
    let (frames, classes) = logits.dim();
    check_labels(labels, classes, blank)?;
    check_alignable(frames, labels)?;
    let lp = log_softmax_rows(&to_f64(logits));
    let ext = expand_labels(labels, blank);
    let alpha = forward_table(&lp, &ext, blank);
    let beta = backward_table(&lp, &ext, blank);
    let total = total_log_prob(&alpha);
    if !total.is_finite() {
        return Err(Error::Unalignable {
            frames,
            label_len: labels.len(),
            required: required_frames(labels),
        });
    }

    let mut grad = lp.mapv(f64::exp);
    for t in 0..frames {
        let mut occupancy = vec![f64::NEG_INFINITY; classes];
        for (s, &k) in ext.iter().enumerate() {
            let g = alpha[[t, s]] + beta[[t, s]] - lp[[t, k]];
            occupancy[k] = log_add(occupancy[k], g);
        }
        for k in 0..classes {
            if occupancy[k] > f64::NEG_INFINITY {
                grad[[t, k]] -= (occupancy[k] - total).exp();
            }
        }
    }
    Ok((-total, grad))
}

/// Gradient of [`ctc_loss`] with respect to logits.
pub fn ctc_grad<T: Scalar>(logits: ArrayView2<T>, labels: &[usize], blank: usize) -> Result<Array2<f64>> {
    ctc_loss_grad(logits, labels, blank).map(|(_, g)| g)
}

/// Index of the row maximum; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(row: impl IntoIterator<Item = T>) -> usize {
    let mut best = 0;
    let mut best_val: Option<T> = None;
    for (i, v) in row.into_iter().enumerate() {
        match best_val {
            Some(b) if !(v > b) => {}
            _ => {
                best = i;
                best_val = Some(v);
            }
        }
    }
    best
}

/// Collapse a best path: drop consecutive repeats, then blanks.
pub fn collapse_path(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Best-path decoding of a posteriorgram.
pub fn greedy_decode<T: Scalar>(probs: ArrayView2<T>, blank: usize) -> Vec<usize> {
    let path: Vec<usize> = probs.rows().into_iter().map(|r| argmax(r.iter().copied())).collect();
    collapse_path(&path, blank)
}

/// Brute-force `P(labels | probs)`: the summed probability of every path whose
/// collapse equals `labels`. Refuses inputs with more than
/// [`ORACLE_MAX_PATHS`] paths.
pub fn oracle_ctc(probs: ArrayView2<f64>, labels: &[usize], blank: usize) -> Result<f64> {
    let (frames, classes) = probs.dim();
    let paths = (classes as f64).powi(frames as i32);
    if paths > ORACLE_MAX_PATHS {
        return Err(Error::OracleTooLarge(paths));
    }
    let mut path = vec![0usize; frames];
    let mut total = 0.0;
    loop {
        if collapse_path(&path, blank) == labels {
            total += path.iter().enumerate().map(|(t, &k)| probs[[t, k]]).product::<f64>();
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == frames {
                return Ok(total);
            }
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn expand_examples() {
        assert_eq!(expand_labels(&[1, 2], 0), vec![0, 1, 0, 2, 0]);
        assert_eq!(expand_labels(&[], 0), vec![0]);
        assert_eq!(expand_labels(&[1, 1], 0), vec![0, 1, 0, 1, 0]);
    }

    #[test]
    fn single_frame_loss() {
        let probs: Array2<f64> = array![[0.4, 0.6]];
        let loss = ctc_loss(probs.mapv(f64::ln).view(), &[1], 0).unwrap();
        assert!((loss - 0.5108256237659907).abs() < 1e-12);
    }

    #[test]
    fn two_frame_uniform() {
        // paths a·a, a·ε, ε·a collapse to [a]: 3 of 4 equiprobable paths.
        let probs: Array2<f64> = array![[0.5, 0.5], [0.5, 0.5]];
        let loss = ctc_loss(probs.mapv(f64::ln).view(), &[1], 0).unwrap();
        assert!((loss - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((loss - 0.2877).abs() < 1e-4);
        assert!((oracle_ctc(probs.view(), &[1], 0).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn too_few_frames_is_unalignable() {
        let probs: Array2<f64> = array![[0.2, 0.4, 0.4]];
        let err = ctc_loss(probs.mapv(f64::ln).view(), &[1, 2], 0).unwrap_err();
        assert!(matches!(err, Error::Unalignable { required: 2, .. }));
        // repeats need a separating blank
        let probs2: Array2<f64> = Array2::from_elem((2, 3), 1.0 / 3.0);
        assert!(ctc_loss(probs2.mapv(f64::ln).view(), &[1, 1], 0).is_err());
        assert_eq!(oracle_ctc(probs2.view(), &[1, 1], 0).unwrap(), 0.0);
    }

    #[test]
    fn single_frame_gradient_closed_form() {
        let logits: Array2<f64> = array![[0.3, -1.2, 2.0]];
        let g = ctc_grad(logits.view(), &[2], 0).unwrap();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        for k in 0..3 {
            let p = logits[[0, k]].exp() / z;
            let expect = p - if k == 2 { 1.0 } else { 0.0 };
            assert!((g[[0, k]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let logits: Array2<f64> = array![[0.1, 0.5, -0.3], [1.0, 0.2, 0.0], [-0.5, 0.7, 0.9], [0.0, 0.0, 0.3]];
        let g = ctc_grad(logits.view(), &[1, 2], 0).unwrap();
        for row in g.rows() {
            assert!(row.sum().abs() < 1e-9);
        }
    }

    #[test]
    fn greedy_examples() {
        let onehot = |ids: &[usize]| {
            let mut m = Array2::<f64>::zeros((ids.len(), 3));
            for (t, &k) in ids.iter().enumerate() {
                m[[t, k]] = 1.0;
            }
            m
        };
        assert_eq!(greedy_decode(onehot(&[1, 1, 0, 2]).view(), 0), vec![1, 2]);
        assert_eq!(greedy_decode(onehot(&[1, 0, 1]).view(), 0), vec![1, 1]);
        assert!(greedy_decode(onehot(&[0, 0, 0]).view(), 0).is_empty());
    }

    #[test]
    fn oracle_deterministic_rows() {
        let mut m = Array2::<f64>::zeros((4, 3));
        for (t, &k) in [2, 2, 0, 1].iter().enumerate() {
            m[[t, k]] = 1.0;
        }
        assert_eq!(oracle_ctc(m.view(), &[2, 1], 0).unwrap(), 1.0);
        assert_eq!(oracle_ctc(m.view(), &[2, 2, 1], 0).unwrap(), 0.0);
    }

    #[test]
    fn oracle_guard() {
        let m = Array2::<f64>::from_elem((13, 3), 1.0 / 3.0);
        assert!(matches!(oracle_ctc(m.view(), &[1], 0), Err(Error::OracleTooLarge(_))));
    }

    #[test]
    fn empty_labels_all_blank() {
        let probs: Array2<f64> = array![[0.9, 0.1], [0.8, 0.2]];
        let loss = ctc_loss(probs.mapv(f64::ln).view(), &[], 0).unwrap();
        assert!((loss + (0.72f64).ln()).abs() < 1e-12);
    }
}
