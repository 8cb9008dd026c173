use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes. Items the system
/// declined to label (instrumental verdicts) are counted per true class in
/// `abstained` and count as misses for recall.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
    pub abstained: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
            abstained: vec![0; classes],
        }
    }

    pub fn from_pairs(classes: usize, pairs: &[(usize, Option<usize>)]) -> Self {
        let mut m = Self::new(classes);
        for &(t, p) in pairs {
            m.add(t, p);
        }
        m
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, truth: usize, predicted: Option<usize>) {
        match predicted {
            Some(p) => self.counts[truth][p] += 1,
            None => self.abstained[truth] += 1,
        }
    }

    pub fn support(&self, class: usize) -> usize {
        self.counts[class].iter().sum::<usize>() + self.abstained[class]
    }

    pub fn total(&self) -> usize {
        (0..self.classes()).map(|c| self.support(c)).sum()
    }

    /// `None` for classes without samples.
    pub fn recall(&self, class: usize) -> Option<f64> {
        let n = self.support(class);
        (n > 0).then(|| self.counts[class][class] as f64 / n as f64)
    }

    pub fn precision(&self, class: usize) -> f64 {
        let predicted: usize = self.counts.iter().map(|row| row[class]).sum();
        if predicted == 0 {
            0.0
        } else {
            self.counts[class][class] as f64 / predicted as f64
        }
    }

    /// Zero when precision and recall are both zero.
    pub fn f1(&self, class: usize) -> f64 {
        let p = self.precision(class);
        let r = self.recall(class).unwrap_or(0.0);
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// Mean per-class recall over classes that have samples, in percent.
    pub fn balanced_accuracy(&self) -> f64 {
        let recalls: Vec<f64> = (0..self.classes()).filter_map(|c| self.recall(c)).collect();
        if recalls.is_empty() {
            return 0.0;
        }
        100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64
    }

    /// Mean F1 over the given classes, in percent.
    pub fn macro_f1_over(&self, classes: &[usize]) -> f64 {
        if classes.is_empty() {
            return 0.0;
        }
        100.0 * classes.iter().map(|&c| self.f1(c)).sum::<f64>() / classes.len() as f64
    }

    pub fn macro_f1(&self) -> f64 {
        let all: Vec<usize> = (0..self.classes()).collect();
        self.macro_f1_over(&all)
    }
}

/// Bootstrap standard error of balanced accuracy over song-level outcomes.
/// Resamples that lose a class present in the original are redrawn, so
/// every replicate averages over the same classes.
pub fn bootstrap_std_error(
    classes: usize,
    pairs: &[(usize, Option<usize>)],
    resamples: usize,
    seed: u64,
) -> Result<f64> {
    if pairs.is_empty() || resamples < 2 {
        return Err(Error::Invalid("bootstrap needs outcomes and at least two resamples".into()));
    }
    let present: Vec<bool> = (0..classes).map(|c| pairs.iter().any(|p| p.0 == c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(resamples);
    let mut draw = Vec::with_capacity(pairs.len());
    while values.len() < resamples {
        draw.clear();
        draw.extend((0..pairs.len()).map(|_| pairs[rng.random_range(0..pairs.len())]));
        let mut seen = vec![false; classes];
        draw.iter().for_each(|p| seen[p.0] = true);
        if seen != present {
            continue;
        }
        values.push(ConfusionMatrix::from_pairs(classes, &draw).balanced_accuracy());
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Levenshtein distance between two token sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_is_perfect() {
        let pairs: Vec<_> = (0..4).flat_map(|c| [(c, Some(c)); 3]).collect();
        let m = ConfusionMatrix::from_pairs(4, &pairs);
        assert_eq!(m.balanced_accuracy(), 100.0);
        assert_eq!(m.macro_f1(), 100.0);
    }

    #[test]
    fn recalls_one_and_half_give_75() {
        let m = ConfusionMatrix::from_pairs(2, &[(0, Some(0)), (0, Some(0)), (1, Some(1)), (1, Some(0))]);
        assert_eq!(m.recall(0), Some(1.0));
        assert_eq!(m.recall(1), Some(0.5));
        assert_eq!(m.balanced_accuracy(), 75.0);
    }

    #[test]
    fn abstentions_count_as_misses() {
        let m = ConfusionMatrix::from_pairs(2, &[(0, Some(0)), (0, None), (1, Some(1))]);
        assert_eq!(m.balanced_accuracy(), 75.0);
        assert_eq!(m.support(0), 2);
        assert_eq!(m.precision(0), 1.0);
    }

    #[test]
    fn f1_by_hand() {
        // class 0: tp 2, fp 1, fn 1
        let m = ConfusionMatrix::from_pairs(2, &[(0, Some(0)), (0, Some(0)), (0, Some(1)), (1, Some(0)), (1, Some(1))]);
        assert!((m.f1(0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.f1(1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_class_excluded_from_balanced_accuracy() {
        let m = ConfusionMatrix::from_pairs(3, &[(0, Some(0)), (1, Some(0))]);
        assert_eq!(m.balanced_accuracy(), 50.0);
    }

    #[test]
    fn bootstrap_is_seeded_and_zero_when_perfect() {
        let pairs = vec![(0, Some(0)), (1, Some(1)), (0, Some(0)), (1, Some(1))];
        assert_eq!(bootstrap_std_error(2, &pairs, 100, 3).unwrap(), 0.0);
        let noisy = vec![(0, Some(0)), (1, Some(0)), (0, Some(1)), (1, Some(1)), (0, Some(0))];
        let a = bootstrap_std_error(2, &noisy, 200, 3).unwrap();
        assert_eq!(a, bootstrap_std_error(2, &noisy, 200, 3).unwrap());
        assert!(a > 0.0);
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[], &[1, 2]), 2);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 3]), 1);
        assert_eq!(edit_distance(&[1, 2, 3], &[3, 2, 1]), 2);
    }
}
