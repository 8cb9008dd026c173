use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train, self.val, self.test];
        if fr.iter().any(|f| !(*f > 0.0 && *f < 1.0)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split: fractions must lie in (0, 1) and sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

/// Language-wise, artist-aware split. Artists are assigned whole, per
/// language, greedily: largest artist first, to the split furthest below its
/// target count. An artist singing in several languages is placed with its
/// most frequent language.
pub fn split_corpus(corpus: &Corpus, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if corpus.is_empty() {
        return Err(Error::Invalid("cannot split an empty corpus".into()));
    }
    // artist -> song indices, and artist -> majority language
    let mut artists: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in corpus.songs.iter().enumerate() {
        artists.entry(&s.artist_id).or_default().push(i);
    }
    let mut by_language: BTreeMap<&str, Vec<(&str, usize)>> = BTreeMap::new();
    for (artist, songs) in &artists {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for &i in songs {
            *counts.entry(&corpus.songs[i].language).or_default() += 1;
        }
        let lang = counts.iter().max_by_key(|(l, c)| (**c, std::cmp::Reverse(**l))).map(|(l, _)| *l).unwrap();
        by_language.entry(lang).or_default().push((artist, songs.len()));
    }

    let mut assignment: HashMap<&str, usize> = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for (lang, mut groups) in by_language {
        let n: usize = groups.iter().map(|g| g.1).sum();
        let val = (spec.val * n as f64).round() as usize;
        let test = (spec.test * n as f64).round() as usize;
        let targets = [n.saturating_sub(val + test), val, test];
        groups.shuffle(&mut rng);
        groups.sort_by_key(|g| std::cmp::Reverse(g.1));
        let mut filled = [0usize; 3];
        for (artist, size) in groups {
            let k = (0..3)
                .max_by_key(|&k| (targets[k] as i64 - filled[k] as i64, std::cmp::Reverse(k)))
                .unwrap();
            filled[k] += size;
            assignment.insert(artist, k);
        }
        if filled.iter().zip(&targets).any(|(f, t)| f.abs_diff(*t) > 1) {
            log::warn!("language {lang}: artist structure forces split {filled:?} instead of {targets:?}");
        }
    }

    let mut out = Split::default();
    for s in &corpus.songs {
        let dest = match assignment[s.artist_id.as_str()] {
            0 => &mut out.train,
            1 => &mut out.val,
            _ => &mut out.test,
        };
        dest.songs.push(s.clone());
    }
    Ok(out)
}
