//! Character n-gram (orders 1 to 3) multinomial language identifier with
//! add-one smoothing and uniform language priors.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};

pub const UNKNOWN_LANGUAGE: &str = "unknown";
const MAX_ORDER: usize = 3;

#[derive(Debug, Clone)]
pub struct TextLid {
    languages: Vec<String>,
    /// Per language, per order: n-gram counts and their total.
    counts: Vec<[HashMap<String, u64>; MAX_ORDER]>,
    totals: Vec<[u64; MAX_ORDER]>,
    /// Distinct n-grams per order across all languages, plus one for unseen.
    vocab: [u64; MAX_ORDER],
}

/// Character n-grams of the text padded with one space on each side.
pub fn char_ngrams(text: &str, order: usize) -> Vec<String> {
    let padded: Vec<char> = format!(" {} ", text.trim()).chars().collect();
    if padded.len() < order {
        return Vec::new();
    }
    padded.windows(order).map(|w| w.iter().collect()).collect()
}

impl TextLid {
    pub fn train<S: AsRef<str>, L: AsRef<str>>(texts: &[(S, L)]) -> Result<Self> {
        let mut by_lang: BTreeMap<String, Vec<&str>> = BTreeMap::new();
        for (t, l) in texts {
            by_lang.entry(l.as_ref().to_string()).or_default().push(t.as_ref());
        }
        if by_lang.is_empty() {
            return Err(Error::Invalid("text LID needs at least one training text".into()));
        }
        let mut languages = Vec::new();
        let mut counts = Vec::new();
        let mut totals = Vec::new();
        let mut seen: [HashSet<String>; MAX_ORDER] = Default::default();
        for (lang, lang_texts) in by_lang {
            let mut c: [HashMap<String, u64>; MAX_ORDER] = Default::default();
            let mut tot = [0u64; MAX_ORDER];
            for text in lang_texts {
                for n in 1..=MAX_ORDER {
                    for g in char_ngrams(text, n) {
                        seen[n - 1].insert(g.clone());
                        *c[n - 1].entry(g).or_default() += 1;
                        tot[n - 1] += 1;
                    }
                }
            }
            languages.push(lang);
            counts.push(c);
            totals.push(tot);
        }
        let vocab = std::array::from_fn(|i| seen[i].len() as u64 + 1);
        Ok(TextLid {
            languages,
            counts,
            totals,
            vocab,
        })
    }

    /// Languages in sorted order.
    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    /// Log-likelihood of the text under each language.
    pub fn log_likelihoods(&self, text: &str) -> Vec<f64> {
        let grams: Vec<Vec<String>> = (1..=MAX_ORDER).map(|n| char_ngrams(text, n)).collect();
        (0..self.languages.len())
            .map(|l| {
                grams
                    .iter()
                    .enumerate()
                    .flat_map(|(o, gs)| gs.iter().map(move |g| (o, g)))
                    .map(|(o, g)| {
                        let c = self.counts[l][o].get(g).copied().unwrap_or(0);
                        ((c + 1) as f64 / (self.totals[l][o] + self.vocab[o]) as f64).ln()
                    })
                    .sum()
            })
            .collect()
    }

    /// Top language and its posterior probability.
    pub fn predict(&self, text: &str) -> (String, f64) {
        if text.trim().is_empty() {
            return (UNKNOWN_LANGUAGE.to_string(), 0.0);
        }
        let ll = self.log_likelihoods(text);
        let max = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = ll.iter().map(|v| (v - max).exp()).sum();
        // first maximum wins ties
        let best = ll.iter().position(|&v| v == max).unwrap_or(0);
        (self.languages[best].clone(), 1.0 / z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> TextLid {
        TextLid::train(&[("the cat", "en"), ("le chat", "fr")]).unwrap()
    }

    #[test]
    fn ngrams_are_padded() {
        assert_eq!(char_ngrams("ab", 2), vec![" a", "ab", "b "]);
        assert_eq!(char_ngrams("ab", 1).len(), 4);
    }

    #[test]
    fn toy_posterior_matches_hand_count() {
        // Hand count for "the dog" (padded " the dog "):
        //  en counts from " the cat ": unigrams 9, bigrams 8, trigrams 7
        //  fr counts from " le chat ": unigrams 9, bigrams 8, trigrams 7
        //  shared vocab: unigrams {space,t,h,e,c,a,l} = 7 (+1), bigrams 12 (+1), trigrams 12 (+1)
        let en_uni: [u64; 9] = [3, 2, 1, 1, 3, 0, 0, 0, 3];
        let fr_uni: [u64; 9] = [3, 1, 1, 1, 3, 0, 0, 0, 3];
        // n-grams of " the dog ": " t","th","he","e "," d","do","og","g "
        let en_bi: [u64; 8] = [1, 1, 1, 1, 0, 0, 0, 0];
        let fr_bi: [u64; 8] = [0, 0, 0, 1, 0, 0, 0, 0];
        // " th","the","he ","e d"," do","dog","og "
        let en_tri: [u64; 7] = [1, 1, 1, 0, 0, 0, 0];
        let fr_tri: [u64; 7] = [0, 0, 0, 0, 0, 0, 0];
        let ll = |uni: &[u64], bi: &[u64], tri: &[u64]| -> f64 {
            uni.iter().map(|&c| ((c + 1) as f64 / (9 + 8) as f64).ln()).sum::<f64>()
                + bi.iter().map(|&c| ((c + 1) as f64 / (8 + 13) as f64).ln()).sum::<f64>()
                + tri.iter().map(|&c| ((c + 1) as f64 / (7 + 13) as f64).ln()).sum::<f64>()
        };
        let (le, lf) = (ll(&en_uni, &en_bi, &en_tri), ll(&fr_uni, &fr_bi, &fr_tri));
        let p_en = 1.0 / (1.0 + (lf - le).exp());

        let lid = toy();
        let got = lid.log_likelihoods("the dog");
        assert!((got[0] - le).abs() < 1e-12, "{} vs {le}", got[0]);
        assert!((got[1] - lf).abs() < 1e-12, "{} vs {lf}", got[1]);
        let (lang, conf) = lid.predict("the dog");
        assert_eq!(lang, "en");
        assert!((conf - p_en).abs() < 1e-12);
        assert!(conf > 0.5);
    }

    #[test]
    fn empty_text_is_unknown() {
        assert_eq!(toy().predict("  "), (UNKNOWN_LANGUAGE.to_string(), 0.0));
    }

    #[test]
    fn training_sentence_gets_own_label() {
        assert_eq!(toy().predict("le chat").0, "fr");
        assert_eq!(toy().predict("the cat").0, "en");
    }
}
