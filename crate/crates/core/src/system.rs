//! A trained song-level language identifier: acoustic model, language back
//! end, charset and label space, with song-level inference.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::acoustic::{features_as, AcousticModel};
use crate::classifier::{clean_posteriorgram, LanguageClassifier};
use crate::corpus::{segment_bounds, Charset, SegmentConfig};
use crate::ctc::{argmax, greedy_decode};
use crate::dataset::{segment_frames, LabelSpace, PreparedSong};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::scalar::Scalar;
use crate::stats::LinearClassifier;
use crate::training::{mean_scores, song_statistics, TrainMode};

#[derive(Debug, Clone, PartialEq)]
pub enum LanguageBackend<T: Scalar> {
    Recurrent(LanguageClassifier<T>),
    Linear(LinearClassifier),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Segments decoding to fewer words are ignored (not in e2e mode).
    pub min_words: usize,
    pub clean_threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            min_words: 3,
            clean_threshold: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SongSystem<T: Scalar> {
    pub mode: TrainMode,
    pub acoustic: AcousticModel<T>,
    pub backend: LanguageBackend<T>,
    pub charset: Charset,
    pub labels: LabelSpace,
    pub inference: InferenceConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Language(usize),
    /// No segment carried enough voiced, decodable evidence.
    Instrumental,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SongPrediction {
    pub verdict: Verdict,
    /// Song-level class scores; empty for instrumental verdicts.
    pub scores: Vec<f64>,
    pub segments_used: usize,
}

impl SongPrediction {
    pub fn class(&self) -> Option<usize> {
        match self.verdict {
            Verdict::Language(c) => Some(c),
            Verdict::Instrumental => None,
        }
    }

    pub fn score(&self) -> f64 {
        self.class().map_or(0.0, |c| self.scores[c])
    }
}

/// Feature windows of an unsegmented song.
pub fn song_windows<'a>(
    features: &'a Array2<f32>,
    segment: &SegmentConfig,
    feat: &FeatureConfig,
) -> Vec<ArrayView2<'a, f32>> {
    let total = features.nrows();
    if total == 0 {
        return Vec::new();
    }
    let duration = feat.duration_of_frames(total);
    segment_bounds(duration, segment)
        .into_iter()
        .map(|(start, _)| {
            let (s, n) = segment_frames(start, total, segment, feat);
            features.slice(ndarray::s![s..s + n, ..])
        })
        .collect()
}

impl<T: Scalar> SongSystem<T> {
    pub fn uses_word_filter(&self) -> bool {
        self.mode != TrainMode::E2e
    }

    /// Cleaned posteriorgram of a window, or `None` if the window is
    /// filtered out.
    fn evidence(&self, window: ArrayView2<f32>) -> Result<Option<Array2<T>>> {
        if window.nrows() < self.acoustic.config.min_frames() {
            return Ok(None);
        }
        let x = features_as::<T>(window);
        let post = self.acoustic.posteriorgram(x.view())?;
        let (cleaned, _) = clean_posteriorgram(post.view(), self.inference.clean_threshold);
        if cleaned.nrows() == 0 {
            return Ok(None);
        }
        if self.uses_word_filter() {
            let words = self.charset.decode_words(&greedy_decode(cleaned.view(), Charset::BLANK_ID));
            if words.len() < self.inference.min_words {
                return Ok(None);
            }
        }
        Ok(Some(cleaned))
    }

    pub fn predict_windows(&self, windows: &[ArrayView2<f32>]) -> Result<SongPrediction> {
        let mut kept = Vec::new();
        for w in windows {
            if let Some(c) = self.evidence(*w)? {
                kept.push(c);
            }
        }
        let used = kept.len();
        let scores: Option<Array1<f64>> = match &self.backend {
            LanguageBackend::Recurrent(clf) => {
                let per: Vec<Array1<f64>> = kept
                    .iter()
                    .map(|c| Ok(clf.forward(c, &mut crate::nn::Mode::Eval)?.probs.mapv(|v| v.as_f64())))
                    .collect::<Result<_>>()?;
                mean_scores(&per)
            }
            LanguageBackend::Linear(lin) => song_statistics(&kept)?.map(|v| lin.predict(&v)),
        };
        Ok(match scores {
            None => SongPrediction {
                verdict: Verdict::Instrumental,
                scores: Vec::new(),
                segments_used: 0,
            },
            Some(s) => {
                if s.len() != self.labels.len() {
                    return Err(Error::Invalid(format!(
                        "back end produced {} scores for {} classes",
                        s.len(),
                        self.labels.len()
                    )));
                }
                SongPrediction {
                    verdict: Verdict::Language(argmax(s.iter().copied())),
                    scores: s.to_vec(),
                    segments_used: used,
                }
            }
        })
    }

    pub fn predict_song(&self, song: &PreparedSong) -> Result<SongPrediction> {
        let windows: Vec<ArrayView2<f32>> = song.segments.iter().map(|seg| song.segment_features(seg)).collect();
        self.predict_windows(&windows)
    }

    /// Class name of a verdict, or `instrumental`.
    pub fn verdict_name(&self, v: Verdict) -> &str {
        match v {
            Verdict::Language(c) => &self.labels.classes[c],
            Verdict::Instrumental => "instrumental",
        }
    }
}
