use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::text_lid::TextLid;
use super::Song;
use crate::error::{Error, Result};

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentLabel {
    Language(String),
    Instrumental,
    Ambiguous,
}

impl SegmentLabel {
    pub fn language(&self) -> Option<&str> {
        match self {
            SegmentLabel::Language(l) => Some(l),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub song_id: String,
    pub start: f64,
    pub end: f64,
    /// IPA words whose midpoint falls in `[start, end)`.
    pub words: Vec<String>,
    /// Segments start out ambiguous (excluded from the language objective)
    /// until `label_segment` assigns a label.
    pub label: SegmentLabel,
}

impl Segment {
    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    /// Segment length in seconds.
    pub length: f64,
    /// Fractional overlap between consecutive segments.
    pub overlap: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            length: 20.0,
            overlap: 0.5,
        }
    }
}

impl SegmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0) || !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config("segment: need length > 0 and 0 <= overlap < 1".into()));
        }
        Ok(())
    }

    pub fn hop(&self) -> f64 {
        self.length * (1.0 - self.overlap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    /// Fewer words than this makes a segment instrumental.
    pub min_words: usize,
    /// Distinct-word ratio below this makes a segment ambiguous.
    pub rep_threshold: f64,
    /// Text LID confidence below this makes a segment ambiguous.
    pub conf_threshold: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            min_words: 3,
            rep_threshold: 0.3,
            conf_threshold: 0.5,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rep_threshold) || !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(Error::Config("labels: thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Segment start times: a regular hop while the window fits, then one
/// end-aligned window if the regular ones leave a tail uncovered. Songs no
/// longer than one window give a single segment covering the whole song.
pub fn segment_bounds(duration: f64, cfg: &SegmentConfig) -> Vec<(f64, f64)> {
    if duration <= cfg.length + TIME_EPS {
        return vec![(0.0, duration)];
    }
    let hop = cfg.hop();
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let start = k as f64 * hop;
        if start + cfg.length > duration + TIME_EPS {
            break;
        }
        out.push((start, start + cfg.length));
        k += 1;
    }
    let covered = out.last().map_or(0.0, |&(_, e)| e);
    if duration - covered > TIME_EPS {
        out.push((duration - cfg.length, duration));
    }
    out
}

pub fn segment_song(song: &Song, duration: f64, cfg: &SegmentConfig) -> Vec<Segment> {
    segment_bounds(duration, cfg)
        .into_iter()
        .map(|(start, end)| Segment {
            song_id: song.id.clone(),
            start,
            end,
            words: song
                .words
                .iter()
                .filter(|w| {
                    let m = w.midpoint();
                    // the final segment also owns words ending exactly at the song end
                    m >= start && (m < end || (end >= duration - TIME_EPS && m <= end))
                })
                .map(|w| w.text.clone())
                .collect(),
            label: SegmentLabel::Ambiguous,
        })
        .collect()
}

pub fn label_segment<S: AsRef<str>>(words: &[S], lid: &TextLid, cfg: &LabelConfig) -> SegmentLabel {
    if words.len() < cfg.min_words || words.is_empty() {
        return SegmentLabel::Instrumental;
    }
    let distinct: HashSet<&str> = words.iter().map(|w| w.as_ref()).collect();
    if (distinct.len() as f64) / (words.len() as f64) < cfg.rep_threshold {
        return SegmentLabel::Ambiguous;
    }
    let text: Vec<&str> = words.iter().map(|w| w.as_ref()).collect();
    let (lang, conf) = lid.predict(&text.join(" "));
    if conf < cfg.conf_threshold {
        SegmentLabel::Ambiguous
    } else {
        SegmentLabel::Language(lang)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{AudioSource, Word};
    use super::*;

    fn bounds(d: f64) -> Vec<(f64, f64)> {
        segment_bounds(d, &SegmentConfig::default())
    }

    #[test]
    fn sixty_seconds_gives_five() {
        let starts: Vec<f64> = bounds(60.0).iter().map(|b| b.0).collect();
        assert_eq!(starts, vec![0.0, 10.0, 20.0, 30.0, 40.0]);
    }

    #[test]
    fn twenty_seconds_gives_one() {
        assert_eq!(bounds(20.0), vec![(0.0, 20.0)]);
    }

    #[test]
    fn thirty_five_seconds_end_aligned() {
        assert_eq!(bounds(35.0), vec![(0.0, 20.0), (10.0, 30.0), (15.0, 35.0)]);
    }

    #[test]
    fn short_song_single_segment() {
        assert_eq!(bounds(7.5), vec![(0.0, 7.5)]);
    }

    #[test]
    fn words_assigned_by_midpoint() {
        let song = Song {
            id: "s".into(),
            artist_id: "a".into(),
            language: "en".into(),
            source: AudioSource::Features("x".into()),
            words: vec![
                Word { text: "ab".into(), start: 9.0, end: 10.6 },
                Word { text: "cd".into(), start: 19.5, end: 20.7 },
                Word { text: "ef".into(), start: 34.0, end: 35.0 },
            ],
        };
        let segs = segment_song(&song, 35.0, &SegmentConfig::default());
        assert_eq!(segs[0].words, vec!["ab"]);
        assert_eq!(segs[1].words, vec!["cd"]);
        assert_eq!(segs[2].words, vec!["cd", "ef"]);
    }

    fn lid() -> TextLid {
        TextLid::train(&[("the cat sat on the mat", "en"), ("le chat est sur le tapis", "fr")]).unwrap()
    }

    #[test]
    fn few_words_instrumental() {
        assert_eq!(label_segment(&["the", "cat"], &lid(), &LabelConfig::default()), SegmentLabel::Instrumental);
    }

    #[test]
    fn repetitive_is_ambiguous() {
        let la = ["la"; 6];
        assert_eq!(label_segment(&la, &lid(), &LabelConfig::default()), SegmentLabel::Ambiguous);
    }

    #[test]
    fn confident_text_gets_language() {
        let words = ["the", "cat", "sat", "on", "the", "mat"];
        assert_eq!(
            label_segment(&words, &lid(), &LabelConfig::default()),
            SegmentLabel::Language("en".into())
        );
    }
}
