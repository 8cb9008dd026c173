//! Scenario label spaces and prepared (featurized, segmented, labeled)
//! datasets.

use std::collections::{BTreeSet, HashMap};

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_charset, label_segment, segment_song, split_corpus, Charset, Corpus, LabelConfig, Segment, SegmentConfig,
    SegmentLabel, Song, Split, SplitSpec, TextLid,
};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;

pub const OTHERS: &str = "Others";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Closed,
    Open,
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed" => Ok(ScenarioKind::Closed),
            "open" => Ok(ScenarioKind::Open),
            _ => Err(Error::Config(format!("unknown scenario {s:?} (expected closed or open)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    /// Target languages. Empty means every language of the corpus (closed
    /// set only).
    pub targets: Vec<String>,
    /// Languages that appear only in the test split, as unseen "Others".
    pub out_of_domain: Vec<String>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            kind: ScenarioKind::Closed,
            targets: Vec::new(),
            out_of_domain: Vec::new(),
        }
    }
}

/// Where a song's language sits relative to the label space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Target,
    /// A non-target language seen in training under "Others".
    InDomainOther,
    /// A non-target language never seen in training.
    OutOfDomainOther,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub kind: ScenarioKind,
    /// Class names; open-set spaces end with "Others".
    pub classes: Vec<String>,
    pub in_domain_others: Vec<String>,
    pub out_of_domain: Vec<String>,
}

impl LabelSpace {
    /// Resolve the scenario against the languages present in the corpus.
    pub fn resolve(cfg: &ScenarioConfig, languages: &[String]) -> Result<Self> {
        let all: BTreeSet<&String> = languages.iter().collect();
        for l in cfg.targets.iter().chain(&cfg.out_of_domain) {
            if !all.contains(l) {
                return Err(Error::Config(format!("scenario language {l:?} does not occur in the corpus")));
            }
        }
        if cfg.targets.iter().any(|t| cfg.out_of_domain.contains(t)) {
            return Err(Error::Config("a language cannot be both target and out-of-domain".into()));
        }
        match cfg.kind {
            ScenarioKind::Closed => {
                if !cfg.out_of_domain.is_empty() {
                    return Err(Error::Config("closed-set scenarios have no out-of-domain languages".into()));
                }
                let classes: Vec<String> = if cfg.targets.is_empty() {
                    all.into_iter().cloned().collect()
                } else {
                    cfg.targets.clone()
                };
                if classes.len() < 2 {
                    return Err(Error::Config("a scenario needs at least two classes".into()));
                }
                Ok(LabelSpace {
                    kind: cfg.kind,
                    classes,
                    in_domain_others: Vec::new(),
                    out_of_domain: Vec::new(),
                })
            }
            ScenarioKind::Open => {
                if cfg.targets.is_empty() {
                    return Err(Error::Config("open-set scenarios need explicit targets".into()));
                }
                let in_domain: Vec<String> = all
                    .into_iter()
                    .filter(|l| !cfg.targets.contains(l) && !cfg.out_of_domain.contains(l))
                    .cloned()
                    .collect();
                if in_domain.is_empty() {
                    return Err(Error::Config("open-set scenarios need at least one in-domain other language".into()));
                }
                let mut classes = cfg.targets.clone();
                classes.push(OTHERS.to_string());
                Ok(LabelSpace {
                    kind: cfg.kind,
                    classes,
                    in_domain_others: in_domain,
                    out_of_domain: cfg.out_of_domain.clone(),
                })
            }
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn others_class(&self) -> Option<usize> {
        (self.kind == ScenarioKind::Open).then(|| self.classes.len() - 1)
    }

    /// Class index of a language, if it belongs to the label space.
    pub fn class_of(&self, language: &str) -> Option<usize> {
        if let Some(i) = self.classes.iter().position(|c| c == language) {
            if Some(i) != self.others_class() {
                return Some(i);
            }
        }
        if self.in_domain_others.iter().chain(&self.out_of_domain).any(|l| l == language) {
            return self.others_class();
        }
        None
    }

    pub fn domain(&self, language: &str) -> Domain {
        if self.out_of_domain.iter().any(|l| l == language) {
            Domain::OutOfDomainOther
        } else if self.in_domain_others.iter().any(|l| l == language) {
            Domain::InDomainOther
        } else {
            Domain::Target
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSegment {
    pub start: f64,
    pub end: f64,
    pub start_frame: usize,
    pub frames: usize,
    pub words: Vec<String>,
    pub label: SegmentLabel,
    /// CTC target ids.
    pub target: Vec<usize>,
    /// Language class for the classification objective.
    pub class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSong {
    pub id: String,
    pub artist_id: String,
    pub language: String,
    pub class: usize,
    pub domain: Domain,
    /// Whole-song features, `N × 123`.
    pub features: Array2<f32>,
    pub segments: Vec<PreparedSegment>,
}

impl PreparedSong {
    pub fn segment_features(&self, seg: &PreparedSegment) -> ArrayView2<'_, f32> {
        self.features.slice(s![seg.start_frame..seg.start_frame + seg.frames, ..])
    }
}

/// Indices of one segment inside a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SegmentRef {
    pub song: usize,
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitData {
    pub songs: Vec<PreparedSong>,
}

impl SplitData {
    pub fn segment_refs(&self) -> Vec<SegmentRef> {
        self.songs
            .iter()
            .enumerate()
            .flat_map(|(song, s)| (0..s.segments.len()).map(move |segment| SegmentRef { song, segment }))
            .collect()
    }

    pub fn get(&self, r: SegmentRef) -> (&PreparedSong, &PreparedSegment) {
        let song = &self.songs[r.song];
        (song, &song.segments[r.segment])
    }

    pub fn num_segments(&self) -> usize {
        self.songs.iter().map(|s| s.segments.len()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub labels: LabelSpace,
    pub charset: Charset,
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
    /// Test-set phonemes absent from the training charset, dropped.
    pub dropped_test_phonemes: usize,
}

/// Everything needed to turn a corpus into a dataset.
#[derive(Debug, Clone, Default)]
pub struct PrepareOptions {
    pub scenario: ScenarioConfig,
    pub split: SplitSpec,
    pub segment: SegmentConfig,
    pub labels: LabelConfig,
    pub features: FeatureConfig,
}

struct Loaded {
    song: Song,
    features: Array2<f32>,
    segments: Vec<Segment>,
}

fn load_split(corpus: &Corpus, opts: &PrepareOptions) -> Result<Vec<Loaded>> {
    corpus
        .songs
        .par_iter()
        .map(|song| {
            let feat = song.load_features(&opts.features)?;
            let duration = opts.features.duration_of_frames(feat.frames());
            let segments = segment_song(song, duration, &opts.segment);
            Ok(Loaded {
                song: song.clone(),
                features: feat.data,
                segments,
            })
        })
        .collect()
}

/// Frame window of a segment: the start frame rounded down, clamped so a
/// full window fits in the song.
pub fn segment_frames(seg_start: f64, total_frames: usize, seg: &SegmentConfig, feat: &FeatureConfig) -> (usize, usize) {
    let sr = feat.sample_rate as f64;
    let want = feat.frames_for_samples((seg.length * sr).round() as usize);
    let len = want.min(total_frames);
    let start = ((seg_start * sr) / feat.hop_length as f64 + 1e-6).floor() as usize;
    (start.min(total_frames - len), len)
}

/// Split, featurize, segment and label a corpus.
pub fn prepare_dataset(corpus: &Corpus, opts: &PrepareOptions) -> Result<Dataset> {
    opts.split.validate()?;
    opts.segment.validate()?;
    opts.labels.validate()?;
    opts.features.validate()?;
    let labels = LabelSpace::resolve(&opts.scenario, &corpus.languages())?;
    let ood = |s: &Song| labels.out_of_domain.contains(&s.language);
    let Split { train, val, mut test } = split_corpus(&corpus.filter(|s| !ood(s)), &opts.split)?;
    test.songs.extend(corpus.songs.iter().filter(|s| ood(s)).cloned());
    for s in train.songs.iter().chain(&val.songs).chain(&test.songs) {
        if labels.class_of(&s.language).is_none() {
            return Err(Error::Invalid(format!(
                "song {} has language {:?} outside the label space",
                s.id, s.language
            )));
        }
    }
    let (train, val, test) = (load_split(&train, opts)?, load_split(&val, opts)?, load_split(&test, opts)?);

    let texts: Vec<(String, String)> = train
        .iter()
        .map(|l| (l.song.words.iter().map(|w| w.text.as_str()).collect::<Vec<_>>().join(" "), l.song.language.clone()))
        .collect();
    let lid = TextLid::train(&texts)?;
    let label = |words: &[String]| -> SegmentLabel {
        match label_segment(words, &lid, &opts.labels) {
            SegmentLabel::Language(l) if labels.class_of(&l).is_none() => SegmentLabel::Ambiguous,
            other => other,
        }
    };

    let train_segments: Vec<Segment> = train.iter().flat_map(|l| l.segments.iter().cloned()).collect();
    let charset = build_charset(&train_segments)?;

    let mut dropped_test = 0;
    let mut finish = |loaded: Vec<Loaded>, count_drops: bool| -> SplitData {
        let songs = loaded
            .into_iter()
            .map(|l| {
                let total = l.features.nrows();
                let segments = l
                    .segments
                    .into_iter()
                    .map(|mut seg| {
                        seg.label = label(&seg.words);
                        let enc = charset.encode_segment(&seg);
                        if count_drops {
                            dropped_test += enc.dropped;
                        }
                        let (start_frame, frames) = segment_frames(seg.start, total, &opts.segment, &opts.features);
                        PreparedSegment {
                            start: seg.start,
                            end: seg.end,
                            start_frame,
                            frames,
                            class: seg.label.language().and_then(|lang| labels.class_of(lang)),
                            words: seg.words,
                            label: seg.label,
                            target: enc.ids,
                        }
                    })
                    .collect();
                PreparedSong {
                    class: labels.class_of(&l.song.language).expect("checked above"),
                    domain: labels.domain(&l.song.language),
                    id: l.song.id,
                    artist_id: l.song.artist_id,
                    language: l.song.language,
                    features: l.features,
                    segments,
                }
            })
            .collect();
        SplitData { songs }
    };
    let train = finish(train, false);
    let val = finish(val, false);
    let test = finish(test, true);
    if dropped_test > 0 {
        log::warn!("dropped {dropped_test} test phonemes absent from the training charset");
    }
    Ok(Dataset {
        labels,
        charset,
        train,
        val,
        test,
        dropped_test_phonemes: dropped_test,
    })
}

/// Per-class counts of labeled segments.
pub fn class_counts(split: &SplitData, classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for s in &split.songs {
        for seg in &s.segments {
            if let Some(c) = seg.class {
                counts[c] += 1;
            }
        }
    }
    counts
}

/// Languages per split, for reporting.
pub fn split_summary(ds: &Dataset) -> HashMap<&'static str, usize> {
    HashMap::from([
        ("train_songs", ds.train.songs.len()),
        ("val_songs", ds.val.songs.len()),
        ("test_songs", ds.test.songs.len()),
        ("train_segments", ds.train.num_segments()),
        ("val_segments", ds.val.num_segments()),
        ("test_segments", ds.test.num_segments()),
    ])
}
