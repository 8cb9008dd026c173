//! Songs, manifests, segmentation, segment labels, charset, splits and the
//! synthetic corpus generator.

mod charset;
mod segment;
mod split;
mod synth;
mod text_lid;

pub use charset::{build_charset, Charset, Encoded, BLANK, INSTRUMENTAL, SPACE};
pub use segment::{segment_bounds, label_segment, segment_song, LabelConfig, Segment, SegmentConfig, SegmentLabel};
pub use split::{split_corpus, Split, SplitSpec};
pub use synth::{closed_set_spec, generate_synth, open_set_spec, render_phoneme, band_center_hz, SynthLanguage, SynthSpec, SYNTH_ALPHABET};
pub use text_lid::{TextLid, UNKNOWN_LANGUAGE};

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::features::{extract_features, read_feature_cache, read_wav, FeatureConfig, FeatureMatrix};

/// One word-level lyric annotation: IPA text and its time span in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Word {
    pub text: String,
    pub start: f64,
    pub end: f64,
}

impl Word {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.start + self.end)
    }
}

/// Where a song's acoustics live.
#[derive(Debug, Clone, PartialEq)]
pub enum AudioSource {
    /// 16 kHz mono WAV file.
    Wave(PathBuf),
    /// Precomputed feature cache.
    Features(PathBuf),
}

impl AudioSource {
    fn from_path(path: PathBuf) -> Self {
        let is_wav = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if is_wav {
            AudioSource::Wave(path)
        } else {
            AudioSource::Features(path)
        }
    }

    pub fn path(&self) -> &Path {
        match self {
            AudioSource::Wave(p) | AudioSource::Features(p) => p,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Song {
    pub id: String,
    pub artist_id: String,
    pub language: String,
    pub source: AudioSource,
    pub words: Vec<Word>,
}

impl Song {
    pub fn load_features(&self, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
        match &self.source {
            AudioSource::Features(p) => read_feature_cache(p),
            AudioSource::Wave(p) => extract_features(&read_wav(p)?, cfg),
        }
    }

    fn validate_words(&self) -> std::result::Result<(), String> {
        let mut prev = 0.0;
        for w in &self.words {
            if w.text.is_empty() {
                return Err("empty word".into());
            }
            if !(w.start >= 0.0 && w.end >= w.start && w.end.is_finite()) {
                return Err(format!("bad interval for word {:?}: {}..{}", w.text, w.start, w.end));
            }
            if w.start < prev {
                return Err(format!("word {:?} starts before its predecessor", w.text));
            }
            if w.text.chars().any(is_reserved) {
                return Err(format!("word {:?} contains a reserved character", w.text));
            }
            prev = w.start;
        }
        Ok(())
    }
}

/// Characters that cannot appear inside an IPA word: manifest separators and
/// the special tokens.
fn is_reserved(c: char) -> bool {
    c.is_whitespace() || matches!(c, '|' | ';' | 'I') || c.to_string() == BLANK
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub songs: Vec<Song>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.songs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.songs.is_empty()
    }

    /// Distinct languages in order of first appearance.
    pub fn languages(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.songs
            .iter()
            .filter(|s| seen.insert(s.language.clone()))
            .map(|s| s.language.clone())
            .collect()
    }

    pub fn filter(&self, keep: impl Fn(&Song) -> bool) -> Corpus {
        Corpus {
            songs: self.songs.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }
}

/// Parse manifest text. Relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Corpus> {
    let mut songs = Vec::new();
    let mut ids = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let perr = |message: String| Error::Parse { line, message };
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 5 {
            return Err(perr(format!("expected 5 tab-separated fields, got {}", fields.len())));
        }
        let [id, artist, language, path, words] = [fields[0], fields[1], fields[2], fields[3], fields[4]];
        if id.is_empty() || artist.is_empty() || language.is_empty() || path.is_empty() {
            return Err(perr("id, artist, language and path must be non-empty".into()));
        }
        if !ids.insert(id.to_string()) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        let words = parse_words(words).map_err(perr)?;
        let song = Song {
            id: id.to_string(),
            artist_id: artist.to_string(),
            language: language.to_string(),
            source: AudioSource::from_path(base.join(path)),
            words,
        };
        song.validate_words().map_err(perr)?;
        if !song.source.path().is_file() {
            return Err(Error::MissingFile {
                song: song.id,
                path: song.source.path().to_path_buf(),
            });
        }
        songs.push(song);
    }
    if songs.is_empty() {
        log::warn!("manifest contains no songs");
    }
    Ok(Corpus { songs })
}

fn parse_words(field: &str) -> std::result::Result<Vec<Word>, String> {
    field
        .split(';')
        .filter(|w| !w.is_empty())
        .map(|w| {
            let parts: Vec<&str> = w.split('|').collect();
            if parts.len() != 3 {
                return Err(format!("word entry {w:?} is not text|start|end"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("bad time {s:?}: {e}"));
            Ok(Word {
                text: parts[0].to_string(),
                start: num(parts[1])?,
                end: num(parts[2])?,
            })
        })
        .collect()
}

pub fn load_manifest(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Render a manifest; paths under `base` are written relative to it.
pub fn format_manifest(corpus: &Corpus, base: &Path) -> String {
    let mut out = String::new();
    for s in &corpus.songs {
        let path = s.source.path();
        let rel = path.strip_prefix(base).unwrap_or(path);
        let words: Vec<String> = s
            .words
            .iter()
            .map(|w| format!("{}|{:.3}|{:.3}", w.text, w.start, w.end))
            .collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            s.id,
            s.artist_id,
            s.language,
            rel.display(),
            words.join(";")
        );
    }
    out
}

pub fn write_manifest(corpus: &Corpus, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    std::fs::write(path, format_manifest(corpus, base)).map_err(|e| Error::io(path, e))
}
