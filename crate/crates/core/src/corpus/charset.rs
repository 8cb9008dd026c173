use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::segment::{Segment, SegmentLabel};
use crate::error::{Error, Result};

pub const BLANK: &str = "ε";
pub const SPACE: &str = " ";
pub const INSTRUMENTAL: &str = "I";

/// Token inventory: blank, word boundary, instrumental, then one token per
/// IPA codepoint seen in training, ordered by codepoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Charset {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// A transcription mapped to token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    /// Phonemes absent from the charset that were dropped.
    pub dropped: usize,
}

impl Charset {
    pub const BLANK_ID: usize = 0;
    pub const SPACE_ID: usize = 1;
    pub const INSTRUMENTAL_ID: usize = 2;

    pub fn from_phonemes<I: IntoIterator<Item = char>>(phonemes: I) -> Self {
        let set: BTreeSet<char> = phonemes.into_iter().collect();
        let tokens: Vec<String> = [BLANK, SPACE, INSTRUMENTAL]
            .into_iter()
            .map(String::from)
            .chain(set.into_iter().map(String::from))
            .collect();
        Self::try_from(tokens).expect("phonemes are distinct from special tokens")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Words joined by the space token; unknown phonemes dropped. An empty
    /// word list yields the instrumental target.
    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Encoded {
        let mut ids = Vec::new();
        let mut dropped = 0;
        for (i, w) in words.iter().enumerate() {
            if i > 0 {
                ids.push(Self::SPACE_ID);
            }
            for c in w.as_ref().chars() {
                match self.index.get(c.encode_utf8(&mut [0; 4]) as &str) {
                    Some(&id) if id > Self::INSTRUMENTAL_ID => ids.push(id),
                    _ => dropped += 1,
                }
            }
        }
        if ids.iter().all(|&id| id == Self::SPACE_ID) {
            ids = vec![Self::INSTRUMENTAL_ID];
        }
        Encoded { ids, dropped }
    }

    /// CTC target of a segment: `["I"]` for instrumental segments.
    pub fn encode_segment(&self, seg: &Segment) -> Encoded {
        if seg.label == SegmentLabel::Instrumental {
            return Encoded {
                ids: vec![Self::INSTRUMENTAL_ID],
                dropped: 0,
            };
        }
        self.encode_words(&seg.words)
    }

    /// Split decoded ids into words on the space token; special tokens dropped.
    pub fn decode_words(&self, ids: &[usize]) -> Vec<String> {
        ids.split(|&id| id == Self::SPACE_ID)
            .map(|w| {
                w.iter()
                    .filter(|&&id| id > Self::INSTRUMENTAL_ID && id < self.len())
                    .map(|&id| self.tokens[id].as_str())
                    .collect::<String>()
            })
            .filter(|w| !w.is_empty())
            .collect()
    }
}

impl TryFrom<Vec<String>> for Charset {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[0] != BLANK || tokens[1] != SPACE || tokens[2] != INSTRUMENTAL {
            return Err(Error::Format("charset must start with blank, space, instrumental".into()));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate charset token {t:?}")));
            }
        }
        Ok(Charset { tokens, index })
    }
}

impl From<Charset> for Vec<String> {
    fn from(c: Charset) -> Self {
        c.tokens
    }
}

/// Charset from the phonemes of the training segments.
pub fn build_charset(train_segments: &[Segment]) -> Result<Charset> {
    if train_segments.is_empty() {
        return Err(Error::Invalid("cannot build a charset from zero segments".into()));
    }
    Ok(Charset::from_phonemes(
        train_segments.iter().flat_map(|s| s.words.iter()).flat_map(|w| w.chars()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(words: &[&str]) -> Segment {
        Segment {
            song_id: "s".into(),
            start: 0.0,
            end: 20.0,
            words: words.iter().map(|w| w.to_string()).collect(),
            label: SegmentLabel::Ambiguous,
        }
    }

    #[test]
    fn two_phonemes_give_five_tokens() {
        let c = build_charset(&[seg(&["ab", "ba"])]).unwrap();
        assert_eq!(c.tokens(), ["ε", " ", "I", "a", "b"]);
        assert_eq!(c.id("ε"), Some(Charset::BLANK_ID));
    }

    #[test]
    fn codepoint_order() {
        let c = build_charset(&[seg(&["ʃa", "ŋe"])]).unwrap();
        assert_eq!(&c.tokens()[3..], ["a", "e", "ŋ", "ʃ"]);
    }

    #[test]
    fn empty_segment_set_fails() {
        assert!(build_charset(&[]).is_err());
    }

    #[test]
    fn encode_drops_unseen_and_decodes_back() {
        let c = build_charset(&[seg(&["ab"])]).unwrap();
        let e = c.encode_words(&["ab", "azb"]);
        assert_eq!(e.ids, vec![3, 4, 1, 3, 4]);
        assert_eq!(e.dropped, 1);
        assert_eq!(c.decode_words(&e.ids), vec!["ab", "ab"]);
        assert_eq!(c.encode_words::<&str>(&[]).ids, vec![Charset::INSTRUMENTAL_ID]);
    }

    #[test]
    fn serde_roundtrip_validates() {
        let c = build_charset(&[seg(&["ab"])]).unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<Charset>(&json).unwrap(), c);
        assert!(serde_json::from_str::<Charset>(r#"["a","b","c"]"#).is_err());
    }
}
