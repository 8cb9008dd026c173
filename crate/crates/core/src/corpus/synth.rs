//! Synthetic singing corpus: each language is a first-order Markov chain over
//! a shared phoneme alphabet, and each phoneme is rendered as a held chord of
//! partials in its own frequency band. Languages differ in phonotactics and
//! in phoneme frequencies.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{write_manifest, AudioSource, Corpus, Song, Word};
use crate::error::{Error, Result};
use crate::features::{extract_features, hz_to_mel, mel_to_hz, write_feature_cache, FeatureConfig, SAMPLE_RATE};

pub const SYNTH_ALPHABET: [char; 8] = ['a', 'e', 'i', 'o', 'u', 'ŋ', 'ɾ', 'ʃ'];

const LEAD_IN: f64 = 0.3;
const WORD_GAP: f64 = 0.2;
const PHONEME_MIN: f64 = 0.2;
const PHONEME_MAX: f64 = 0.35;
const WORD_MIN_PHONEMES: usize = 2;
const WORD_MAX_PHONEMES: usize = 4;
const AMPLITUDE: f64 = 0.3;
const FADE: f64 = 0.01;
const BAND_LOW_HZ: f64 = 300.0;
const BAND_HIGH_HZ: f64 = 5000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLanguage {
    pub name: String,
    /// Row-stochastic phoneme transition matrix over `SYNTH_ALPHABET`.
    pub transitions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub languages: Vec<SynthLanguage>,
    pub songs_per_language: usize,
    /// Song length in seconds.
    pub song_duration: f64,
    /// Standard deviation of the additive white noise.
    pub noise_level: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let n = SYNTH_ALPHABET.len();
        if self.languages.is_empty() || self.songs_per_language == 0 {
            return Err(Error::Invalid("synthetic corpus needs languages and songs".into()));
        }
        if !(self.song_duration >= 1.0) || !(self.noise_level >= 0.0) {
            return Err(Error::Invalid("song_duration must be >= 1 s and noise_level >= 0".into()));
        }
        for lang in &self.languages {
            let bad = |m: &str| Err(Error::Invalid(format!("language {}: {m}", lang.name)));
            if lang.transitions.len() != n || lang.transitions.iter().any(|r| r.len() != n) {
                return bad("transition matrix must be square over the alphabet");
            }
            for (i, row) in lang.transitions.iter().enumerate() {
                if row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return bad(&format!("row {i} is not a probability distribution"));
                }
                // a repeated phoneme would be acoustically indistinguishable from a held one
                if row[i] != 0.0 {
                    return bad(&format!("row {i} allows a self-transition"));
                }
            }
        }
        Ok(())
    }
}

/// Share of each transition row drawn from the language's phoneme profile.
const PROFILE_MIX: f64 = 0.4;
/// Weight of a profile phoneme relative to the others.
const PROFILE_WEIGHT: f64 = 6.0;
/// Phonemes from this index on are foreign to the structured languages.
const CORE_PHONEMES: usize = 6;
/// Factor applied to transitions into foreign phonemes.
const FOREIGN_DAMPING: f64 = 0.2;

/// Transition matrix with two favored successors per phoneme, mixed with a
/// phoneme-frequency profile. Language `k` favors the phonemes `2k + 1` and
/// `2k + 2` places ahead, so the first three languages never share a favored
/// pair, over-uses core phonemes `k` and `k + 3`, and rarely uses the
/// foreign phonemes. Without the profile every chain is circulant and all
/// languages share the uniform phoneme distribution.
fn structured_language(name: &str, k: usize) -> SynthLanguage {
    let n = SYNTH_ALPHABET.len();
    let mut profile = vec![1.0; n];
    profile[k % CORE_PHONEMES] = PROFILE_WEIGHT;
    profile[(k + 3) % CORE_PHONEMES] = PROFILE_WEIGHT;
    let transitions = (0..n)
        .map(|i| {
            let mut row = vec![0.15 / (n - 3) as f64; n];
            row[i] = 0.0;
            row[(i + 2 * k + 1) % n] = 0.5;
            row[(i + 2 * k + 2) % n] = 0.35;
            let mass: f64 = (0..n).filter(|&j| j != i).map(|j| profile[j]).sum();
            for j in (0..n).filter(|&j| j != i) {
                row[j] = (1.0 - PROFILE_MIX) * row[j] + PROFILE_MIX * profile[j] / mass;
            }
            row[CORE_PHONEMES..].iter_mut().for_each(|p| *p *= FOREIGN_DAMPING);
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= z);
            row
        })
        .collect();
    SynthLanguage {
        name: name.to_string(),
        transitions,
    }
}

/// Near-uniform transitions with a small random tilt.
fn flat_language(name: &str, rng: &mut ChaCha8Rng) -> SynthLanguage {
    let n = SYNTH_ALPHABET.len();
    let transitions = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| if j == i { 0.0 } else { 1.0 + 0.3 * rng.random::<f64>() }).collect();
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= z);
            row
        })
        .collect();
    SynthLanguage {
        name: name.to_string(),
        transitions,
    }
}

/// Three phonotactically distinct languages.
pub fn closed_set_spec(seed: u64, songs_per_language: usize, song_duration: f64, noise_level: f64) -> SynthSpec {
    SynthSpec {
        languages: ["alpha", "beta", "gamma"]
            .iter()
            .enumerate()
            .map(|(k, n)| structured_language(n, k))
            .collect(),
        songs_per_language,
        song_duration,
        noise_level,
        seed,
    }
}

/// The closed-set languages plus three near-uniform ones that use the foreign
/// phonemes freely: `delta` and `epsilon` for the in-domain "Others" class
/// and `zeta` as an unseen language.
pub fn open_set_spec(seed: u64, songs_per_language: usize, song_duration: f64, noise_level: f64) -> SynthSpec {
    let mut spec = closed_set_spec(seed, songs_per_language, song_duration, noise_level);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x07e5_e75e);
    spec.languages
        .extend(["delta", "epsilon", "zeta"].iter().map(|n| flat_language(n, &mut rng)));
    spec
}

/// Centre frequency of a phoneme's band: mel-uniform over 300 Hz to 5 kHz.
pub fn band_center_hz(phoneme: usize) -> f64 {
    let (lo, hi) = (hz_to_mel(BAND_LOW_HZ), hz_to_mel(BAND_HIGH_HZ));
    mel_to_hz(lo + (hi - lo) * phoneme as f64 / (SYNTH_ALPHABET.len() - 1) as f64)
}

/// A held phoneme: three partials around its band centre with short fades.
pub fn render_phoneme(phoneme: usize, samples: usize) -> Vec<f64> {
    let f = band_center_hz(phoneme);
    let partials = [(0.96 * f, 0.5), (f, 1.0), (1.04 * f, 0.5)];
    let sr = SAMPLE_RATE as f64;
    let fade = (FADE * sr) as usize;
    (0..samples)
        .map(|i| {
            let t = i as f64 / sr;
            let tone: f64 = partials
                .iter()
                .map(|(hz, a)| a * (2.0 * std::f64::consts::PI * hz * t).sin())
                .sum::<f64>()
                / 2.0;
            let edge = i.min(samples - 1 - i);
            let env = if edge < fade { edge as f64 / fade as f64 } else { 1.0 };
            AMPLITUDE * env * tone
        })
        .collect()
}

fn sample_index(row: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Render one song: waveform plus word annotations.
fn render_song(lang: &SynthLanguage, duration: f64, noise: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<Word>) {
    let sr = SAMPLE_RATE as f64;
    let total = (duration * sr).round() as usize;
    let mut wave = vec![0.0; total];
    let mut words = Vec::new();
    let mut t = LEAD_IN;
    let mut phoneme = rng.random_range(0..SYNTH_ALPHABET.len());
    loop {
        let len = rng.random_range(WORD_MIN_PHONEMES..=WORD_MAX_PHONEMES);
        let durs: Vec<f64> = (0..len).map(|_| rng.random_range(PHONEME_MIN..PHONEME_MAX)).collect();
        let word_len: f64 = durs.iter().sum();
        if t + word_len > duration - WORD_GAP {
            break;
        }
        let start = t;
        let mut text = String::new();
        for d in durs {
            let (a, b) = ((t * sr).round() as usize, ((t + d) * sr).round() as usize);
            for (w, s) in wave[a..b].iter_mut().zip(render_phoneme(phoneme, b - a)) {
                *w += s;
            }
            text.push(SYNTH_ALPHABET[phoneme]);
            t += d;
            phoneme = sample_index(&lang.transitions[phoneme], rng);
        }
        words.push(Word {
            text,
            start: round_ms(start),
            end: round_ms(t),
        });
        t += WORD_GAP;
    }
    if noise > 0.0 {
        // uniform noise with the requested standard deviation
        let half = noise * 3f64.sqrt();
        wave.iter_mut().for_each(|w| *w += rng.random_range(-half..half));
    }
    (wave, words)
}

/// Manifest times are written with millisecond precision; keep the
/// in-memory corpus identical to what a reload would produce.
fn round_ms(t: f64) -> f64 {
    (t * 1000.0).round() / 1000.0
}

/// Generate the corpus into `out_dir`: one feature cache per song under
/// `features/` and `manifest.tsv`. Songs of one language are sung by artists
/// owning one or two songs each.
pub fn generate_synth(spec: &SynthSpec, features: &FeatureConfig, out_dir: &Path) -> Result<Corpus> {
    spec.validate()?;
    features.validate()?;
    let feat_dir = out_dir.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;

    let mut plan = Vec::new();
    let mut artist_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for (li, lang) in spec.languages.iter().enumerate() {
        let mut artist = 0;
        let mut left = 0;
        for k in 0..spec.songs_per_language {
            if left == 0 {
                artist += 1;
                left = artist_rng.random_range(1..=2);
            }
            left -= 1;
            plan.push((li, format!("{}-{k:03}", lang.name), format!("{}-artist{artist:02}", lang.name)));
        }
    }

    let songs: Vec<Song> = plan
        .into_par_iter()
        .enumerate()
        .map(|(index, (li, id, artist))| {
            let lang = &spec.languages[li];
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(index as u64 + 1);
            let (wave, words) = render_song(lang, spec.song_duration, spec.noise_level, &mut rng);
            let feat = extract_features(&wave, features)?;
            let path = feat_dir.join(format!("{id}.feat"));
            write_feature_cache(&path, &feat)?;
            Ok(Song {
                id,
                artist_id: artist,
                language: lang.name.clone(),
                source: AudioSource::Features(path),
                words,
            })
        })
        .collect::<Result<_>>()?;
    let corpus = Corpus { songs };
    write_manifest(&corpus, &out_dir.join("manifest.tsv"))?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{frame_signal, logmel_energy, MelFilterbank};

    #[test]
    fn presets_are_valid() {
        closed_set_spec(1, 2, 5.0, 0.01).validate().unwrap();
        let open = open_set_spec(1, 2, 5.0, 0.01);
        open.validate().unwrap();
        assert_eq!(open.languages.len(), 6);
    }

    #[test]
    fn invalid_matrix_rejected() {
        let mut spec = closed_set_spec(1, 2, 5.0, 0.0);
        spec.languages[0].transitions[2][3] += 0.1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn phoneme_peaks_in_its_band() {
        let cfg = FeatureConfig::default();
        let bank = MelFilterbank::new(&cfg);
        for p in 0..SYNTH_ALPHABET.len() {
            let wave = render_phoneme(p, 4096);
            let f = logmel_energy(frame_signal(&wave, &cfg).unwrap().view(), &cfg);
            let row = f.row(5);
            let got = (0..40).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            let target = hz_to_mel(band_center_hz(p));
            let want = (0..40)
                .min_by(|&a, &b| {
                    let da = (hz_to_mel(bank.centers_hz()[a]) - target).abs();
                    let db = (hz_to_mel(bank.centers_hz()[b]) - target).abs();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(got, want, "phoneme {p}");
        }
    }

    #[test]
    fn words_match_rendering() {
        let spec = closed_set_spec(3, 1, 12.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (wave, words) = render_song(&spec.languages[0], 12.0, 0.0, &mut rng);
        assert_eq!(wave.len(), 192_000);
        assert!(words.len() >= 8);
        for pair in words.windows(2) {
            assert!(pair[1].start >= pair[0].end + WORD_GAP - 1e-3);
        }
        for w in &words {
            let n = w.text.chars().count();
            assert!((WORD_MIN_PHONEMES..=WORD_MAX_PHONEMES).contains(&n));
            assert!(w.end <= 12.0);
            let chars: Vec<char> = w.text.chars().collect();
            assert!(chars.windows(2).all(|c| c[0] != c[1]));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = closed_set_spec(5, 2, 6.0, 0.02);
        let cfg = FeatureConfig::default();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ca = generate_synth(&spec, &cfg, a.path()).unwrap();
        let cb = generate_synth(&spec, &cfg, b.path()).unwrap();
        assert_eq!(ca.len(), 6);
        let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
        assert_eq!(read(a.path(), "manifest.tsv"), read(b.path(), "manifest.tsv"));
        for s in &ca.songs {
            let f = format!("features/{}.feat", s.id);
            assert_eq!(read(a.path(), &f), read(b.path(), &f));
        }
        let reloaded = super::super::load_manifest(&a.path().join("manifest.tsv")).unwrap();
        assert_eq!(reloaded, ca);
        assert_eq!(cb.songs[0].words, ca.songs[0].words);
    }
}
