//! Log-mel filterbank + energy features with regression deltas.
//!
//! A 16 kHz mono waveform becomes `N × 123` rows: 40 log-mel coefficients and
//! log energy (41 static columns), then their deltas and double-deltas.
//! Computation is in `f64`; the stored matrix is `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const STATIC_DIM: usize = 41;
pub const FEATURE_DIM: usize = 3 * STATIC_DIM;

const CACHE_MAGIC: &[u8; 8] = b"SLIDFEAT";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    /// Window length in samples (32 ms at 16 kHz).
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
    pub delta_window: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: SAMPLE_RATE,
            win_length: 512,
            hop_length: 256,
            n_fft: 512,
            n_mels: 40,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-10,
            delta_window: 2,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("features: {m}")));
        if self.sample_rate != SAMPLE_RATE {
            return bad("only 16 kHz input is supported");
        }
        if self.n_mels + 1 != STATIC_DIM {
            return bad("n_mels must be 40 (41 static columns with energy)");
        }
        if self.win_length == 0 || self.hop_length == 0 || self.n_fft < self.win_length {
            return bad("need 0 < hop_length, 0 < win_length <= n_fft");
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= self.sample_rate as f64 / 2.0) {
            return bad("need 0 <= f_min < f_max <= sample_rate / 2");
        }
        if !(self.log_floor > 0.0) || self.delta_window == 0 {
            return bad("log_floor and delta_window must be positive");
        }
        Ok(())
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop_length as f64
    }

    /// `floor((samples − win) / hop) + 1`, or 0 when shorter than one window.
    pub fn frames_for_samples(&self, samples: usize) -> usize {
        if samples < self.win_length {
            0
        } else {
            (samples - self.win_length) / self.hop_length + 1
        }
    }

    /// Duration in seconds spanned by `frames` analysis windows.
    pub fn duration_of_frames(&self, frames: usize) -> f64 {
        if frames == 0 {
            return 0.0;
        }
        ((frames - 1) * self.hop_length + self.win_length) as f64 / self.sample_rate as f64
    }
}

/// Acoustic features of one excerpt.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    /// `N × 123`: static | delta | delta-delta.
    pub data: Array2<f32>,
    pub frame_rate: f64,
}

impl FeatureMatrix {
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    /// Rows `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<FeatureMatrix> {
        if start + len > self.frames() {
            return Err(Error::Invalid(format!(
                "frame range {start}+{len} exceeds {} frames",
                self.frames()
            )));
        }
        Ok(FeatureMatrix {
            data: self.data.slice(s![start..start + len, ..]).to_owned(),
            frame_rate: self.frame_rate,
        })
    }
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Cut the waveform into windowed frames (`N × win_length`).
pub fn frame_signal(wave: &[f64], cfg: &FeatureConfig) -> Result<Array2<f64>> {
    let n = cfg.frames_for_samples(wave.len());
    if n == 0 {
        return Err(Error::Invalid(format!(
            "waveform of {} samples is shorter than one {}-sample window",
            wave.len(),
            cfg.win_length
        )));
    }
    let window = hann_window(cfg.win_length);
    Ok(Array2::from_shape_fn((n, cfg.win_length), |(t, k)| {
        wave[t * cfg.hop_length + k] * window[k]
    }))
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on a mel-uniform grid, evaluated at FFT bin frequencies.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `n_mels × (n_fft/2 + 1)`
    pub weights: Array2<f64>,
    /// Filter edge frequencies, `n_mels + 2` points in Hz.
    pub edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &FeatureConfig) -> Self {
        let bins = cfg.n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
        let edges_hz: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        let weights = Array2::from_shape_fn((cfg.n_mels, bins), |(m, k)| {
            let f = k as f64 * bin_hz;
            let (a, c, b) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            if f > a && f <= c {
                (f - a) / (c - a)
            } else if f > c && f < b {
                (b - f) / (b - c)
            } else {
                0.0
            }
        });
        MelFilterbank { weights, edges_hz }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.edges_hz[1..self.edges_hz.len() - 1]
    }
}

struct Spectrum {
    fft: Arc<dyn Fft<f64>>,
    n_fft: usize,
}

impl Spectrum {
    fn new(n_fft: usize) -> Self {
        Spectrum {
            fft: FftPlanner::new().plan_fft_forward(n_fft),
            n_fft,
        }
    }

    fn magnitude(&self, frame: &[f64], out: &mut [f64]) {
        let mut buf: Vec<Complex<f64>> = (0..self.n_fft)
            .map(|k| Complex::new(frame.get(k).copied().unwrap_or(0.0), 0.0))
            .collect();
        self.fft.process(&mut buf);
        for (o, c) in out.iter_mut().zip(&buf) {
            *o = c.norm();
        }
    }
}

/// Log mel-filterbank magnitudes (40 columns) plus log frame energy.
pub fn logmel_energy(frames: ArrayView2<f64>, cfg: &FeatureConfig) -> Array2<f64> {
    let bank = MelFilterbank::new(cfg);
    let spectrum = Spectrum::new(cfg.n_fft);
    let bins = cfg.n_fft / 2 + 1;
    let mut mag = vec![0.0; bins];
    let mut out = Array2::zeros((frames.nrows(), cfg.n_mels + 1));
    for (t, frame) in frames.rows().into_iter().enumerate() {
        let frame = frame.to_vec();
        spectrum.magnitude(&frame, &mut mag);
        for m in 0..cfg.n_mels {
            let e: f64 = bank.weights.row(m).iter().zip(&mag).map(|(w, a)| w * a).sum();
            out[[t, m]] = (e + cfg.log_floor).ln();
        }
        let energy: f64 = frame.iter().map(|v| v * v).sum();
        out[[t, cfg.n_mels]] = (energy + cfg.log_floor).ln();
    }
    out
}

fn regression_deltas(feat: &Array2<f64>, window: usize) -> Array2<f64> {
    let (n, d) = feat.dim();
    let norm: f64 = 2.0 * (1..=window).map(|k| (k * k) as f64).sum::<f64>();
    let clamp = |t: isize| t.clamp(0, n as isize - 1) as usize;
    Array2::from_shape_fn((n, d), |(t, j)| {
        (1..=window)
            .map(|k| {
                let ahead = feat[[clamp(t as isize + k as isize), j]];
                let behind = feat[[clamp(t as isize - k as isize), j]];
                k as f64 * (ahead - behind)
            })
            .sum::<f64>()
            / norm
    })
}

/// Append regression deltas and double-deltas (edges replicated).
pub fn add_deltas(feat: &Array2<f64>, window: usize) -> Array2<f64> {
    let (n, d) = feat.dim();
    let delta = regression_deltas(feat, window);
    let delta2 = regression_deltas(&delta, window);
    let mut out = Array2::zeros((n, 3 * d));
    out.slice_mut(s![.., ..d]).assign(feat);
    out.slice_mut(s![.., d..2 * d]).assign(&delta);
    out.slice_mut(s![.., 2 * d..]).assign(&delta2);
    out
}

pub fn extract_features(wave: &[f64], cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    let frames = frame_signal(wave, cfg)?;
    let full = add_deltas(&logmel_energy(frames.view(), cfg), cfg.delta_window);
    Ok(FeatureMatrix {
        data: full.mapv(|v| v as f32),
        frame_rate: cfg.frame_rate(),
    })
}

/// Read a 16 kHz mono WAV file as `f64` samples in `[-1, 1]`.
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Format(format!(
            "{}: expected 16 kHz mono, got {} Hz × {} channels",
            path.display(),
            spec.sample_rate,
            spec.channels
        )));
    }
    let fmt_err = |e: hound::Error| Error::Format(format!("{}: {e}", path.display()));
    match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from).map_err(fmt_err))
            .collect(),
        hound::SampleFormat::Int => {
            let scale = 2f64.powi(spec.bits_per_sample as i32 - 1);
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale).map_err(fmt_err))
                .collect()
        }
    }
}

pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let fmt_err = |e: hound::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = hound::WavWriter::create(path, spec).map_err(fmt_err)?;
    for &s in samples {
        w.write_sample(s as f32).map_err(fmt_err)?;
    }
    w.finalize().map_err(fmt_err)
}

/// Binary matrix cache: magic, version, rows, cols, frame rate, then
/// row-major little-endian `f32`. Used for features and posteriorgrams alike.
pub fn write_matrix_cache(path: &Path, data: ArrayView2<f32>, frame_rate: f64) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(CACHE_MAGIC).map_err(io)?;
    w.write_all(&CACHE_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(data.nrows() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(data.ncols() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&frame_rate.to_le_bytes()).map_err(io)?;
    for v in data.iter() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_matrix_cache(path: &Path) -> Result<(Array2<f32>, f64)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Format(format!("{}: not a feature cache", path.display())));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4).map_err(io)?;
    let version = u32::from_le_bytes(b4);
    if version != CACHE_VERSION {
        return Err(Error::Format(format!("{}: unsupported cache version {version}", path.display())));
    }
    r.read_exact(&mut b8).map_err(io)?;
    let rows = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b4).map_err(io)?;
    let cols = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b8).map_err(io)?;
    let frame_rate = f64::from_le_bytes(b8);
    let mut bytes = vec![0u8; rows * cols * 4];
    r.read_exact(&mut bytes).map_err(io)?;
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data = Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Format(e.to_string()))?;
    Ok((data, frame_rate))
}

pub fn write_feature_cache(path: &Path, feat: &FeatureMatrix) -> Result<()> {
    write_matrix_cache(path, feat.data.view(), feat.frame_rate)
}

pub fn read_feature_cache(path: &Path) -> Result<FeatureMatrix> {
    let (data, frame_rate) = read_matrix_cache(path)?;
    Ok(FeatureMatrix { data, frame_rate })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> FeatureConfig {
        FeatureConfig::default()
    }

    #[test]
    fn frame_counts() {
        let c = cfg();
        assert_eq!(frame_signal(&vec![0.0; 16000], &c).unwrap().nrows(), 61);
        assert_eq!(frame_signal(&vec![0.0; 512], &c).unwrap().nrows(), 1);
        assert!(frame_signal(&vec![0.0; 511], &c).is_err());
        assert_eq!(c.frames_for_samples(320_000), 1249);
    }

    #[test]
    fn constant_frame_equals_window() {
        let frames = frame_signal(&vec![1.0; 512], &cfg()).unwrap();
        let w = hann_window(512);
        assert_eq!(frames.row(0).to_vec(), w);
        assert_eq!(w[0], 0.0);
    }

    #[test]
    fn silence_hits_the_floor() {
        let c = cfg();
        let f = logmel_energy(frame_signal(&vec![0.0; 1024], &c).unwrap().view(), &c);
        assert!(f.iter().all(|&v| v == c.log_floor.ln()));
    }

    #[test]
    fn doubling_amplitude_adds_log4_energy() {
        let c = cfg();
        let wave: Vec<f64> = (0..2048).map(|i| (i as f64 * 0.37).sin() * 0.3).collect();
        let loud: Vec<f64> = wave.iter().map(|v| 2.0 * v).collect();
        let a = logmel_energy(frame_signal(&wave, &c).unwrap().view(), &c);
        let b = logmel_energy(frame_signal(&loud, &c).unwrap().view(), &c);
        for t in 0..a.nrows() {
            assert!((b[[t, 40]] - a[[t, 40]] - 4f64.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn tone_peaks_at_nearest_mel_center() {
        let c = cfg();
        let wave: Vec<f64> = (0..4096)
            .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 16000.0).sin())
            .collect();
        let f = logmel_energy(frame_signal(&wave, &c).unwrap().view(), &c);
        let row = f.row(2);
        let got = (0..40).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        // independent oracle: natural-log mel scale, uniform grid of 42 edges
        let mel = |hz: f64| 1127.0 * (1.0 + hz / 700.0).ln();
        let top = mel(8000.0);
        let want = (0..40)
            .min_by(|&a, &b| {
                let ca = top * (a + 1) as f64 / 41.0;
                let cb = top * (b + 1) as f64 / 41.0;
                (ca - mel(1000.0)).abs().total_cmp(&(cb - mel(1000.0)).abs())
            })
            .unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn one_hop_shift_shifts_rows() {
        let c = cfg();
        let wave: Vec<f64> = (0..4096).map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5).collect();
        let a = logmel_energy(frame_signal(&wave, &c).unwrap().view(), &c);
        let b = logmel_energy(frame_signal(&wave[256..], &c).unwrap().view(), &c);
        for t in 0..b.nrows() {
            for j in 0..41 {
                assert!((a[[t + 1, j]] - b[[t, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deltas_of_constant_and_ramp() {
        let constant = Array2::from_elem((7, 3), 2.5);
        let d = add_deltas(&constant, 2);
        assert!(d.slice(s![.., 3..]).iter().all(|&v| v == 0.0));

        let ramp = Array2::from_shape_fn((9, 2), |(t, j)| 0.75 * t as f64 + j as f64);
        let d = add_deltas(&ramp, 2);
        for t in 2..7 {
            assert!((d[[t, 2]] - 0.75).abs() < 1e-12);
            assert!((d[[t, 3]] - 0.75).abs() < 1e-12);
        }

        let single = Array2::from_shape_fn((1, 4), |(_, j)| j as f64 * 3.0);
        assert!(add_deltas(&single, 2).slice(s![.., 4..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn twenty_second_segment_shape() {
        let wave: Vec<f64> = (0..320_000).map(|i| ((i % 97) as f64 / 97.0 - 0.5) * 0.1).collect();
        let f = extract_features(&wave, &cfg()).unwrap();
        assert_eq!(f.data.dim(), (1249, FEATURE_DIM));
        assert!(f.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.feat");
        let m = FeatureMatrix {
            data: Array2::from_shape_fn((3, 5), |(i, j)| i as f32 - 0.25 * j as f32),
            frame_rate: 62.5,
        };
        write_feature_cache(&p, &m).unwrap();
        assert_eq!(read_feature_cache(&p).unwrap(), m);
    }
}
