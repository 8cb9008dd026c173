//! Run configuration: every tunable in one TOML document, layered over a
//! named preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acoustic::AcousticConfig;
use crate::classifier::ClassifierConfig;
use crate::corpus::{LabelConfig, SegmentConfig, SplitSpec};
use crate::dataset::{PrepareOptions, ScenarioConfig, ScenarioKind};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::system::InferenceConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Manifest of the corpus to train and evaluate on.
    pub manifest: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { manifest: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub songs_per_language: usize,
    pub song_duration: f64,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            songs_per_language: 30,
            song_duration: 30.0,
            noise_level: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub scenario: ScenarioConfig,
    pub features: FeatureConfig,
    pub segment: SegmentConfig,
    pub labels: LabelConfig,
    pub split: SplitSpec,
    pub acoustic: AcousticConfig,
    pub classifier: ClassifierConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub synth: SynthConfig,
}

/// Named starting points for a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Full-size networks and the standard optimizer settings.
    Standard,
    /// Small networks that train on the synthetic corpus in minutes.
    Tiny,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" | "default" => Ok(Preset::Standard),
            "tiny" => Ok(Preset::Tiny),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected standard or tiny)"))),
        }
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Standard => RunConfig::default(),
            Preset::Tiny => RunConfig::tiny(),
        }
    }

    /// Small networks and faster optimizer settings for synthetic runs.
    pub fn tiny() -> Self {
        let mut c = RunConfig::default();
        c.acoustic.conv_filters = 8;
        c.acoustic.lstm_hidden = 16;
        c.classifier.lstm_hidden = 16;
        c.train.lr = 1e-2;
        c.train.batch_size = 4;
        c.train.clip_norm = 1.0;
        c.train.max_epochs = 30;
        c
    }

    /// Apply a TOML document on top of this configuration. Keys absent from
    /// the document keep their current values.
    pub fn overlay_toml(&self, text: &str) -> Result<Self> {
        let base = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let patch: toml::Value = text
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| Error::Config(e.to_string()))?;
        let merged = merge(base, patch);
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::preset(preset).overlay_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Set every seed (split, training, synthesis) at once.
    pub fn reseed(&mut self, seed: u64) {
        self.split.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.segment.validate()?;
        self.labels.validate()?;
        self.split.validate()?;
        self.acoustic.validate()?;
        self.classifier.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.inference.clean_threshold) {
            return Err(Error::Config("inference: clean_threshold must lie in [0, 1]".into()));
        }
        if self.scenario.kind == ScenarioKind::Closed && !self.scenario.out_of_domain.is_empty() {
            return Err(Error::Config("closed-set scenarios have no out-of-domain languages".into()));
        }
        if self.synth.songs_per_language == 0 || !(self.synth.song_duration > 0.0) || !(self.synth.noise_level >= 0.0) {
            return Err(Error::Config("synth: need songs > 0, duration > 0, noise >= 0".into()));
        }
        Ok(())
    }

    pub fn prepare_options(&self) -> PrepareOptions {
        PrepareOptions {
            scenario: self.scenario.clone(),
            split: self.split.clone(),
            segment: self.segment.clone(),
            labels: self.labels.clone(),
            features: self.features.clone(),
        }
    }

    /// Scenario settings matching the synthetic corpus presets.
    pub fn synthetic_scenario(kind: ScenarioKind) -> ScenarioConfig {
        match kind {
            ScenarioKind::Closed => ScenarioConfig::default(),
            ScenarioKind::Open => ScenarioConfig {
                kind,
                targets: vec!["alpha".into(), "beta".into(), "gamma".into()],
                out_of_domain: vec!["zeta".into()],
            },
        }
    }
}

fn merge(base: toml::Value, patch: toml::Value) -> toml::Value {
    match (base, patch) {
        (toml::Value::Table(mut b), toml::Value::Table(p)) => {
            for (k, v) in p {
                let merged = match b.remove(&k) {
                    Some(old) => merge(old, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            toml::Value::Table(b)
        }
        (_, p) => p,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::default().overlay_toml(&c.to_toml()).unwrap(), c);
        let t = RunConfig::tiny();
        assert_eq!(RunConfig::default().overlay_toml(&t.to_toml()).unwrap(), t);
    }

    #[test]
    fn overlay_keeps_unmentioned_keys() {
        let c = RunConfig::tiny().overlay_toml("[train]\nlr = 0.5\n[segment]\nlength = 10.0\n").unwrap();
        assert_eq!(c.train.lr, 0.5);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.segment.length, 10.0);
        assert_eq!(c.acoustic.lstm_hidden, 16);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::default().overlay_toml("[train]\nlearning_rate = 1.0\n").is_err());
        assert!(RunConfig::default().overlay_toml("[bogus]\nx = 1\n").is_err());
        assert!(RunConfig::default().overlay_toml("[split]\ntrain = 0.9\n").is_err());
        assert!(RunConfig::default().overlay_toml("[train]\nmode = \"e3e\"\n").is_err());
    }

    #[test]
    fn reseed_sets_every_seed() {
        let mut c = RunConfig::default();
        c.reseed(42);
        assert_eq!((c.split.seed, c.train.seed, c.synth.seed), (42, 42, 42));
    }
}
