//! End-to-end glue: dataset to trained system to report.

use serde::{Deserialize, Serialize};

use crate::acoustic::AcousticModel;
use crate::classifier::LanguageClassifier;
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::Result;
use crate::eval::{evaluate, EvalReport};
use crate::scalar::Scalar;
use crate::system::{LanguageBackend, SongSystem};
use crate::training::{
    phoneme_error_rate, train_acoustic, train_classifier, train_joint, train_statistics, AcousticSummary,
    ClassifierSummary, JointSummary, TrainLog, TrainMode,
};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub acoustic: Option<AcousticSummary>,
    pub classifier: Option<ClassifierSummary>,
    pub joint: Option<JointSummary>,
    /// Greedy phoneme error rate of the final acoustic model on validation.
    pub val_phoneme_error_rate: f64,
}

pub struct Trained<T: Scalar> {
    pub system: SongSystem<T>,
    pub log: TrainLog,
    pub summary: TrainSummary,
}

fn acoustic_seed(cfg: &RunConfig) -> u64 {
    cfg.train.seed
}

fn classifier_seed(cfg: &RunConfig) -> u64 {
    cfg.train.seed.wrapping_add(1)
}

/// CTC-only acoustic training, the first stage of the two-step and
/// statistics systems.
pub fn train_acoustic_stage<T: Scalar>(
    ds: &Dataset,
    cfg: &RunConfig,
    log: &mut TrainLog,
) -> Result<(AcousticModel<T>, AcousticSummary)> {
    let mut am = AcousticModel::<T>::new(cfg.acoustic.clone(), ds.charset.len(), acoustic_seed(cfg))?;
    let summary = train_acoustic(&mut am, &ds.train, &ds.val, &cfg.train, log)?;
    Ok((am, summary))
}

/// Fit the language back end of a two-step or statistics system on top of
/// an already trained acoustic model.
pub fn finish_on_acoustic<T: Scalar>(
    ds: &Dataset,
    cfg: &RunConfig,
    mode: TrainMode,
    acoustic: AcousticModel<T>,
    acoustic_summary: AcousticSummary,
    mut log: TrainLog,
) -> Result<Trained<T>> {
    let mut summary = TrainSummary {
        val_phoneme_error_rate: acoustic_summary.phoneme_error_rate,
        acoustic: Some(acoustic_summary),
        ..Default::default()
    };
    let backend = match mode {
        TrainMode::Statistics => LanguageBackend::Linear(train_statistics(
            &acoustic,
            &ds.train,
            ds.labels.len(),
            cfg.classifier.clean_threshold,
            &cfg.train,
        )?),
        _ => {
            let mut clf = LanguageClassifier::<T>::new(
                cfg.classifier.clone(),
                ds.charset.len(),
                ds.labels.len(),
                classifier_seed(cfg),
            )?;
            summary.classifier = Some(train_classifier(&acoustic, &mut clf, &ds.train, &ds.val, &cfg.train, &mut log)?);
            LanguageBackend::Recurrent(clf)
        }
    };
    Ok(Trained {
        system: SongSystem {
            mode,
            acoustic,
            backend,
            charset: ds.charset.clone(),
            labels: ds.labels.clone(),
            inference: cfg.inference.clone(),
        },
        log,
        summary,
    })
}

/// Train the system selected by `cfg.train.mode`.
pub fn train_system<T: Scalar>(ds: &Dataset, cfg: &RunConfig) -> Result<Trained<T>> {
    cfg.validate()?;
    let mode = cfg.train.mode;
    let mut log = TrainLog::default();
    match mode {
        TrainMode::TwoStep | TrainMode::Statistics => {
            let (am, s) = train_acoustic_stage(ds, cfg, &mut log)?;
            finish_on_acoustic(ds, cfg, mode, am, s, log)
        }
        TrainMode::Joint | TrainMode::E2e => {
            let mut am = AcousticModel::<T>::new(cfg.acoustic.clone(), ds.charset.len(), acoustic_seed(cfg))?;
            let mut clf = LanguageClassifier::<T>::new(
                cfg.classifier.clone(),
                ds.charset.len(),
                ds.labels.len(),
                classifier_seed(cfg),
            )?;
            let joint = train_joint(&mut am, &mut clf, &ds.train, &ds.val, mode == TrainMode::Joint, &cfg.train, &mut log)?;
            let per = phoneme_error_rate(&am, &ds.val)?;
            Ok(Trained {
                system: SongSystem {
                    mode,
                    acoustic: am,
                    backend: LanguageBackend::Recurrent(clf),
                    charset: ds.charset.clone(),
                    labels: ds.labels.clone(),
                    inference: cfg.inference.clone(),
                },
                log,
                summary: TrainSummary {
                    joint: Some(joint),
                    val_phoneme_error_rate: per,
                    ..Default::default()
                },
            })
        }
    }
}

/// Evaluate on the test split, filling in the dataset-level fields.
pub fn evaluate_system<T: Scalar>(system: &SongSystem<T>, ds: &Dataset, seed: u64) -> Result<EvalReport> {
    let mut report = evaluate(system, &ds.test, seed)?;
    report.dropped_test_phonemes = ds.dropped_test_phonemes;
    report.phoneme_error_rate = Some(phoneme_error_rate(&system.acoustic, &ds.test)?);
    Ok(report)
}
