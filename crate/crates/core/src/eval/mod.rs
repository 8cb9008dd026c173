//! Song-level evaluation for closed- and open-set scenarios.

pub mod metrics;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{bootstrap_std_error, edit_distance, ConfusionMatrix};

use crate::dataset::{Domain, ScenarioKind, SplitData};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::system::SongSystem;

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongOutcome {
    pub song_id: String,
    pub language: String,
    pub truth: String,
    /// Predicted class name, or `instrumental`.
    pub predicted: String,
    pub score: f64,
    pub segments_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: ScenarioKind,
    pub mode: String,
    pub classes: Vec<String>,
    pub songs: usize,
    pub balanced_accuracy: f64,
    pub balanced_accuracy_std_error: f64,
    pub macro_f1: f64,
    pub f1: Vec<f64>,
    pub confusion: ConfusionMatrix,
    /// Open set: mean F1 over the target classes.
    pub target_macro_f1: Option<f64>,
    pub others_f1: Option<f64>,
    /// Open set: share of in-domain "Others" songs labeled Others, percent.
    pub others_in_domain_accuracy: Option<f64>,
    /// Open set: share of out-of-domain songs labeled Others, percent.
    pub others_out_of_domain_accuracy: Option<f64>,
    pub dropped_test_phonemes: usize,
    pub phoneme_error_rate: Option<f64>,
    pub outcomes: Vec<SongOutcome>,
}

fn share(hits: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| 100.0 * hits as f64 / total as f64)
}

/// Predict every song of `split` and score the predictions.
pub fn evaluate<T: Scalar>(system: &SongSystem<T>, split: &SplitData, seed: u64) -> Result<EvalReport> {
    let preds = split
        .songs
        .par_iter()
        .map(|s| system.predict_song(s))
        .collect::<Result<Vec<_>>>()?;
    let classes = system.labels.len();
    let pairs: Vec<(usize, Option<usize>)> = split.songs.iter().zip(&preds).map(|(s, p)| (s.class, p.class())).collect();
    let confusion = ConfusionMatrix::from_pairs(classes, &pairs);
    let std_error = if pairs.is_empty() {
        0.0
    } else {
        bootstrap_std_error(classes, &pairs, BOOTSTRAP_RESAMPLES, seed)?
    };

    let open = system.labels.kind == ScenarioKind::Open;
    let others = system.labels.others_class();
    let domain_accuracy = |d: Domain| {
        let (hits, total) = split
            .songs
            .iter()
            .zip(&preds)
            .filter(|(s, _)| s.domain == d)
            .fold((0, 0), |(h, t), (_, p)| (h + usize::from(p.class() == others), t + 1));
        share(hits, total)
    };
    let targets: Vec<usize> = (0..classes).filter(|&c| Some(c) != others).collect();

    let outcomes = split
        .songs
        .iter()
        .zip(&preds)
        .map(|(s, p)| SongOutcome {
            song_id: s.id.clone(),
            language: s.language.clone(),
            truth: system.labels.classes[s.class].clone(),
            predicted: system.verdict_name(p.verdict).to_string(),
            score: p.score(),
            segments_used: p.segments_used,
        })
        .collect();

    Ok(EvalReport {
        scenario: system.labels.kind,
        mode: system.mode.name().to_string(),
        classes: system.labels.classes.clone(),
        songs: split.songs.len(),
        balanced_accuracy: confusion.balanced_accuracy(),
        balanced_accuracy_std_error: std_error,
        macro_f1: confusion.macro_f1(),
        f1: (0..classes).map(|c| 100.0 * confusion.f1(c)).collect(),
        target_macro_f1: open.then(|| confusion.macro_f1_over(&targets)),
        others_f1: others.map(|o| 100.0 * confusion.f1(o)),
        others_in_domain_accuracy: if open { domain_accuracy(Domain::InDomainOther) } else { None },
        others_out_of_domain_accuracy: if open { domain_accuracy(Domain::OutOfDomainOther) } else { None },
        confusion,
        dropped_test_phonemes: 0,
        phoneme_error_rate: None,
        outcomes,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width text summary.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let scenario = match self.scenario {
            ScenarioKind::Closed => "closed",
            ScenarioKind::Open => "open",
        };
        out.push_str(&format!("scenario            {scenario}\n"));
        out.push_str(&format!("mode                {}\n", self.mode));
        out.push_str(&format!("songs               {}\n", self.songs));
        out.push_str(&format!(
            "balanced accuracy   {:.2} +/- {:.2}\n",
            self.balanced_accuracy, self.balanced_accuracy_std_error
        ));
        out.push_str(&format!("macro F1            {:.2}\n", self.macro_f1));
        if self.scenario == ScenarioKind::Open {
            out.push_str(&format!("target macro F1     {}\n", opt(self.target_macro_f1)));
            out.push_str(&format!("Others F1           {}\n", opt(self.others_f1)));
            out.push_str(&format!("Others in-domain    {}\n", opt(self.others_in_domain_accuracy)));
            out.push_str(&format!("Others out-domain   {}\n", opt(self.others_out_of_domain_accuracy)));
        }
        if let Some(per) = self.phoneme_error_rate {
            out.push_str(&format!("phoneme error rate  {:.2}\n", 100.0 * per));
        }
        out.push_str(&format!("dropped phonemes    {}\n\n", self.dropped_test_phonemes));

        let width = self.classes.iter().map(|c| c.len()).max().unwrap_or(0).max(8);
        out.push_str(&format!("{:<width$}", "true\\pred"));
        for c in &self.classes {
            out.push_str(&format!(" {c:>width$}"));
        }
        out.push_str(&format!(" {:>width$} {:>width$}\n", "instr.", "F1"));
        for (i, name) in self.classes.iter().enumerate() {
            out.push_str(&format!("{name:<width$}"));
            for n in &self.confusion.counts[i] {
                out.push_str(&format!(" {n:>width$}"));
            }
            out.push_str(&format!(" {:>width$} {:>width$.2}\n", self.confusion.abstained[i], self.f1[i]));
        }
        out
    }
}
