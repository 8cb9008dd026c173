//! Training loops: CTC acoustic training, the frozen-posteriorgram language
//! classifier, the joint and end-to-end objective, and the song-statistics
//! classifier.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acoustic::{features_as, AcousticModel};
use crate::classifier::{clean_posteriorgram, LanguageClassifier};
use crate::corpus::Charset;
use crate::ctc::{ctc_loss_grad, ctc_loss_logits, greedy_decode};
use crate::dataset::{class_counts, PreparedSegment, SegmentRef, SplitData};
use crate::error::{Error, Result};
use crate::eval::metrics::{edit_distance, ConfusionMatrix};
use crate::nn::{weighted_xent, weighted_xent_grad, Adam, AdamConfig, Mode, Parameterized, Softmax};
use crate::scalar::Scalar;
use crate::stats::{stats_pool, LinearClassifier, LinearConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    TwoStep,
    Joint,
    E2e,
    Statistics,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::TwoStep => "two_step",
            TrainMode::Joint => "joint",
            TrainMode::E2e => "e2e",
            TrainMode::Statistics => "statistics",
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_step" | "2step" | "two-step" => Ok(TrainMode::TwoStep),
            "joint" => Ok(TrainMode::Joint),
            "e2e" => Ok(TrainMode::E2e),
            "statistics" | "stats" => Ok(TrainMode::Statistics),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (expected two_step, joint, e2e or statistics)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr: f64,
    pub batch_size: usize,
    /// Weight of the language loss in each joint phase. The first phase
    /// stops on the joint validation loss, later ones on validation
    /// balanced accuracy.
    pub lambda_schedule: Vec<f64>,
    pub patience: usize,
    /// Per phase.
    pub max_epochs: usize,
    pub seed: u64,
    /// Worker threads for per-item gradients; 0 uses every core.
    pub workers: usize,
    /// Rescale each model's batch gradient to at most this norm; 0 disables.
    pub clip_norm: f64,
    pub linear: LinearConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::TwoStep,
            lr: 1e-3,
            batch_size: 32,
            lambda_schedule: vec![0.1, 100.0],
            patience: 5,
            max_epochs: 100,
            seed: 0,
            workers: 0,
            clip_norm: 0.0,
            linear: LinearConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative");
        }
        if self.lambda_schedule.is_empty() || self.lambda_schedule.iter().any(|l| !(*l > 0.0)) {
            return bad("lambda_schedule needs at least one positive weight");
        }
        self.linear.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..Default::default()
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }
}

/// `w_l = T / (L · n_l)` for `T` labeled items over `L` classes.
pub fn compute_class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Invalid(format!("class {c} has no labeled training segment")));
    }
    let total: usize = counts.iter().sum();
    let l = counts.len() as f64;
    Ok(counts.iter().map(|&n| total as f64 / (l * n as f64)).collect())
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    pub lambda: Option<f64>,
    pub train_ctc: Option<f64>,
    pub train_lid: Option<f64>,
    pub train_joint: Option<f64>,
    pub val_ctc: Option<f64>,
    pub val_lid: Option<f64>,
    pub val_joint: Option<f64>,
    pub val_bacc: Option<f64>,
    pub wall_time: f64,
}

impl EpochLog {
    fn new(phase: &str, epoch: usize) -> Self {
        EpochLog {
            phase: phase.to_string(),
            epoch,
            lambda: None,
            train_ctc: None,
            train_lid: None,
            train_joint: None,
            val_ctc: None,
            val_lid: None,
            val_joint: None,
            val_bacc: None,
            wall_time: 0.0,
        }
    }

    /// `key=value` pairs; absent values are left out.
    pub fn line(&self) -> String {
        let mut parts = vec![format!("phase={}", self.phase), format!("epoch={}", self.epoch)];
        let fields = [
            ("lambda", self.lambda),
            ("train_ctc", self.train_ctc),
            ("train_lid", self.train_lid),
            ("train_joint", self.train_joint),
            ("val_ctc", self.val_ctc),
            ("val_lid", self.val_lid),
            ("val_joint", self.val_joint),
            ("val_bacc", self.val_bacc),
        ];
        for (k, v) in fields {
            if let Some(v) = v {
                parts.push(format!("{k}={v:.6}"));
            }
        }
        parts.push(format!("wall_time={:.3}", self.wall_time));
        parts.join(" ")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Segments skipped because their transcription cannot be aligned.
    pub unalignable: usize,
}

impl TrainLog {
    fn push(&mut self, entry: EpochLog) {
        log::info!("{}", entry.line());
        self.epochs.push(entry);
    }

    pub fn text(&self) -> String {
        self.epochs.iter().map(|e| e.line() + "\n").collect()
    }
}

/// Keeps the best model seen and counts epochs without improvement. Ties
/// on the score go to the lower secondary loss.
struct EarlyStop<M> {
    best: Option<(f64, f64, M)>,
    stale: usize,
    patience: usize,
    higher_is_better: bool,
}

impl<M> EarlyStop<M> {
    fn new(patience: usize, higher_is_better: bool) -> Self {
        EarlyStop {
            best: None,
            stale: 0,
            patience,
            higher_is_better,
        }
    }

    /// Returns true when training should stop.
    fn observe(&mut self, score: f64, secondary: f64, model: impl FnOnce() -> M) -> bool {
        let better = match &self.best {
            None => true,
            Some((b, b2, _)) => {
                let strictly = if self.higher_is_better { score > *b } else { score < *b };
                strictly || (score == *b && secondary < *b2)
            }
        };
        if better && score.is_finite() {
            self.best = Some((score, secondary, model()));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }

    fn into_best(self) -> Option<(f64, M)> {
        self.best.map(|(s, _, m)| (s, m))
    }
}

/// Deterministic generator for one item of one batch, independent of the
/// worker that processes it.
pub fn item_rng(seed: u64, phase: u64, epoch: usize, item: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ phase.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(((epoch as u64) << 32) | item as u64);
    rng
}

fn shuffled<T: Clone>(items: &[T], seed: u64, phase: u64, epoch: usize) -> Vec<T> {
    let mut out = items.to_vec();
    let mut rng = item_rng(seed, phase ^ 0x5EED, epoch, usize::MAX >> 32);
    out.shuffle(&mut rng);
    out
}

fn check_finite(what: &str, epoch: usize, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("{what} became {value} in epoch {epoch}")))
    }
}

fn clip<M: Parameterized<T>, T: Scalar>(grads: &mut M, max_norm: f64) {
    if max_norm > 0.0 {
        let n = grads.norm();
        if n > max_norm {
            grads.scale(T::of(max_norm / n));
        }
    }
}

/// Ordered sum of per-item gradients.
fn sum_grads<M: Parameterized<T>, T: Scalar>(parts: impl IntoIterator<Item = M>) -> Option<M> {
    let mut it = parts.into_iter();
    let mut acc = it.next()?;
    for g in it {
        acc.add_assign_from(&g);
    }
    Some(acc)
}

fn segment_input<T: Scalar>(split: &SplitData, r: SegmentRef) -> (Array2<T>, &PreparedSegment) {
    let (song, seg) = split.get(r);
    (features_as(song.segment_features(seg)), seg)
}

const PHASE_ACOUSTIC: u64 = 1;
const PHASE_CLASSIFIER: u64 = 2;
const PHASE_JOINT: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticSummary {
    pub best_epoch: usize,
    pub best_val_ctc: f64,
    pub phoneme_error_rate: f64,
}

/// Mean CTC over the alignable segments, evaluation mode.
pub fn mean_ctc<T: Scalar>(model: &AcousticModel<T>, split: &SplitData) -> Result<(f64, usize)> {
    let refs = split.segment_refs();
    let losses: Vec<Option<f64>> = refs
        .par_iter()
        .map(|&r| -> Result<Option<f64>> {
            let (x, seg) = segment_input::<T>(split, r);
            let out = model.forward(x.view(), &mut Mode::Eval)?;
            match ctc_loss_logits(out.logits.view(), &seg.target, Charset::BLANK_ID) {
                Ok(l) => Ok(Some(l)),
                Err(Error::Unalignable { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let kept: Vec<f64> = losses.into_iter().flatten().collect();
    if kept.is_empty() {
        return Ok((f64::NAN, 0));
    }
    Ok((kept.iter().sum::<f64>() / kept.len() as f64, kept.len()))
}

fn phonemes_only(ids: &[usize]) -> Vec<usize> {
    ids.iter().copied().filter(|&i| i > Charset::INSTRUMENTAL_ID).collect()
}

/// Greedy-decoding phoneme error rate: total edit distance over total
/// reference phonemes, ignoring word boundaries and the instrumental token.
pub fn phoneme_error_rate<T: Scalar>(model: &AcousticModel<T>, split: &SplitData) -> Result<f64> {
    let refs = split.segment_refs();
    let parts: Vec<(usize, usize)> = refs
        .par_iter()
        .map(|&r| -> Result<(usize, usize)> {
            let (x, seg) = segment_input::<T>(split, r);
            let post = model.posteriorgram(x.view())?;
            let hyp = phonemes_only(&greedy_decode(post.view(), Charset::BLANK_ID));
            let reference = phonemes_only(&seg.target);
            Ok((edit_distance(&hyp, &reference), reference.len()))
        })
        .collect::<Result<_>>()?;
    let (errors, total) = parts.iter().fold((0, 0), |a, p| (a.0 + p.0, a.1 + p.1));
    if total == 0 {
        return Err(Error::Invalid("no reference phonemes to score".into()));
    }
    Ok(errors as f64 / total as f64)
}

/// Train the acoustic model on CTC alone, keeping the checkpoint with the
/// lowest validation CTC.
pub fn train_acoustic<T: Scalar>(
    model: &mut AcousticModel<T>,
    train: &SplitData,
    val: &SplitData,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<AcousticSummary> {
    cfg.validate()?;
    let pool = cfg.pool()?;
    let refs = train.segment_refs();
    if refs.is_empty() {
        return Err(Error::Invalid("no training segments".into()));
    }
    let mut adam = Adam::for_model(cfg.adam(), model);
    let mut stop = EarlyStop::new(cfg.patience, false);
    let started = Instant::now();
    for epoch in 0..cfg.max_epochs {
        let order = shuffled(&refs, cfg.seed, PHASE_ACOUSTIC, epoch);
        let (mut loss_sum, mut used) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<Option<(f64, AcousticModel<T>)>> = pool.install(|| {
                batch
                    .par_iter()
                    .enumerate()
                    .map(|(i, &r)| -> Result<_> {
                        let (x, seg) = segment_input::<T>(train, r);
                        let mut rng = item_rng(cfg.seed, PHASE_ACOUSTIC, epoch, b * cfg.batch_size + i);
                        let out = model.forward(x.view(), &mut Mode::Train(&mut rng))?;
                        match ctc_loss_grad(out.logits.view(), &seg.target, Charset::BLANK_ID) {
                            Ok((loss, g)) => Ok(Some((loss, model.backward(&out.cache, &g.mapv(T::of))?))),
                            Err(Error::Unalignable { .. }) => Ok(None),
                            Err(e) => Err(e),
                        }
                    })
                    .collect::<Result<_>>()
            })?;
            let skipped = items.iter().filter(|i| i.is_none()).count();
            if skipped > 0 && epoch == 0 {
                log::warn!("skipping {skipped} unalignable segments in batch {b}");
                log.unalignable += skipped;
            }
            let kept: Vec<(f64, AcousticModel<T>)> = items.into_iter().flatten().collect();
            if kept.is_empty() {
                continue;
            }
            let n = kept.len();
            let batch_loss: f64 = kept.iter().map(|k| k.0).sum();
            check_finite("training CTC", epoch, batch_loss)?;
            let mut grads = sum_grads(kept.into_iter().map(|k| k.1)).expect("non-empty");
            grads.scale(T::of(1.0 / n as f64));
            if !grads.all_finite() {
                return Err(Error::Diverged(format!("non-finite acoustic gradient in epoch {epoch}")));
            }
            clip(&mut grads, cfg.clip_norm);
            adam.update(model, &grads);
            loss_sum += batch_loss;
            used += n;
        }
        let (val_ctc, _) = pool.install(|| mean_ctc(model, val))?;
        let mut entry = EpochLog::new("acoustic", epoch);
        entry.train_ctc = Some(loss_sum / used.max(1) as f64);
        entry.val_ctc = Some(val_ctc);
        entry.wall_time = started.elapsed().as_secs_f64();
        log.push(entry);
        check_finite("validation CTC", epoch, val_ctc)?;
        if stop.observe(val_ctc, 0.0, || (epoch, model.clone())) {
            break;
        }
    }
    let (best_val_ctc, (best_epoch, best)) = stop.into_best().expect("at least one epoch");
    *model = best;
    let per = pool.install(|| phoneme_error_rate(model, val))?;
    log::info!("phase=acoustic best_epoch={best_epoch} val_ctc={best_val_ctc:.6} val_per={per:.6}");
    Ok(AcousticSummary {
        best_epoch,
        best_val_ctc,
        phoneme_error_rate: per,
    })
}

/// Cleaned posteriorgram of one segment; `None` when no frame survives.
pub fn cleaned_posteriorgram<T: Scalar>(
    acoustic: &AcousticModel<T>,
    features: ArrayView2<f32>,
    threshold: f64,
) -> Result<Option<Array2<T>>> {
    let x = features_as::<T>(features);
    let post = acoustic.posteriorgram(x.view())?;
    let (cleaned, _) = clean_posteriorgram(post.view(), threshold);
    Ok((cleaned.nrows() > 0).then_some(cleaned))
}

struct LabeledInput<T> {
    input: Array2<T>,
    class: usize,
}

fn labeled_posteriorgrams<T: Scalar>(
    acoustic: &AcousticModel<T>,
    split: &SplitData,
    threshold: f64,
) -> Result<Vec<LabeledInput<T>>> {
    let refs: Vec<SegmentRef> = split
        .segment_refs()
        .into_iter()
        .filter(|&r| split.get(r).1.class.is_some())
        .collect();
    let parts: Vec<Option<LabeledInput<T>>> = refs
        .par_iter()
        .map(|&r| -> Result<_> {
            let (song, seg) = split.get(r);
            Ok(cleaned_posteriorgram(acoustic, song.segment_features(seg), threshold)?.map(|input| LabeledInput {
                input,
                class: seg.class.expect("filtered"),
            }))
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

fn argmax_f64(v: &[f64]) -> usize {
    crate::ctc::argmax(v.iter().copied())
}

/// Segment-level validation metrics of a recurrent classifier: mean
/// weighted cross-entropy and balanced accuracy (in percent).
fn classifier_metrics<T: Scalar>(
    clf: &LanguageClassifier<T>,
    inputs: &[LabeledInput<T>],
    weights: &[f64],
) -> Result<(f64, f64)> {
    let outs: Vec<(f64, usize, usize)> = inputs
        .par_iter()
        .map(|li| -> Result<_> {
            let p = clf.forward(&li.input, &mut Mode::Eval)?.probs;
            let pv: Vec<f64> = p.iter().map(|v| v.as_f64()).collect();
            Ok((weighted_xent(p.view(), li.class, weights)?, li.class, argmax_f64(&pv)))
        })
        .collect::<Result<_>>()?;
    if outs.is_empty() {
        return Ok((f64::NAN, 0.0));
    }
    let pairs: Vec<(usize, Option<usize>)> = outs.iter().map(|o| (o.1, Some(o.2))).collect();
    let xent = outs.iter().map(|o| o.0).sum::<f64>() / outs.len() as f64;
    Ok((xent, ConfusionMatrix::from_pairs(clf.classes(), &pairs).balanced_accuracy()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSummary {
    pub best_epoch: usize,
    pub best_val_bacc: f64,
}

/// Train the language classifier on posteriorgrams of a frozen acoustic
/// model, keeping the checkpoint with the best validation balanced accuracy.
pub fn train_classifier<T: Scalar>(
    acoustic: &AcousticModel<T>,
    clf: &mut LanguageClassifier<T>,
    train: &SplitData,
    val: &SplitData,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<ClassifierSummary> {
    cfg.validate()?;
    let pool = cfg.pool()?;
    let weights = compute_class_weights(&class_counts(train, clf.classes()))?;
    let threshold = clf.config.clean_threshold;
    let (train_in, val_in) = pool.install(|| -> Result<_> {
        Ok((
            labeled_posteriorgrams(acoustic, train, threshold)?,
            labeled_posteriorgrams(acoustic, val, threshold)?,
        ))
    })?;
    if train_in.is_empty() {
        return Err(Error::NoVoicedFrames);
    }
    let idx: Vec<usize> = (0..train_in.len()).collect();
    let mut adam = Adam::for_model(cfg.adam(), clf);
    let mut stop = EarlyStop::new(cfg.patience, true);
    let started = Instant::now();
    for epoch in 0..cfg.max_epochs {
        let order = shuffled(&idx, cfg.seed, PHASE_CLASSIFIER, epoch);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<(f64, LanguageClassifier<T>)> = pool.install(|| {
                batch
                    .par_iter()
                    .enumerate()
                    .map(|(i, &k)| -> Result<_> {
                        let li = &train_in[k];
                        let mut rng = item_rng(cfg.seed, PHASE_CLASSIFIER, epoch, b * cfg.batch_size + i);
                        let out = clf.forward(&li.input, &mut Mode::Train(&mut rng))?;
                        let loss = weighted_xent(out.probs.view(), li.class, &weights)?;
                        let g = weighted_xent_grad(out.probs.view(), li.class, &weights)?;
                        Ok((loss, clf.backward(&out.cache, &g)?.1))
                    })
                    .collect::<Result<_>>()
            })?;
            let n = items.len();
            let batch_loss: f64 = items.iter().map(|k| k.0).sum();
            check_finite("training cross-entropy", epoch, batch_loss)?;
            let mut grads = sum_grads(items.into_iter().map(|k| k.1)).expect("non-empty batch");
            grads.scale(T::of(1.0 / n as f64));
            clip(&mut grads, cfg.clip_norm);
            adam.update(clf, &grads);
            loss_sum += batch_loss;
        }
        let (val_lid, val_bacc) = pool.install(|| classifier_metrics(clf, &val_in, &weights))?;
        let mut entry = EpochLog::new("classifier", epoch);
        entry.train_lid = Some(loss_sum / train_in.len() as f64);
        entry.val_lid = Some(val_lid);
        entry.val_bacc = Some(val_bacc);
        entry.wall_time = started.elapsed().as_secs_f64();
        log.push(entry);
        if stop.observe(val_bacc, val_lid, || (epoch, clf.clone())) {
            break;
        }
    }
    let (best_val_bacc, (best_epoch, best)) = stop.into_best().expect("at least one epoch");
    *clf = best;
    Ok(ClassifierSummary {
        best_epoch,
        best_val_bacc,
    })
}

/// Loss terms and summed gradients of one joint batch. All terms are means
/// over the batch items, so `joint = ctc_weight · ctc + lambda · lid`.
pub struct JointBatch<T: Scalar> {
    pub ctc: f64,
    pub lid: f64,
    pub joint: f64,
    pub acoustic_grads: AcousticModel<T>,
    pub classifier_grads: LanguageClassifier<T>,
}

/// One item of a joint batch.
pub struct JointItem<'a> {
    pub features: ArrayView2<'a, f32>,
    pub segment: &'a PreparedSegment,
    pub rng: ChaCha8Rng,
}

struct ItemOutcome<T: Scalar> {
    ctc: f64,
    lid: f64,
    acoustic: AcousticModel<T>,
    classifier: LanguageClassifier<T>,
}

/// Joint objective for one item. The cleaning mask is treated as a
/// constant: the classifier's input gradient is scattered back onto the
/// retained frames and pulled through the posteriorgram softmax.
fn joint_item<T: Scalar>(
    acoustic: &AcousticModel<T>,
    clf: &LanguageClassifier<T>,
    item: JointItem<'_>,
    ctc_weight: f64,
    lambda: f64,
    class_weights: &[f64],
) -> Result<ItemOutcome<T>> {
    let JointItem {
        features,
        segment,
        mut rng,
    } = item;
    let x = features_as::<T>(features);
    let out = acoustic.forward(x.view(), &mut Mode::Train(&mut rng))?;
    let mut grad_logits = Array2::<T>::zeros(out.logits.raw_dim());
    let mut ctc = 0.0;
    if ctc_weight > 0.0 {
        match ctc_loss_grad(out.logits.view(), &segment.target, Charset::BLANK_ID) {
            Ok((loss, g)) => {
                ctc = loss;
                grad_logits.zip_mut_with(&g, |d, &v| *d += T::of(ctc_weight * v));
            }
            Err(Error::Unalignable { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let mut lid = 0.0;
    let mut classifier = clf.zeros_like();
    if let Some(class) = segment.class {
        let (cleaned, kept) = clean_posteriorgram(out.posteriorgram.view(), clf.config.clean_threshold);
        if !kept.is_empty() {
            let c_out = clf.forward(&cleaned, &mut Mode::Train(&mut rng))?;
            lid = weighted_xent(c_out.probs.view(), class, class_weights)?;
            let g = weighted_xent_grad(c_out.probs.view(), class, class_weights)?;
            let (d_cleaned, mut g_clf) = clf.backward(&c_out.cache, &g)?;
            g_clf.scale(T::of(lambda));
            classifier = g_clf;
            let mut d_post = Array2::<T>::zeros(out.posteriorgram.raw_dim());
            for (row, &t) in kept.iter().enumerate() {
                d_post.row_mut(t).assign(&d_cleaned.row(row));
            }
            let d_logits = Softmax::vjp(&out.posteriorgram, &d_post);
            let lam = T::of(lambda);
            grad_logits.zip_mut_with(&d_logits, |d, &v| *d += lam * v);
        }
    }
    Ok(ItemOutcome {
        ctc,
        lid,
        acoustic: acoustic.backward(&out.cache, &grad_logits)?,
        classifier,
    })
}

/// Loss decomposition and mean gradients of the joint objective over a
/// batch. A `ctc_weight` of zero gives the end-to-end objective.
pub fn joint_batch<T: Scalar>(
    acoustic: &AcousticModel<T>,
    clf: &LanguageClassifier<T>,
    items: Vec<JointItem<'_>>,
    ctc_weight: f64,
    lambda: f64,
    class_weights: &[f64],
) -> Result<JointBatch<T>> {
    if items.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let n = items.len() as f64;
    let outcomes: Vec<ItemOutcome<T>> = items
        .into_par_iter()
        .map(|item| joint_item(acoustic, clf, item, ctc_weight, lambda, class_weights))
        .collect::<Result<_>>()?;
    let ctc = outcomes.iter().map(|o| o.ctc).sum::<f64>() / n;
    let lid = outcomes.iter().map(|o| o.lid).sum::<f64>() / n;
    let mut a_parts = Vec::with_capacity(outcomes.len());
    let mut c_parts = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        a_parts.push(o.acoustic);
        c_parts.push(o.classifier);
    }
    let mut acoustic_grads = sum_grads(a_parts).expect("non-empty");
    let mut classifier_grads = sum_grads(c_parts).expect("non-empty");
    acoustic_grads.scale(T::of(1.0 / n));
    classifier_grads.scale(T::of(1.0 / n));
    Ok(JointBatch {
        ctc,
        lid,
        joint: ctc_weight * ctc + lambda * lid,
        acoustic_grads,
        classifier_grads,
    })
}

/// Validation terms of the joint objective plus segment balanced accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointValidation {
    pub ctc: f64,
    pub lid: f64,
    pub joint: f64,
    pub bacc: f64,
}

pub fn validate_joint<T: Scalar>(
    acoustic: &AcousticModel<T>,
    clf: &LanguageClassifier<T>,
    val: &SplitData,
    ctc_weight: f64,
    lambda: f64,
    class_weights: &[f64],
) -> Result<JointValidation> {
    let refs = val.segment_refs();
    if refs.is_empty() {
        return Err(Error::Invalid("no validation segments".into()));
    }
    let outs: Vec<(f64, f64, Option<(usize, Option<usize>)>)> = refs
        .par_iter()
        .map(|&r| -> Result<_> {
            let (x, seg) = segment_input::<T>(val, r);
            let out = acoustic.forward(x.view(), &mut Mode::Eval)?;
            let ctc = if ctc_weight > 0.0 {
                match ctc_loss_logits(out.logits.view(), &seg.target, Charset::BLANK_ID) {
                    Ok(l) => l,
                    Err(Error::Unalignable { .. }) => 0.0,
                    Err(e) => return Err(e),
                }
            } else {
                0.0
            };
            let Some(class) = seg.class else {
                return Ok((ctc, 0.0, None));
            };
            let (cleaned, _) = clean_posteriorgram(out.posteriorgram.view(), clf.config.clean_threshold);
            if cleaned.nrows() == 0 {
                return Ok((ctc, 0.0, Some((class, None))));
            }
            let p = clf.forward(&cleaned, &mut Mode::Eval)?.probs;
            let pv: Vec<f64> = p.iter().map(|v| v.as_f64()).collect();
            Ok((ctc, weighted_xent(p.view(), class, class_weights)?, Some((class, Some(argmax_f64(&pv))))))
        })
        .collect::<Result<_>>()?;
    let n = outs.len() as f64;
    let ctc = outs.iter().map(|o| o.0).sum::<f64>() / n;
    let lid = outs.iter().map(|o| o.1).sum::<f64>() / n;
    let pairs: Vec<(usize, Option<usize>)> = outs.iter().filter_map(|o| o.2).collect();
    Ok(JointValidation {
        ctc,
        lid,
        joint: ctc_weight * ctc + lambda * lid,
        bacc: ConfusionMatrix::from_pairs(clf.classes(), &pairs).balanced_accuracy(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSummary {
    pub phases: Vec<PhaseSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub lambda: f64,
    pub best_epoch: usize,
    pub best_score: f64,
}

/// Joint (`with_ctc`) or end-to-end training through the λ schedule. Each
/// phase starts from the previous phase's best checkpoint with a fresh
/// optimizer.
pub fn train_joint<T: Scalar>(
    acoustic: &mut AcousticModel<T>,
    clf: &mut LanguageClassifier<T>,
    train: &SplitData,
    val: &SplitData,
    with_ctc: bool,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<JointSummary> {
    cfg.validate()?;
    let pool = cfg.pool()?;
    let weights = compute_class_weights(&class_counts(train, clf.classes()))?;
    let refs = train.segment_refs();
    if refs.is_empty() {
        return Err(Error::Invalid("no training segments".into()));
    }
    let ctc_weight = if with_ctc { 1.0 } else { 0.0 };
    let name = if with_ctc { "joint" } else { "e2e" };
    let mut summary = JointSummary { phases: Vec::new() };
    let started = Instant::now();
    for (phase, &lambda) in cfg.lambda_schedule.iter().enumerate() {
        let by_accuracy = phase > 0;
        let phase_tag = PHASE_JOINT + 16 * phase as u64;
        let mut adam_a = Adam::for_model(cfg.adam(), acoustic);
        let mut adam_c = Adam::for_model(cfg.adam(), clf);
        let mut stop = EarlyStop::new(cfg.patience, by_accuracy);
        for epoch in 0..cfg.max_epochs {
            let order = shuffled(&refs, cfg.seed, phase_tag, epoch);
            let (mut ctc_sum, mut lid_sum) = (0.0, 0.0);
            for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
                let items: Vec<JointItem<'_>> = batch
                    .iter()
                    .enumerate()
                    .map(|(i, &r)| {
                        let (song, seg) = train.get(r);
                        JointItem {
                            features: song.segment_features(seg),
                            segment: seg,
                            rng: item_rng(cfg.seed, phase_tag, epoch, b * cfg.batch_size + i),
                        }
                    })
                    .collect();
                let n = items.len() as f64;
                let mut jb = pool.install(|| joint_batch(acoustic, clf, items, ctc_weight, lambda, &weights))?;
                check_finite("joint training loss", epoch, jb.joint)?;
                if !jb.acoustic_grads.all_finite() || !jb.classifier_grads.all_finite() {
                    return Err(Error::Diverged(format!("non-finite joint gradient in epoch {epoch}")));
                }
                clip(&mut jb.acoustic_grads, cfg.clip_norm);
                clip(&mut jb.classifier_grads, cfg.clip_norm);
                adam_a.update(acoustic, &jb.acoustic_grads);
                adam_c.update(clf, &jb.classifier_grads);
                ctc_sum += jb.ctc * n;
                lid_sum += jb.lid * n;
            }
            let v = pool.install(|| validate_joint(acoustic, clf, val, ctc_weight, lambda, &weights))?;
            let total = refs.len() as f64;
            let mut entry = EpochLog::new(&format!("{name}{}", phase + 1), epoch);
            entry.lambda = Some(lambda);
            if with_ctc {
                entry.train_ctc = Some(ctc_sum / total);
                entry.val_ctc = Some(v.ctc);
            }
            entry.train_lid = Some(lid_sum / total);
            entry.train_joint = Some((ctc_weight * ctc_sum + lambda * lid_sum) / total);
            entry.val_lid = Some(v.lid);
            entry.val_joint = Some(v.joint);
            entry.val_bacc = Some(v.bacc);
            entry.wall_time = started.elapsed().as_secs_f64();
            log.push(entry);
            check_finite("validation joint loss", epoch, v.joint)?;
            let score = if by_accuracy { v.bacc } else { v.joint };
            if stop.observe(score, v.joint, || (epoch, acoustic.clone(), clf.clone())) {
                break;
            }
        }
        let (best_score, (best_epoch, a, c)) = stop.into_best().expect("at least one epoch");
        *acoustic = a;
        *clf = c;
        summary.phases.push(PhaseSummary {
            lambda,
            best_epoch,
            best_score,
        });
    }
    Ok(summary)
}

/// Song-level statistics vector: pooled over the retained frames of every
/// segment. `None` when no frame of the song survives cleaning.
pub fn song_statistics<T: Scalar>(parts: &[Array2<T>]) -> Result<Option<Vec<f64>>> {
    let views: Vec<ArrayView2<T>> = parts.iter().filter(|p| p.nrows() > 0).map(|p| p.view()).collect();
    if views.is_empty() {
        return Ok(None);
    }
    stats_pool(&views).map(Some)
}

/// Fit the linear song classifier on statistics of a frozen acoustic
/// model's posteriorgrams. Class weights use song counts.
pub fn train_statistics<T: Scalar>(
    acoustic: &AcousticModel<T>,
    train: &SplitData,
    classes: usize,
    clean_threshold: f64,
    cfg: &TrainConfig,
) -> Result<LinearClassifier> {
    cfg.validate()?;
    let pool = cfg.pool()?;
    let vectors: Vec<Option<(Vec<f64>, usize)>> = pool.install(|| {
        train
            .songs
            .par_iter()
            .map(|song| -> Result<_> {
                let parts = song
                    .segments
                    .iter()
                    .map(|seg| {
                        Ok(cleaned_posteriorgram(acoustic, song.segment_features(seg), clean_threshold)?
                            .unwrap_or_else(|| Array2::zeros((0, acoustic.vocab()))))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(song_statistics(&parts)?.map(|v| (v, song.class)))
            })
            .collect::<Result<_>>()
    })?;
    let (xs, ys): (Vec<Vec<f64>>, Vec<usize>) = vectors.into_iter().flatten().unzip();
    let mut counts = vec![0; classes];
    ys.iter().for_each(|&y| counts[y] += 1);
    let weights = compute_class_weights(&counts)?;
    LinearClassifier::train(&xs, &ys, classes, &weights, &cfg.linear)
}

/// Mean of equally shaped score vectors.
pub fn mean_scores(scores: &[Array1<f64>]) -> Option<Array1<f64>> {
    let first = scores.first()?;
    let mut acc = Array1::<f64>::zeros(first.len());
    for s in scores {
        acc += s;
    }
    Some(acc / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_weights_formula() {
        let w = compute_class_weights(&[10, 30]).unwrap();
        assert_eq!(w, vec![2.0, 40.0 / 60.0]);
        let weighted: f64 = w.iter().zip([10.0, 30.0]).map(|(a, b)| a * b).sum();
        assert!((weighted - 40.0).abs() < 1e-12);
        assert!(compute_class_weights(&[3, 0]).is_err());
    }

    #[test]
    fn early_stop_patience_and_best() {
        let mut s = EarlyStop::new(2, false);
        assert!(!s.observe(3.0, 0.0, || 0));
        assert!(!s.observe(2.0, 0.0, || 1));
        assert!(!s.observe(2.0, 0.0, || 2));
        assert!(s.observe(2.5, 0.0, || 3));
        assert_eq!(s.into_best(), Some((2.0, 1)));
        let mut acc = EarlyStop::new(2, true);
        assert!(!acc.observe(50.0, 1.0, || 0));
        assert!(!acc.observe(50.0, 0.5, || 1));
        assert!(!acc.observe(50.0, 0.7, || 2));
        assert!(acc.observe(40.0, 0.1, || 3));
        assert_eq!(acc.into_best(), Some((50.0, 1)));
    }

    #[test]
    fn item_rngs_differ_and_repeat() {
        use rand::Rng;
        let a: u64 = item_rng(1, 2, 3, 4).random();
        let b: u64 = item_rng(1, 2, 3, 5).random();
        let c: u64 = item_rng(1, 2, 4, 4).random();
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, item_rng(1, 2, 3, 4).random::<u64>());
    }

    #[test]
    fn modes_parse() {
        assert_eq!("2step".parse::<TrainMode>().unwrap(), TrainMode::TwoStep);
        assert_eq!("e2e".parse::<TrainMode>().unwrap(), TrainMode::E2e);
        assert!("x".parse::<TrainMode>().is_err());
    }

    #[test]
    fn log_line_is_key_value() {
        let mut e = EpochLog::new("joint1", 2);
        e.lambda = Some(0.1);
        e.val_bacc = Some(50.0);
        e.wall_time = 1.5;
        assert_eq!(e.line(), "phase=joint1 epoch=2 lambda=0.100000 val_bacc=50.000000 wall_time=1.500");
    }
}
