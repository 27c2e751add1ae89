//! Evaluation protocols: out-of-domain training, in-domain leave-one-speaker-out
//! training, few-shot fine-tuning with and without the distance-ratio loss,
//! log-sum reference classification, UAR scoring and the sweep harness.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{loso_folds, sample_pairs, Dataset, Emotion, Normalizer, PairScope, Sample, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, FreezeMask};
use crate::siamese::{train_pair_batch, Architecture, PairOptimizer, SiameseParams, StepConfig};

// ── Scoring ────────────────────────────────────────────────────────────────

/// Unweighted average recall: mean over the classes present in `labels` of
/// the fraction of that class predicted correctly.
pub fn uar<T: Ord + Copy + fmt::Debug>(predictions: &[T], labels: &[T]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("no labels to score".into()));
    }
    let mut per_class: BTreeMap<T, (usize, usize)> = BTreeMap::new();
    for (p, l) in predictions.iter().zip(labels) {
        let cell = per_class.entry(*l).or_default();
        cell.1 += 1;
        if p == l {
            cell.0 += 1;
        }
    }
    for p in predictions {
        if !per_class.contains_key(p) {
            log::warn!("predicted class {p:?} never occurs in the labels; excluded from UAR");
        }
    }
    let recall_sum: f64 = per_class
        .values()
        .map(|&(hit, total)| hit as f64 / total as f64)
        .sum();
    Ok(recall_sum / per_class.len() as f64)
}

// ── Model and reference classification ─────────────────────────────────────

/// Trained twin network together with the feature normalizer it expects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiameseModel {
    pub params: SiameseParams,
    pub normalizer: Normalizer,
}

impl SiameseModel {
    /// Structural check for models loaded from disk.
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let dim = self.params.input_dim();
        if dim != FEATURE_DIM || self.normalizer.mean.len() != dim || self.normalizer.std.len() != dim {
            return Err(Error::Shape(format!(
                "model expects {dim} inputs with a {}/{}-entry normalizer; features have {FEATURE_DIM}",
                self.normalizer.mean.len(),
                self.normalizer.std.len()
            )));
        }
        if self.normalizer.std.iter().any(|s| !(*s > 0.0 && s.is_finite()))
            || self.normalizer.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::InvalidInput("normalizer statistics must be finite with positive std".into()));
        }
        Ok(())
    }

    /// Normalizes raw features and runs the extractor.
    pub fn embed(&self, raw: &[f64]) -> Result<Vec<f64>> {
        self.params.extract(&self.normalizer.transform(raw))
    }

    pub fn embed_all(&self, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
        samples.iter().map(|s| self.embed(&s.features)).collect()
    }

    pub fn similarity(&self, raw: &[f64], raw_other: &[f64]) -> Result<f64> {
        let e = self.embed(raw)?;
        let e_other = self.embed(raw_other)?;
        self.params.similarity_from_embeddings(&e, &e_other)
    }
}

/// Index of the first maximum in fixed class order.
pub fn argmax_class(scores: &[f64; 4]) -> Emotion {
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    Emotion::ALL[best]
}

/// Labeled reference embeddings for log-sum classification.
#[derive(Clone, Debug)]
pub struct ReferenceSet {
    by_class: [Vec<Vec<f64>>; 4],
}

impl ReferenceSet {
    pub fn new(model: &SiameseModel, references: &[Sample]) -> Result<Self> {
        let mut by_class: [Vec<Vec<f64>>; 4] = Default::default();
        for r in references {
            by_class[r.emotion.index()].push(model.embed(&r.features)?);
        }
        if let Some(missing) = Emotion::ALL.iter().find(|e| by_class[e.index()].is_empty()) {
            return Err(Error::InvalidReference(format!(
                "no reference sample for class {missing}"
            )));
        }
        Ok(Self { by_class })
    }

    /// Per-class sum of log similarities.
    pub fn scores(&self, params: &SiameseParams, embedding: &[f64]) -> Result<[f64; 4]> {
        let mut scores = [0.0; 4];
        for (score, refs) in scores.iter_mut().zip(&self.by_class) {
            for r in refs {
                *score += params.similarity_from_embeddings(embedding, r)?.ln();
            }
        }
        Ok(scores)
    }

    pub fn classify_embedding(&self, params: &SiameseParams, embedding: &[f64]) -> Result<Emotion> {
        Ok(argmax_class(&self.scores(params, embedding)?))
    }
}

/// Log-sum classification of one raw feature vector against labeled raw
/// references.
pub fn classify(model: &SiameseModel, references: &[Sample], x: &[f64]) -> Result<Emotion> {
    let refs = ReferenceSet::new(model, references)?;
    refs.classify_embedding(&model.params, &model.embed(x)?)
}

/// UAR of `model` on `test`, classifying against `references`.
pub fn evaluate(model: &SiameseModel, references: &[Sample], test: &[Sample]) -> Result<f64> {
    let refs = ReferenceSet::new(model, references)?;
    let mut predictions = Vec::with_capacity(test.len());
    for s in test {
        predictions.push(refs.classify_embedding(&model.params, &model.embed(&s.features)?)?);
    }
    let labels: Vec<Emotion> = test.iter().map(|s| s.emotion).collect();
    uar(&predictions, &labels)
}

// ── Training ───────────────────────────────────────────────────────────────

/// Pair-training schedule. One epoch is `batches_per_epoch` freshly sampled,
/// class-balanced batches of `batch_pairs` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_pairs: usize,
    pub learning_rate: f64,
    /// Stop after this many epochs without the epoch-mean BCE improving by
    /// more than `min_delta`.
    pub patience: Option<usize>,
    pub min_delta: f64,
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        Self {
            epochs: 40,
            batches_per_epoch: 16,
            batch_pairs: 64,
            learning_rate: 1e-3,
            patience: None,
            min_delta: 1e-4,
        }
    }

    pub fn finetune_default() -> Self {
        Self {
            epochs: 50,
            batches_per_epoch: 1,
            batch_pairs: 32,
            learning_rate: 1e-3,
            patience: Some(10),
            min_delta: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batches_per_epoch == 0 || self.batch_pairs < 2 || !self.batch_pairs.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "batches_per_epoch must be positive and batch_pairs even and ≥ 2 (got {} and {})",
                self.batches_per_epoch, self.batch_pairs
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain_default()
    }
}

/// Everything besides the protocol sweep that shapes a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub architecture: Architecture,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Learning rate of the distance-loss update; the fine-tuning rate when
    /// unset.
    pub distance_learning_rate: Option<f64>,
    pub pair_scope: PairScope,
    /// Caps source references per class for out-of-domain and in-domain
    /// classification (a seeded subset). All references when unset.
    pub reference_cap_per_class: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::default(),
            pretrain: TrainConfig::pretrain_default(),
            finetune: TrainConfig::finetune_default(),
            distance_learning_rate: None,
            pair_scope: PairScope::Both,
            reference_cap_per_class: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub distance_steps: usize,
    pub distance_skips: usize,
}

/// Runs pair training on `dataset` (already normalized) in place.
pub fn train_pairs<R: Rng + ?Sized>(
    params: &mut SiameseParams,
    dataset: &Dataset,
    schedule: &TrainConfig,
    step: &StepConfig,
    distance_learning_rate: Option<f64>,
    scope: PairScope,
    rng: &mut R,
) -> Result<TrainReport> {
    schedule.validate()?;
    let inputs = dataset.features();
    let adam = AdamConfig::default().with_learning_rate(schedule.learning_rate);
    let mut optimizer = PairOptimizer::new(params, adam, distance_learning_rate);
    let mut report = TrainReport::default();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for _ in 0..schedule.epochs {
        let mut epoch_bce = 0.0;
        for _ in 0..schedule.batches_per_epoch {
            let batch = sample_pairs(dataset, schedule.batch_pairs, scope, rng)?;
            let m = train_pair_batch(params, &mut optimizer, &inputs, &batch, step)?;
            epoch_bce += m.bce;
            if m.distance_skipped {
                report.distance_skips += 1;
            } else if m.distance_loss.is_some() {
                report.distance_steps += 1;
            }
        }
        report.epochs_run += 1;
        epoch_bce /= schedule.batches_per_epoch as f64;
        if let Some(patience) = schedule.patience {
            if epoch_bce < best - schedule.min_delta {
                best = epoch_bce;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    Ok(report)
}

fn require_classes(ds: &Dataset, what: &str) -> Result<()> {
    if !ds.has_all_classes() {
        return Err(Error::InvalidInput(format!("{what} lacks at least one emotion class")));
    }
    Ok(())
}

/// Pretrains on all source data with the BCE pair loss only. The normalizer
/// is fit on the source.
pub fn train_oodt(source: &Dataset, config: &TrainingConfig, seed: u64) -> Result<SiameseModel> {
    require_classes(source, "source data")?;
    if source.speaker_index().len() < 2 {
        return Err(Error::InvalidInput("source data needs at least 2 speakers".into()));
    }
    train_model(source, config, seed)
}

fn train_model(train: &Dataset, config: &TrainingConfig, seed: u64) -> Result<SiameseModel> {
    let normalizer = Normalizer::fit(train)?;
    let normalized = normalizer.apply(train);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = SiameseParams::init_with_rng(&config.architecture, &mut rng)?;
    train_pairs(
        &mut params,
        &normalized,
        &config.pretrain,
        &StepConfig::default(),
        None,
        config.pair_scope,
        &mut rng,
    )?;
    Ok(SiameseModel { params, normalizer })
}

/// Seeded subset of at most `cap` samples per class, in original order.
pub fn capped_references(dataset: &Dataset, cap: Option<usize>, seed: u64) -> Vec<Sample> {
    let Some(cap) = cap else {
        return dataset.samples().to_vec();
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = Vec::new();
    for idx in dataset.class_index().values() {
        let mut chosen: Vec<usize> = idx.choose_multiple(&mut rng, cap.min(idx.len())).copied().collect();
        keep.append(&mut chosen);
    }
    keep.sort_unstable();
    keep.into_iter().map(|i| dataset.sample(i).clone()).collect()
}

/// One per-fold result of leave-one-speaker-out in-domain training.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub test_speaker: String,
    pub uar: f64,
    pub seed: u64,
}

fn idt_fold(target: &Dataset, fold: &crate::data::Fold, config: &TrainingConfig, seed: u64) -> Result<f64> {
    let train = target.subset(&fold.train);
    let test = target.subset(&fold.test);
    require_classes(&train, "fold training data")?;
    let model = train_model(&train, config, seed)?;
    let refs = capped_references(&train, config.reference_cap_per_class, seed ^ 0x5EED);
    evaluate(&model, &refs, test.samples())
}

/// In-domain leave-one-speaker-out training on the target. Each fold trains
/// a fresh model (normalizer fit on the fold's training side) and classifies
/// the held-out speaker against the fold's training samples.
pub fn run_idt(target: &Dataset, config: &TrainingConfig, master_seed: u64) -> Result<Vec<FoldResult>> {
    let folds = loso_folds(target)?;
    folds
        .par_iter()
        .enumerate()
        .map(|(i, fold)| {
            let seed = derive_seed(master_seed, &[TAG_IDT, i as u64]);
            Ok(FoldResult {
                test_speaker: fold.test_speaker.clone(),
                uar: idt_fold(target, fold, config, seed)?,
                seed,
            })
        })
        .collect()
}

pub fn mean_uar(folds: &[FoldResult]) -> f64 {
    folds.iter().map(|f| f.uar).sum::<f64>() / folds.len() as f64
}

// ── Few-shot adaptation ────────────────────────────────────────────────────

/// Labeled target samples used for fine-tuning and as references, plus the
/// complementary test indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdoptedSet {
    pub adopted: Vec<usize>,
    pub test: Vec<usize>,
    pub speakers: Vec<String>,
    pub per_emotion_per_speaker: usize,
}

/// Draws `k` speakers uniformly without replacement among those with at least
/// `per_emotion` samples of every emotion, then `per_emotion` samples per
/// emotion per chosen speaker.
pub fn select_adopted<R: Rng + ?Sized>(
    target: &Dataset,
    k: usize,
    per_emotion: usize,
    rng: &mut R,
) -> Result<AdoptedSet> {
    if k == 0 || per_emotion == 0 {
        return Err(Error::InvalidInput(
            "adopted speaker count and samples per emotion must be positive".into(),
        ));
    }
    let mut by_cell: BTreeMap<(&str, Emotion), Vec<usize>> = BTreeMap::new();
    for (i, s) in target.samples().iter().enumerate() {
        by_cell.entry((s.speaker_id.as_str(), s.emotion)).or_default().push(i);
    }
    let eligible: Vec<&str> = target
        .speakers()
        .into_iter()
        .filter(|spk| {
            Emotion::ALL
                .iter()
                .all(|e| by_cell.get(&(*spk, *e)).is_some_and(|v| v.len() >= per_emotion))
        })
        .collect();
    if eligible.len() < k {
        return Err(Error::InvalidInput(format!(
            "{k} adopted speakers requested but only {} have {per_emotion} sample(s) of every emotion",
            eligible.len()
        )));
    }
    let mut speakers: Vec<&str> = eligible.choose_multiple(rng, k).copied().collect();
    speakers.sort_unstable();
    let mut adopted = Vec::with_capacity(k * per_emotion * Emotion::ALL.len());
    for spk in &speakers {
        for e in Emotion::ALL {
            let cell = &by_cell[&(*spk, e)];
            adopted.extend(cell.choose_multiple(rng, per_emotion).copied());
        }
    }
    adopted.sort_unstable();
    let test = (0..target.len()).filter(|i| adopted.binary_search(i).is_err()).collect();
    Ok(AdoptedSet {
        adopted,
        test,
        speakers: speakers.into_iter().map(str::to_string).collect(),
        per_emotion_per_speaker: per_emotion,
    })
}

/// Fine-tunes a copy of `pretrained` on the adopted target samples. The
/// pretrained normalizer is kept as is. The first `frozen_layers` extractor
/// layers are never updated; the distance-loss step runs after every BCE
/// step when `use_distance_loss` is set.
pub fn fine_tune(
    pretrained: &SiameseModel,
    adopted: &Dataset,
    frozen_layers: usize,
    use_distance_loss: bool,
    config: &TrainingConfig,
    seed: u64,
) -> Result<(SiameseModel, TrainReport)> {
    let depth = pretrained.params.extractor_depth();
    if frozen_layers >= depth {
        return Err(Error::InvalidConfig(format!(
            "at most {} of {depth} extractor layers may be frozen, got {frozen_layers}",
            depth - 1
        )));
    }
    if adopted.is_empty() {
        return Err(Error::InvalidInput("adopted set is empty".into()));
    }
    require_classes(adopted, "adopted set")?;
    let normalized = pretrained.normalizer.apply(adopted);
    let mut model = pretrained.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = StepConfig {
        use_distance_loss,
        freeze: FreezeMask::first(frozen_layers),
    };
    let report = train_pairs(
        &mut model.params,
        &normalized,
        &config.finetune,
        &step,
        config.distance_learning_rate,
        config.pair_scope,
        &mut rng,
    )?;
    Ok((model, report))
}

// ── Sweep harness ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "oodt")]
    Oodt,
    #[serde(rename = "idt")]
    Idt,
    #[serde(rename = "finetune")]
    FineTune,
    #[serde(rename = "finetune_distance_loss")]
    FineTuneDistanceLoss,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [
        Protocol::Oodt,
        Protocol::Idt,
        Protocol::FineTune,
        Protocol::FineTuneDistanceLoss,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Oodt => "oodt",
            Protocol::Idt => "idt",
            Protocol::FineTune => "finetune",
            Protocol::FineTuneDistanceLoss => "finetune_distance_loss",
        }
    }

    /// Loss-mode label used in result tables.
    pub fn loss_mode(self) -> &'static str {
        match self {
            Protocol::FineTuneDistanceLoss => "bce+distance",
            _ => "bce",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                format!("unknown protocol {s:?} (allowed: oodt, idt, finetune, finetune_distance_loss)")
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub protocols: Vec<Protocol>,
    pub source_tag: String,
    pub target_tag: String,
    pub frozen_layers: Vec<usize>,
    pub adopted_speaker_counts: Vec<usize>,
    pub per_emotion_per_speaker: usize,
    pub repetitions: usize,
    pub master_seed: u64,
    pub training: TrainingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            protocols: vec![Protocol::Oodt, Protocol::FineTune, Protocol::FineTuneDistanceLoss],
            source_tag: "source".into(),
            target_tag: "target".into(),
            frozen_layers: vec![0, 1, 2],
            adopted_speaker_counts: (1..=10).map(|k| 2 * k).collect(),
            per_emotion_per_speaker: 1,
            repetitions: 10,
            master_seed: 0,
            training: TrainingConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::InvalidConfig("repetitions must be at least 1".into()));
        }
        if self.protocols.is_empty() {
            return Err(Error::InvalidConfig("no protocol selected".into()));
        }
        if self.per_emotion_per_speaker == 0 {
            return Err(Error::InvalidConfig("per_emotion_per_speaker must be positive".into()));
        }
        self.training.architecture.validate()?;
        self.training.pretrain.validate()?;
        self.training.finetune.validate()?;
        let max_frozen = self.training.architecture.extractor_dims.len() - 1;
        if let Some(f) = self.frozen_layers.iter().find(|&&f| f > max_frozen) {
            return Err(Error::InvalidConfig(format!(
                "frozen_layers {f} exceeds the maximum of {max_frozen}"
            )));
        }
        let adapts = self.protocols.iter().any(|p| *p != Protocol::Idt);
        if adapts && self.adopted_speaker_counts.is_empty() {
            return Err(Error::InvalidConfig("adopted_speaker_counts is empty".into()));
        }
        if self.adopted_speaker_counts.contains(&0) {
            return Err(Error::InvalidConfig("adopted speaker counts must be positive".into()));
        }
        let fine_tunes = self
            .protocols
            .iter()
            .any(|p| matches!(p, Protocol::FineTune | Protocol::FineTuneDistanceLoss));
        if fine_tunes && self.frozen_layers.is_empty() {
            return Err(Error::InvalidConfig("frozen_layers is empty".into()));
        }
        // Fine-tuning pairs need two adopted samples of one emotion.
        if let Some(k) = self
            .adopted_speaker_counts
            .iter()
            .find(|&&k| fine_tunes && k * self.per_emotion_per_speaker < 2)
        {
            return Err(Error::InvalidConfig(format!(
                "{k} adopted speaker(s) with {} sample(s) per emotion cannot form same-emotion pairs",
                self.per_emotion_per_speaker
            )));
        }
        Ok(())
    }
}

/// One trial of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub protocol: Protocol,
    pub source: String,
    pub target: String,
    pub frozen_layers: Option<usize>,
    pub adopted_speakers: Option<usize>,
    /// Repetition index, or the fold index for in-domain rows.
    pub repetition: usize,
    /// Held-out speaker for in-domain rows.
    pub test_speaker: Option<String>,
    pub seed: u64,
    pub uar: Option<f64>,
    pub distance_loss_steps: usize,
    pub distance_loss_skips: usize,
    pub error: Option<String>,
    /// Not part of serialized result tables (it would break byte stability).
    #[serde(skip)]
    pub wall_time_ms: f64,
}

impl TrialRow {
    fn sort_key(&self) -> (Protocol, Option<usize>, Option<usize>, usize) {
        (self.protocol, self.frozen_layers, self.adopted_speakers, self.repetition)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub protocol: Protocol,
    pub loss_mode: String,
    pub frozen_layers: Option<usize>,
    pub adopted_speakers: Option<usize>,
    pub trials: usize,
    pub failed: usize,
    pub mean_uar: f64,
    /// Sample standard deviation; 0 for a single trial.
    pub std_uar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub trials: Vec<TrialRow>,
    pub aggregates: Vec<AggregateRow>,
}

impl ExperimentResult {
    pub fn from_trials(mut trials: Vec<TrialRow>) -> Self {
        trials.sort_by_key(|a| a.sort_key());
        let aggregates = aggregate(&trials);
        Self { trials, aggregates }
    }

    pub fn aggregate_for(
        &self,
        protocol: Protocol,
        frozen_layers: Option<usize>,
        adopted_speakers: Option<usize>,
    ) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|a| {
            a.protocol == protocol
                && a.frozen_layers == frozen_layers
                && a.adopted_speakers == adopted_speakers
        })
    }
}

/// Mean and standard deviation of UAR per (protocol, frozen, adopted) cell,
/// accumulating in row order. Failed trials are counted but excluded.
pub fn aggregate(trials: &[TrialRow]) -> Vec<AggregateRow> {
    type Cell = (Protocol, Option<usize>, Option<usize>);
    let mut cells: BTreeMap<Cell, (Vec<f64>, usize)> = BTreeMap::new();
    for t in trials {
        let cell = cells
            .entry((t.protocol, t.frozen_layers, t.adopted_speakers))
            .or_default();
        match t.uar {
            Some(u) => cell.0.push(u),
            None => cell.1 += 1,
        }
    }
    cells
        .into_iter()
        .map(|((protocol, frozen_layers, adopted_speakers), (values, failed))| {
            let n = values.len();
            let mean = if n == 0 { f64::NAN } else { values.iter().sum::<f64>() / n as f64 };
            let std = if n < 2 {
                0.0
            } else {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            };
            AggregateRow {
                protocol,
                loss_mode: protocol.loss_mode().to_string(),
                frozen_layers,
                adopted_speakers,
                trials: n + failed,
                failed,
                mean_uar: mean,
                std_uar: std,
            }
        })
        .collect()
}

const TAG_PRETRAIN: u64 = 1;
const TAG_SPLIT: u64 = 2;
const TAG_FINETUNE: u64 = 3;
const TAG_IDT: u64 = 4;
const TAG_REFS: u64 = 5;

/// SplitMix64 mix of a master seed and a path of integers.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}

#[derive(Clone, Copy, Debug)]
enum TrialSpec {
    Oodt { k: usize, rep: usize },
    FineTune { k: usize, rep: usize, frozen: usize, distance: bool },
    Idt { fold: usize },
}

/// Runs the full factorial sweep described by `config` on raw `source` and
/// `target` data. Trials run on the current rayon pool; results are sorted
/// canonically, so they do not depend on scheduling.
pub fn run_experiment(config: &ExperimentConfig, source: &Dataset, target: &Dataset) -> Result<ExperimentResult> {
    run_sweep(config, Some(source), target, None)
}

/// Seed used to pretrain the out-of-domain model of a sweep.
pub fn pretrain_seed(master_seed: u64) -> u64 {
    derive_seed(master_seed, &[TAG_PRETRAIN])
}

/// Out-of-domain evaluation on the whole target, as a single-row result.
/// Pretrains on `source` unless `pretrained` is given; `source` always
/// supplies the references.
pub fn run_oodt(
    config: &ExperimentConfig,
    source: &Dataset,
    target: &Dataset,
    pretrained: Option<&SiameseModel>,
) -> Result<ExperimentResult> {
    config.training.architecture.validate()?;
    config.training.pretrain.validate()?;
    let started = Instant::now();
    let seed = pretrain_seed(config.master_seed);
    let trained;
    let model = match pretrained {
        Some(m) => m,
        None => {
            trained = train_oodt(source, &config.training, seed)?;
            &trained
        }
    };
    let references = capped_references(
        source,
        config.training.reference_cap_per_class,
        derive_seed(config.master_seed, &[TAG_REFS]),
    );
    let uar = evaluate(model, &references, target.samples())?;
    Ok(ExperimentResult::from_trials(vec![TrialRow {
        protocol: Protocol::Oodt,
        source: config.source_tag.clone(),
        target: config.target_tag.clone(),
        frozen_layers: None,
        adopted_speakers: None,
        repetition: 0,
        test_speaker: None,
        seed,
        uar: Some(uar),
        distance_loss_steps: 0,
        distance_loss_skips: 0,
        error: None,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    }]))
}

/// Like [`run_experiment`], but reuses `pretrained` instead of training on
/// the source when given. The source is only required for pretraining and
/// for out-of-domain references.
pub fn run_sweep(
    config: &ExperimentConfig,
    source: Option<&Dataset>,
    target: &Dataset,
    pretrained: Option<&SiameseModel>,
) -> Result<ExperimentResult> {
    config.validate()?;
    let wants = |p: Protocol| config.protocols.contains(&p);
    let needs_pretrain = config.protocols.iter().any(|p| *p != Protocol::Idt);
    let missing_source = || Error::InvalidConfig("this protocol needs source data".into());

    if needs_pretrain {
        let max_k = *config.adopted_speaker_counts.iter().max().expect("validated non-empty");
        let speakers = target.speaker_index().len();
        if max_k > speakers {
            return Err(Error::InvalidConfig(format!(
                "{max_k} adopted speakers requested but the target has {speakers}"
            )));
        }
    }
    let pretrained: Option<SiameseModel> = match (needs_pretrain, pretrained) {
        (false, _) => None,
        (true, Some(model)) => Some(model.clone()),
        (true, None) => Some(train_oodt(
            source.ok_or_else(missing_source)?,
            &config.training,
            pretrain_seed(config.master_seed),
        )?),
    };
    let source_refs = if wants(Protocol::Oodt) {
        capped_references(
            source.ok_or_else(missing_source)?,
            config.training.reference_cap_per_class,
            derive_seed(config.master_seed, &[TAG_REFS]),
        )
    } else {
        Vec::new()
    };
    let folds = if wants(Protocol::Idt) { loso_folds(target)? } else { Vec::new() };

    let mut specs = Vec::new();
    for &k in &config.adopted_speaker_counts {
        for rep in 0..config.repetitions {
            if wants(Protocol::Oodt) {
                specs.push(TrialSpec::Oodt { k, rep });
            }
            for &frozen in &config.frozen_layers {
                if wants(Protocol::FineTune) {
                    specs.push(TrialSpec::FineTune { k, rep, frozen, distance: false });
                }
                if wants(Protocol::FineTuneDistanceLoss) {
                    specs.push(TrialSpec::FineTune { k, rep, frozen, distance: true });
                }
            }
        }
    }
    specs.extend((0..folds.len()).map(|fold| TrialSpec::Idt { fold }));

    let split_for = |k: usize, rep: usize| -> (u64, Result<AdoptedSet>) {
        let seed = derive_seed(config.master_seed, &[TAG_SPLIT, k as u64, rep as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (seed, select_adopted(target, k, config.per_emotion_per_speaker, &mut rng))
    };

    let run = |spec: &TrialSpec| -> TrialRow {
        let started = Instant::now();
        let mut row = TrialRow {
            protocol: Protocol::Oodt,
            source: config.source_tag.clone(),
            target: config.target_tag.clone(),
            frozen_layers: None,
            adopted_speakers: None,
            repetition: 0,
            test_speaker: None,
            seed: 0,
            uar: None,
            distance_loss_steps: 0,
            distance_loss_skips: 0,
            error: None,
            wall_time_ms: 0.0,
        };
        let outcome: Result<f64> = match *spec {
            TrialSpec::Oodt { k, rep } => {
                row.adopted_speakers = Some(k);
                row.repetition = rep;
                let (seed, split) = split_for(k, rep);
                row.seed = seed;
                split.and_then(|split| {
                    let model = pretrained.as_ref().expect("pretrained");
                    let test = target.subset(&split.test);
                    evaluate(model, &source_refs, test.samples())
                })
            }
            TrialSpec::FineTune { k, rep, frozen, distance } => {
                row.protocol = if distance { Protocol::FineTuneDistanceLoss } else { Protocol::FineTune };
                row.adopted_speakers = Some(k);
                row.frozen_layers = Some(frozen);
                row.repetition = rep;
                // Both loss modes share the split and the training seed so the
                // distance step is the only difference between them.
                let (split_seed, split) = split_for(k, rep);
                let seed = derive_seed(split_seed, &[TAG_FINETUNE, frozen as u64]);
                row.seed = seed;
                split.and_then(|split| {
                    let model = pretrained.as_ref().expect("pretrained");
                    let adopted = target.subset(&split.adopted);
                    let (tuned, report) =
                        fine_tune(model, &adopted, frozen, distance, &config.training, seed)?;
                    row.distance_loss_steps = report.distance_steps;
                    row.distance_loss_skips = report.distance_skips;
                    let test = target.subset(&split.test);
                    evaluate(&tuned, adopted.samples(), test.samples())
                })
            }
            TrialSpec::Idt { fold } => {
                row.protocol = Protocol::Idt;
                row.repetition = fold;
                let f = &folds[fold];
                row.test_speaker = Some(f.test_speaker.clone());
                let seed = derive_seed(config.master_seed, &[TAG_IDT, fold as u64]);
                row.seed = seed;
                idt_fold(target, f, &config.training, seed)
            }
        };
        match outcome {
            Ok(u) => row.uar = Some(u),
            Err(e) => {
                log::error!("trial {spec:?} failed: {e}");
                row.error = Some(e.to_string());
            }
        }
        row.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
        row
    };

    let trials: Vec<TrialRow> = specs.par_iter().map(run).collect();
    Ok(ExperimentResult::from_trials(trials))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    #[test]
    fn uar_closed_forms() {
        let labels = [0, 0, 1, 1];
        assert_eq!(uar(&labels, &labels).unwrap(), 1.0);
        let mut labels = vec![0; 10];
        labels.extend(vec![1; 10]);
        let mut preds = vec![0; 10];
        preds.extend(vec![1, 1, 1, 1, 1, 0, 0, 0, 0, 0]);
        assert!((uar(&preds, &labels).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn uar_errors() {
        assert!(matches!(uar::<u8>(&[], &[]), Err(Error::InvalidInput(_))));
        assert!(matches!(uar(&[1], &[1, 2]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn uar_ignores_classes_absent_from_labels() {
        // class 2 is only ever predicted
        let v = uar(&[0, 2, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert!((v - 0.75).abs() < 1e-15);
    }

    #[test]
    fn argmax_tie_uses_fixed_order() {
        assert_eq!(argmax_class(&[-1.0, -1.0, -1.0, -1.0]), Emotion::Anger);
        assert_eq!(argmax_class(&[-2.0, -1.0, -1.0, -3.0]), Emotion::Happiness);
    }

    #[test]
    fn adopted_selection_sizes_and_partition() {
        let target = synth_generate(&SynthConfig {
            speaker_count: 6,
            samples_per_speaker_per_class: 3,
            ..Default::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = select_adopted(&target, 2, 1, &mut rng).unwrap();
        assert_eq!(a.adopted.len(), 8);
        let a5 = select_adopted(&target, 5, 1, &mut rng).unwrap();
        assert_eq!(a5.adopted.len(), 20);
        for e in Emotion::ALL {
            assert_eq!(a5.adopted.iter().filter(|&&i| target.sample(i).emotion == e).count(), 5);
        }
        let mut all: Vec<usize> = a5.adopted.iter().chain(&a5.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..target.len()).collect::<Vec<_>>());
        assert!(select_adopted(&target, 7, 1, &mut rng).is_err());
        assert!(select_adopted(&target, 2, 4, &mut rng).is_err());
    }

    #[test]
    fn adoption_skips_incomplete_speakers() {
        let target = synth_generate(&SynthConfig {
            speaker_count: 3,
            samples_per_speaker_per_class: 1,
            ..Default::default()
        })
        .unwrap();
        // drop spk00's fear sample
        let keep: Vec<usize> = (0..target.len())
            .filter(|&i| !(target.sample(i).speaker_id == "spk00" && target.sample(i).emotion == Emotion::Fear))
            .collect();
        let partial = target.subset(&keep);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = select_adopted(&partial, 2, 1, &mut rng).unwrap();
        assert_eq!(a.speakers, vec!["spk01".to_string(), "spk02".to_string()]);
        assert!(select_adopted(&partial, 3, 1, &mut rng).is_err());
    }

    #[test]
    fn classify_requires_every_class() {
        let ds = synth_generate(&SynthConfig {
            speaker_count: 2,
            samples_per_speaker_per_class: 1,
            ..Default::default()
        })
        .unwrap();
        let model = SiameseModel {
            params: SiameseParams::init(&Architecture::default(), 0).unwrap(),
            normalizer: Normalizer::fit(&ds).unwrap(),
        };
        let no_fear: Vec<Sample> = ds.samples().iter().filter(|s| s.emotion != Emotion::Fear).cloned().collect();
        assert!(matches!(
            classify(&model, &no_fear, &ds.sample(0).features),
            Err(Error::InvalidReference(_))
        ));
    }

    #[test]
    fn fine_tune_rejects_freezing_whole_extractor() {
        let ds = synth_generate(&SynthConfig {
            speaker_count: 2,
            samples_per_speaker_per_class: 2,
            ..Default::default()
        })
        .unwrap();
        let model = SiameseModel {
            params: SiameseParams::init(&Architecture::default(), 0).unwrap(),
            normalizer: Normalizer::fit(&ds).unwrap(),
        };
        let cfg = TrainingConfig::default();
        assert!(matches!(
            fine_tune(&model, &ds, 3, false, &cfg, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn zero_epochs_leave_model_untouched() {
        let ds = synth_generate(&SynthConfig {
            speaker_count: 2,
            samples_per_speaker_per_class: 2,
            ..Default::default()
        })
        .unwrap();
        let mut cfg = TrainingConfig::default();
        cfg.pretrain.epochs = 0;
        cfg.finetune.epochs = 0;
        let model = train_oodt(&ds, &cfg, 5).unwrap();
        assert_eq!(model.params, SiameseParams::init(&cfg.architecture, 5).unwrap());
        let (tuned, report) = fine_tune(&model, &ds, 0, false, &cfg, 1).unwrap();
        assert_eq!(tuned, model);
        assert_eq!(report.epochs_run, 0);
    }

    #[test]
    fn derived_seeds_differ_by_path() {
        let a = derive_seed(0, &[1, 2]);
        assert_eq!(a, derive_seed(0, &[1, 2]));
        assert_ne!(a, derive_seed(0, &[2, 1]));
        assert_ne!(a, derive_seed(1, &[1, 2]));
    }

    #[test]
    fn aggregate_mean_and_std() {
        let row = |uar: Option<f64>, rep| TrialRow {
            protocol: Protocol::FineTune,
            source: "s".into(),
            target: "t".into(),
            frozen_layers: Some(0),
            adopted_speakers: Some(2),
            repetition: rep,
            test_speaker: None,
            seed: 0,
            uar,
            distance_loss_steps: 0,
            distance_loss_skips: 0,
            error: None,
            wall_time_ms: 0.0,
        };
        let agg = aggregate(&[row(Some(0.5), 0), row(Some(0.7), 1), row(None, 2)]);
        assert_eq!(agg.len(), 1);
        assert!((agg[0].mean_uar - 0.6).abs() < 1e-15);
        assert!((agg[0].std_uar - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(agg[0].trials, 3);
        assert_eq!(agg[0].failed, 1);
    }

    #[test]
    fn protocol_names_roundtrip() {
        for p in Protocol::ALL {
            assert_eq!(p.as_str().parse::<Protocol>().unwrap(), p);
        }
        assert!("loso".parse::<Protocol>().is_err());
    }
}
