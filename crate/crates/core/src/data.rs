//! Samples, datasets, feature CSV I/O, normalization, pair sampling, LOSO
//! folds and a seeded synthetic domain generator.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::siamese::{Pair, PairBatch};

pub const FEATURE_DIM: usize = 64;

/// Low-level descriptors in column order. Each contributes a mean and a
/// standard deviation, first for the raw contour (f00..f31) and then for its
/// first-order delta (f32..f63).
pub const DESCRIPTORS: [&str; 16] = [
    "intensity",
    "zcr",
    "voice_prob",
    "f0",
    "mfcc1",
    "mfcc2",
    "mfcc3",
    "mfcc4",
    "mfcc5",
    "mfcc6",
    "mfcc7",
    "mfcc8",
    "mfcc9",
    "mfcc10",
    "mfcc11",
    "mfcc12",
];

/// Human-readable meaning of feature column `index` (e.g. `f0_delta_std`).
pub fn feature_description(index: usize) -> Option<String> {
    if index >= FEATURE_DIM {
        return None;
    }
    let delta = if index >= 32 { "_delta" } else { "" };
    let within = index % 32;
    let stat = if within.is_multiple_of(2) { "mean" } else { "std" };
    Some(format!("{}{delta}_{stat}", DESCRIPTORS[within / 2]))
}

pub fn feature_column(index: usize) -> String {
    format!("f{index:02}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Anger,
    Happiness,
    Sadness,
    Fear,
}

impl Emotion {
    /// Fixed class order; also the tie-break order for classification.
    pub const ALL: [Emotion; 4] = [
        Emotion::Anger,
        Emotion::Happiness,
        Emotion::Sadness,
        Emotion::Fear,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Emotion> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Emotion::Anger => "anger",
            Emotion::Happiness => "happiness",
            Emotion::Sadness => "sadness",
            Emotion::Fear => "fear",
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Emotion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Emotion::ALL
            .into_iter()
            .find(|e| e.as_str() == lower)
            .ok_or_else(|| format!("unknown emotion {s:?} (expected anger, happiness, sadness or fear)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub speaker_id: String,
    pub emotion: Emotion,
    pub features: Vec<f64>,
}

/// Per-feature z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Substituted for the standard deviation of constant features.
pub const STD_FLOOR: f64 = 1e-8;

impl Normalizer {
    /// Population mean and standard deviation of every feature.
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        Self::fit_indices(dataset, &(0..dataset.len()).collect::<Vec<_>>())
    }

    /// Fit on a subset only (e.g. the training side of a split).
    pub fn fit_indices(dataset: &Dataset, indices: &[usize]) -> Result<Self> {
        if indices.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "normalizer needs at least 2 samples, got {}",
                indices.len()
            )));
        }
        let n = indices.len() as f64;
        let mut mean = vec![0.0; FEATURE_DIM];
        for &i in indices {
            for (m, v) in mean.iter_mut().zip(&dataset.samples[i].features) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; FEATURE_DIM];
        for &i in indices {
            for ((s, v), m) in var.iter_mut().zip(&dataset.samples[i].features).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > STD_FLOOR {
                    sd
                } else {
                    STD_FLOOR
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn transform(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Z-scored copy of `dataset`. The statistics are used verbatim; nothing
    /// is refit on `dataset`.
    pub fn apply(&self, dataset: &Dataset) -> Dataset {
        let samples = dataset
            .samples
            .iter()
            .map(|s| Sample {
                features: self.transform(&s.features),
                ..s.clone()
            })
            .collect();
        let mut out = Dataset::from_validated(samples);
        out.normalization = Some(self.clone());
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    speaker_index: BTreeMap<String, Vec<usize>>,
    class_index: BTreeMap<Emotion, Vec<usize>>,
    /// Statistics applied to produce these features, if any.
    pub normalization: Option<Normalizer>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != FEATURE_DIM {
                return Err(Error::InvalidInput(format!(
                    "sample {i} ({}) has {} features, expected {FEATURE_DIM}",
                    s.sample_id,
                    s.features.len()
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "sample {i} ({}) has non-finite features",
                    s.sample_id
                )));
            }
        }
        Ok(Self::from_validated(samples))
    }

    fn from_validated(samples: Vec<Sample>) -> Self {
        let mut speaker_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut class_index: BTreeMap<Emotion, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            speaker_index.entry(s.speaker_id.clone()).or_default().push(i);
            class_index.entry(s.emotion).or_default().push(i);
        }
        Self {
            samples,
            speaker_index,
            class_index,
            normalization: None,
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn speaker_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.speaker_index
    }

    pub fn class_index(&self) -> &BTreeMap<Emotion, Vec<usize>> {
        &self.class_index
    }

    /// Speaker ids in sorted order.
    pub fn speakers(&self) -> Vec<&str> {
        self.speaker_index.keys().map(String::as_str).collect()
    }

    pub fn indices_of_class(&self, emotion: Emotion) -> &[usize] {
        self.class_index.get(&emotion).map_or(&[], Vec::as_slice)
    }

    pub fn has_all_classes(&self) -> bool {
        Emotion::ALL.iter().all(|e| !self.indices_of_class(*e).is_empty())
    }

    /// New dataset holding the given samples in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Self::from_validated(indices.iter().map(|&i| self.samples[i].clone()).collect());
        out.normalization = self.normalization.clone();
        out
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.features.clone()).collect()
    }

    pub fn labels(&self) -> Vec<Emotion> {
        self.samples.iter().map(|s| s.emotion).collect()
    }

    /// Concatenates two datasets (e.g. several synthetic draws).
    pub fn concat(&self, other: &Dataset) -> Dataset {
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        Self::from_validated(samples)
    }
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file)
}

pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::Parse {
            row: 0,
            column: "header".into(),
            message: "empty file".into(),
        });
    }
    let position = |name: &str| -> Result<usize> {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            row: 0,
            column: name.to_string(),
            message: "missing required column".into(),
        })
    };
    let id_col = position("sample_id")?;
    let speaker_col = position("speaker_id")?;
    let emotion_col = position("emotion")?;
    let feature_cols: Vec<usize> = (0..FEATURE_DIM)
        .map(|i| position(&feature_column(i)))
        .collect::<Result<_>>()?;
    let expected_fields = header.len();
    if expected_fields != FEATURE_DIM + 3 {
        let known: Vec<String> = ["sample_id", "speaker_id", "emotion"]
            .iter()
            .map(|s| s.to_string())
            .chain((0..FEATURE_DIM).map(feature_column))
            .collect();
        let extra: Vec<&str> = header.iter().filter(|h| !known.iter().any(|k| k == h)).collect();
        return Err(Error::Parse {
            row: 0,
            column: extra.join(","),
            message: format!("unexpected columns (header has {expected_fields} fields)"),
        });
    }

    let mut samples = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != expected_fields {
            return Err(Error::Parse {
                row,
                column: "*".into(),
                message: format!(
                    "feature arity: expected {expected_fields} fields ({FEATURE_DIM} features), found {}",
                    record.len()
                ),
            });
        }
        let emotion = record[emotion_col].parse::<Emotion>().map_err(|message| Error::Parse {
            row,
            column: "emotion".into(),
            message,
        })?;
        let mut features = Vec::with_capacity(FEATURE_DIM);
        for (k, &col) in feature_cols.iter().enumerate() {
            let cell = &record[col];
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: feature_column(k),
                message: format!("not a number: {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: feature_column(k),
                    message: format!("non-finite value {cell:?}"),
                });
            }
            features.push(v);
        }
        samples.push(Sample {
            sample_id: record[id_col].to_string(),
            speaker_id: record[speaker_col].to_string(),
            emotion,
            features,
        });
    }
    if samples.is_empty() {
        return Err(Error::Parse {
            row: 1,
            column: "*".into(),
            message: "no data rows".into(),
        });
    }
    Dataset::new(samples)
}

pub fn write_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["sample_id".to_string(), "speaker_id".into(), "emotion".into()];
    header.extend((0..FEATURE_DIM).map(feature_column));
    wtr.write_record(&header)?;
    for s in dataset.samples() {
        let mut rec = vec![s.sample_id.clone(), s.speaker_id.clone(), s.emotion.to_string()];
        // `{}` on f64 prints the shortest string that round-trips exactly.
        rec.extend(s.features.iter().map(|v| format!("{v}")));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_csv(dataset, std::io::BufWriter::new(file))
}

/// Which sample pairings `sample_pairs` may draw.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairScope {
    #[default]
    Both,
    WithinSpeaker,
    CrossSpeaker,
}

const MAX_PAIR_ATTEMPTS: usize = 10_000;

/// Draws `n_pairs / 2` same-class and `n_pairs / 2` different-class pairs.
///
/// Same-class pairs pick a class uniformly among classes with at least two
/// samples, then two distinct samples of it. Different-class pairs pick two
/// distinct classes uniformly, then one sample from each. Self-pairs never
/// occur.
pub fn sample_pairs<R: Rng + ?Sized>(
    dataset: &Dataset,
    n_pairs: usize,
    scope: PairScope,
    rng: &mut R,
) -> Result<PairBatch> {
    if n_pairs == 0 || !n_pairs.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!(
            "pair count must be positive and even, got {n_pairs}"
        )));
    }
    let present: Vec<&Vec<usize>> = dataset.class_index.values().filter(|v| !v.is_empty()).collect();
    if present.len() < 2 {
        return Err(Error::InvalidInput(
            "pair sampling needs at least two classes".into(),
        ));
    }
    let pairable: Vec<&Vec<usize>> = present.iter().copied().filter(|v| v.len() >= 2).collect();
    if pairable.is_empty() {
        return Err(Error::InvalidInput(
            "no class has two samples to form a same-class pair".into(),
        ));
    }
    let speaker = |i: usize| dataset.samples[i].speaker_id.as_str();
    let admissible = |a: usize, b: usize| match scope {
        PairScope::Both => true,
        PairScope::WithinSpeaker => speaker(a) == speaker(b),
        PairScope::CrossSpeaker => speaker(a) != speaker(b),
    };

    let half = n_pairs / 2;
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..half {
        let mut found = None;
        for _ in 0..MAX_PAIR_ATTEMPTS {
            let class = pairable.choose(rng).expect("non-empty");
            let a = rng.random_range(0..class.len());
            let mut b = rng.random_range(0..class.len() - 1);
            if b >= a {
                b += 1;
            }
            let (a, b) = (class[a], class[b]);
            if admissible(a, b) {
                found = Some(Pair { a, b, same_class: true });
                break;
            }
        }
        pairs.push(found.ok_or_else(|| {
            Error::InvalidInput(format!("no admissible same-class pair under {scope:?}"))
        })?);
    }
    for _ in 0..half {
        let mut found = None;
        for _ in 0..MAX_PAIR_ATTEMPTS {
            let ca = rng.random_range(0..present.len());
            let mut cb = rng.random_range(0..present.len() - 1);
            if cb >= ca {
                cb += 1;
            }
            let a = *present[ca].choose(rng).expect("non-empty");
            let b = *present[cb].choose(rng).expect("non-empty");
            if admissible(a, b) {
                found = Some(Pair { a, b, same_class: false });
                break;
            }
        }
        pairs.push(found.ok_or_else(|| {
            Error::InvalidInput(format!("no admissible different-class pair under {scope:?}"))
        })?);
    }
    Ok(PairBatch::new(pairs))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub test_speaker: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One fold per speaker, in sorted speaker order.
pub fn loso_folds(dataset: &Dataset) -> Result<Vec<Fold>> {
    if dataset.speaker_index.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "leave-one-speaker-out needs at least 2 speakers, found {}",
            dataset.speaker_index.len()
        )));
    }
    Ok(dataset
        .speaker_index
        .iter()
        .map(|(speaker, test)| Fold {
            test_speaker: speaker.clone(),
            train: (0..dataset.len())
                .filter(|&i| dataset.samples[i].speaker_id != *speaker)
                .collect(),
            test: test.clone(),
        })
        .collect())
}

/// Parameters of a synthetic corpus.
///
/// Class centres are placed on an orthonormal frame drawn from `layout_seed`
/// so that every pair of centres is `class_center_separation` apart. Each
/// speaker gets a persistent Gaussian offset and every sample gets Gaussian
/// noise (both per-dimension standard deviations). A domain is shifted by
/// translating all samples `domain_shift` units along a layout-seeded
/// direction and, with `domain_distortion` in `[0, 1]`, by blending every
/// class centre toward a second layout-seeded centre set. Two configs that
/// share `layout_seed` describe the same emotion geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub speaker_count: usize,
    pub samples_per_speaker_per_class: usize,
    pub class_center_separation: f64,
    pub speaker_offset_scale: f64,
    pub noise_scale: f64,
    pub domain_shift: f64,
    pub domain_distortion: f64,
    pub layout_seed: u64,
    pub seed: u64,
    pub speaker_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            speaker_count: 24,
            samples_per_speaker_per_class: 8,
            class_center_separation: 4.0,
            speaker_offset_scale: 0.3,
            noise_scale: 1.0,
            domain_shift: 0.0,
            domain_distortion: 0.0,
            layout_seed: 0,
            seed: 0,
            speaker_prefix: "spk".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.speaker_count == 0 || self.samples_per_speaker_per_class == 0 {
            return Err(Error::InvalidConfig(
                "synthetic speaker and sample counts must be positive".into(),
            ));
        }
        let scales = [
            self.class_center_separation,
            self.speaker_offset_scale,
            self.noise_scale,
            self.domain_shift,
        ];
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidConfig(
                "synthetic scales must be finite and nonnegative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.domain_distortion) {
            return Err(Error::InvalidConfig(format!(
                "domain_distortion must lie in [0, 1], got {}",
                self.domain_distortion
            )));
        }
        Ok(())
    }
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> Vec<f64> {
    (0..FEATURE_DIM)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

fn orthonormal_frame<R: Rng + ?Sized>(rng: &mut R, count: usize) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(count);
    while frame.len() < count {
        let mut v = gaussian_vec(rng, 1.0);
        for u in &frame {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            frame.push(v);
        }
    }
    frame
}

/// Class centres, translation direction and distortion targets derived from
/// a layout seed.
struct Layout {
    centers: Vec<Vec<f64>>,
    alt_centers: Vec<Vec<f64>>,
    shift_direction: Vec<f64>,
}

impl Layout {
    fn new(layout_seed: u64, separation: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(layout_seed);
        let classes = Emotion::ALL.len();
        // 2 × classes + 1 orthonormal directions: centres, alternates, shift.
        let frame = orthonormal_frame(&mut rng, 2 * classes + 1);
        let scale = separation / std::f64::consts::SQRT_2;
        let scaled = |v: &Vec<f64>| v.iter().map(|a| a * scale).collect::<Vec<_>>();
        Self {
            centers: frame[..classes].iter().map(scaled).collect(),
            alt_centers: frame[classes..2 * classes].iter().map(scaled).collect(),
            shift_direction: frame[2 * classes].clone(),
        }
    }
}

pub fn synth_generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let layout = Layout::new(config.layout_seed, config.class_center_separation);
    let alpha = config.domain_distortion;
    let centers: Vec<Vec<f64>> = layout
        .centers
        .iter()
        .zip(&layout.alt_centers)
        .map(|(c, alt)| {
            c.iter()
                .zip(alt)
                .zip(&layout.shift_direction)
                .map(|((c, a), s)| (1.0 - alpha) * c + alpha * a + config.domain_shift * s)
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let width = (config.speaker_count.max(1) - 1).to_string().len().max(2);
    let mut samples = Vec::with_capacity(
        config.speaker_count * config.samples_per_speaker_per_class * Emotion::ALL.len(),
    );
    for s in 0..config.speaker_count {
        let speaker_id = format!("{}{:0width$}", config.speaker_prefix, s, width = width);
        let offset = gaussian_vec(&mut rng, config.speaker_offset_scale);
        for emotion in Emotion::ALL {
            for k in 0..config.samples_per_speaker_per_class {
                let noise = gaussian_vec(&mut rng, config.noise_scale);
                let features = centers[emotion.index()]
                    .iter()
                    .zip(&offset)
                    .zip(&noise)
                    .map(|((c, o), n)| c + o + n)
                    .collect();
                samples.push(Sample {
                    sample_id: format!("{speaker_id}_{emotion}_{k:02}"),
                    speaker_id: speaker_id.clone(),
                    emotion,
                    features,
                });
            }
        }
    }
    Dataset::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        synth_generate(&SynthConfig {
            speaker_count: 3,
            samples_per_speaker_per_class: 2,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn emotion_parsing() {
        assert_eq!("ANGER".parse::<Emotion>().unwrap(), Emotion::Anger);
        assert_eq!(" Fear ".parse::<Emotion>().unwrap(), Emotion::Fear);
        assert!("disgust".parse::<Emotion>().is_err());
    }

    #[test]
    fn feature_descriptions() {
        assert_eq!(feature_description(0).unwrap(), "intensity_mean");
        assert_eq!(feature_description(7).unwrap(), "f0_std");
        assert_eq!(feature_description(63).unwrap(), "mfcc12_delta_std");
        assert!(feature_description(64).is_none());
    }

    #[test]
    fn indices_are_consistent() {
        let ds = tiny();
        assert_eq!(ds.len(), 3 * 4 * 2);
        let mut seen: Vec<usize> = ds.speaker_index().values().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..ds.len()).collect::<Vec<_>>());
        for (e, idx) in ds.class_index() {
            assert!(idx.iter().all(|&i| ds.sample(i).emotion == *e));
        }
    }

    #[test]
    fn dataset_rejects_wrong_arity() {
        let s = Sample {
            sample_id: "a".into(),
            speaker_id: "s".into(),
            emotion: Emotion::Anger,
            features: vec![0.0; 63],
        };
        assert!(matches!(Dataset::new(vec![s]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn normalizer_zscores_training_data() {
        let ds = tiny();
        let norm = Normalizer::fit(&ds).unwrap();
        let z = norm.apply(&ds);
        let n = z.len() as f64;
        for j in 0..FEATURE_DIM {
            let mean: f64 = z.samples().iter().map(|s| s.features[j]).sum::<f64>() / n;
            let var: f64 = z.samples().iter().map(|s| (s.features[j] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
            assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
        assert_eq!(z.normalization.as_ref(), Some(&norm));
    }

    #[test]
    fn constant_feature_uses_floor() {
        let mut samples = tiny().samples().to_vec();
        for s in &mut samples {
            s.features[5] = 3.25;
        }
        let ds = Dataset::new(samples).unwrap();
        let norm = Normalizer::fit(&ds).unwrap();
        assert_eq!(norm.std[5], STD_FLOOR);
        assert!(norm.apply(&ds).samples().iter().all(|s| s.features[5] == 0.0));
    }

    #[test]
    fn normalizer_needs_two_samples() {
        let ds = tiny().subset(&[0]);
        assert!(matches!(Normalizer::fit(&ds), Err(Error::InvalidInput(_))));
        assert!(matches!(Normalizer::fit(&tiny().subset(&[])), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn pair_counts_and_determinism() {
        let ds = tiny();
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let b1 = sample_pairs(&ds, 10, PairScope::Both, &mut r1).unwrap();
        let b2 = sample_pairs(&ds, 10, PairScope::Both, &mut r2).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(b1.same_count(), 5);
        assert_eq!(b1.different_count(), 5);
        assert!(b1.pairs.iter().all(|p| p.a != p.b));
    }

    #[test]
    fn pair_sampling_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ds = tiny();
        assert!(sample_pairs(&ds, 3, PairScope::Both, &mut rng).is_err());
        assert!(sample_pairs(&ds, 0, PairScope::Both, &mut rng).is_err());
        // one sample per class: no same-class pair possible
        let one_each: Vec<usize> = Emotion::ALL.iter().map(|e| ds.indices_of_class(*e)[0]).collect();
        assert!(matches!(
            sample_pairs(&ds.subset(&one_each), 4, PairScope::Both, &mut rng),
            Err(Error::InvalidInput(_))
        ));
        // single class
        let anger = ds.subset(ds.indices_of_class(Emotion::Anger));
        assert!(sample_pairs(&anger, 4, PairScope::Both, &mut rng).is_err());
    }

    #[test]
    fn pair_scopes_are_respected() {
        let ds = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let within = sample_pairs(&ds, 40, PairScope::WithinSpeaker, &mut rng).unwrap();
        assert!(within
            .pairs
            .iter()
            .all(|p| ds.sample(p.a).speaker_id == ds.sample(p.b).speaker_id));
        let cross = sample_pairs(&ds, 40, PairScope::CrossSpeaker, &mut rng).unwrap();
        assert!(cross
            .pairs
            .iter()
            .all(|p| ds.sample(p.a).speaker_id != ds.sample(p.b).speaker_id));
    }

    #[test]
    fn loso_partitions() {
        let ds = tiny();
        let folds = loso_folds(&ds).unwrap();
        assert_eq!(folds.len(), 3);
        for f in &folds {
            assert_eq!(f.train.len() + f.test.len(), ds.len());
            assert!(f.test.iter().all(|&i| ds.sample(i).speaker_id == f.test_speaker));
            assert!(f.train.iter().all(|&i| ds.sample(i).speaker_id != f.test_speaker));
        }
        let single = synth_generate(&SynthConfig {
            speaker_count: 1,
            samples_per_speaker_per_class: 1,
            ..Default::default()
        })
        .unwrap();
        assert!(matches!(loso_folds(&single), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn synth_without_noise_collapses_classes() {
        let ds = synth_generate(&SynthConfig {
            speaker_count: 3,
            samples_per_speaker_per_class: 2,
            noise_scale: 0.0,
            speaker_offset_scale: 0.0,
            ..Default::default()
        })
        .unwrap();
        for e in Emotion::ALL {
            let idx = ds.indices_of_class(e);
            assert!(idx.iter().all(|&i| ds.sample(i).features == ds.sample(idx[0]).features));
        }
        // centres are class_center_separation apart
        let a = &ds.sample(ds.indices_of_class(Emotion::Anger)[0]).features;
        let b = &ds.sample(ds.indices_of_class(Emotion::Fear)[0]).features;
        let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!((d - 4.0).abs() < 1e-9);
    }

    #[test]
    fn synth_zero_shift_matches_source() {
        let base = SynthConfig {
            speaker_count: 2,
            samples_per_speaker_per_class: 3,
            seed: 9,
            ..Default::default()
        };
        let a = synth_generate(&base).unwrap();
        let b = synth_generate(&SynthConfig {
            domain_shift: 0.0,
            ..base.clone()
        })
        .unwrap();
        assert_eq!(a, b);
        let shifted = synth_generate(&SynthConfig {
            domain_shift: 3.0,
            ..base
        })
        .unwrap();
        assert_ne!(a, shifted);
    }

    #[test]
    fn synth_config_validation() {
        let bad = SynthConfig {
            noise_scale: -1.0,
            ..Default::default()
        };
        assert!(matches!(synth_generate(&bad), Err(Error::InvalidConfig(_))));
        let bad = SynthConfig {
            speaker_count: 0,
            ..Default::default()
        };
        assert!(matches!(synth_generate(&bad), Err(Error::InvalidConfig(_))));
    }
}
