//! Run configuration: TOML file plus command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use siamese_core::data::SynthConfig;
use siamese_core::gradcheck::{DEFAULT_STEP, DEFAULT_TOLERANCE};
use siamese_core::protocols::{ExperimentConfig, Protocol};

/// A configuration problem the user can fix (exit status 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Synth,
    Pretrain,
    Oodt,
    Idt,
    Finetune,
    #[default]
    Experiment,
    Gradcheck,
}

impl CommandKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CommandKind::Synth => "synth",
            CommandKind::Pretrain => "pretrain",
            CommandKind::Oodt => "oodt",
            CommandKind::Idt => "idt",
            CommandKind::Finetune => "finetune",
            CommandKind::Experiment => "experiment",
            CommandKind::Gradcheck => "gradcheck",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            _ => Err(format!("unknown format {s:?} (allowed: json, csv)")),
        }
    }
}

/// Synthetic domains used when no CSV is given for a side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthDomains {
    pub source: SynthConfig,
    pub target: SynthConfig,
}

impl Default for SynthDomains {
    fn default() -> Self {
        let source = SynthConfig {
            speaker_count: 30,
            samples_per_speaker_per_class: 8,
            class_center_separation: 6.0,
            speaker_offset_scale: 0.3,
            noise_scale: 0.6,
            seed: 1,
            speaker_prefix: "src".into(),
            ..SynthConfig::default()
        };
        let target = SynthConfig {
            speaker_count: 24,
            domain_shift: 3.0,
            domain_distortion: 0.95,
            seed: 2,
            speaker_prefix: "tgt".into(),
            ..source.clone()
        };
        Self { source, target }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Set from the subcommand; a value in the file is overridden.
    pub command: CommandKind,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    /// Pretrained model to reuse instead of training on the source.
    pub model: Option<PathBuf>,
    pub out: PathBuf,
    pub formats: Vec<Format>,
    /// Worker threads for trials; rayon's default when unset.
    pub parallel: Option<usize>,
    /// `finetune` only: add the distance-loss step.
    pub use_distance_loss: bool,
    pub experiment: ExperimentConfig,
    pub synth: SynthDomains,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: CommandKind::default(),
            source: None,
            target: None,
            model: None,
            out: PathBuf::from("results"),
            formats: vec![Format::Json, Format::Csv],
            parallel: None,
            use_distance_loss: false,
            experiment: ExperimentConfig::default(),
            synth: SynthDomains::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub formats: Option<Vec<Format>>,
    pub parallel: Option<usize>,
    pub frozen_layers: Option<Vec<usize>>,
    pub adopted_speakers: Option<Vec<usize>>,
    pub repetitions: Option<usize>,
    pub protocols: Option<Vec<Protocol>>,
    pub distance_loss: bool,
}

/// Parses TOML text, collecting every unknown key instead of stopping at
/// the first.
pub fn parse_toml(text: &str) -> Result<RunConfig, ConfigError> {
    let de = toml::Deserializer::parse(text).map_err(|e| ConfigError(format!("invalid config: {e}")))?;
    let mut unknown = Vec::new();
    let config: RunConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
        .map_err(|e| ConfigError(format!("invalid config: {e}")))?;
    if !unknown.is_empty() {
        return Err(ConfigError(format!("unknown config keys: {}", unknown.join(", "))));
    }
    Ok(config)
}

/// Loads the optional config file, applies overrides and the subcommand,
/// and validates the result.
pub fn parse_config(
    file: Option<&Path>,
    command: CommandKind,
    overrides: &Overrides,
) -> Result<RunConfig, ConfigError> {
    let mut config = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
            parse_toml(&text)?
        }
        None => RunConfig::default(),
    };
    config.command = command;
    apply_overrides(&mut config, overrides);
    validate(&config)?;
    Ok(config)
}

pub fn apply_overrides(config: &mut RunConfig, o: &Overrides) {
    if let Some(p) = &o.source {
        config.source = Some(p.clone());
    }
    if let Some(p) = &o.target {
        config.target = Some(p.clone());
    }
    if let Some(p) = &o.model {
        config.model = Some(p.clone());
    }
    if let Some(p) = &o.out {
        config.out = p.clone();
    }
    if let Some(seed) = o.seed {
        config.experiment.master_seed = seed;
        config.gradcheck.seed = seed;
    }
    if let Some(f) = &o.formats {
        config.formats = f.clone();
    }
    if o.parallel.is_some() {
        config.parallel = o.parallel;
    }
    if let Some(v) = &o.frozen_layers {
        config.experiment.frozen_layers = v.clone();
    }
    if let Some(v) = &o.adopted_speakers {
        config.experiment.adopted_speaker_counts = v.clone();
    }
    if let Some(r) = o.repetitions {
        config.experiment.repetitions = r;
    }
    if let Some(p) = &o.protocols {
        config.experiment.protocols = p.clone();
    }
    if o.distance_loss {
        config.use_distance_loss = true;
    }
    config.formats.sort();
    config.formats.dedup();
}

pub fn validate(config: &RunConfig) -> Result<(), ConfigError> {
    let invalid = |e: siamese_core::Error| ConfigError(e.to_string());
    if config.command == CommandKind::Gradcheck {
        let g = &config.gradcheck;
        if !(g.step > 0.0 && g.step.is_finite() && g.tolerance > 0.0 && g.tolerance.is_finite()) {
            return Err(ConfigError("gradcheck step and tolerance must be positive".into()));
        }
        return Ok(());
    }
    if config.command == CommandKind::Synth {
        config.synth.source.validate().map_err(invalid)?;
        config.synth.target.validate().map_err(invalid)?;
    } else {
        config.experiment.validate().map_err(invalid)?;
        if config.source.is_none() {
            config.synth.source.validate().map_err(invalid)?;
        }
        if config.target.is_none() {
            config.synth.target.validate().map_err(invalid)?;
        }
    }
    for path in [&config.source, &config.target, &config.model].into_iter().flatten() {
        if !path.is_file() {
            return Err(ConfigError(format!("input file {} does not exist", path.display())));
        }
    }
    if config.formats.is_empty() {
        return Err(ConfigError("at least one output format is required".into()));
    }
    if config.parallel == Some(0) {
        return Err(ConfigError("--parallel must be at least 1".into()));
    }
    check_creatable(&config.out)?;
    Ok(())
}

/// The output directory must exist as a directory or be creatable under its
/// nearest existing ancestor.
fn check_creatable(out: &Path) -> Result<(), ConfigError> {
    let mut probe = Some(out);
    while let Some(p) = probe {
        if p.as_os_str().is_empty() {
            return Ok(());
        }
        if p.exists() {
            if p.is_dir() {
                return Ok(());
            }
            return Err(ConfigError(format!(
                "output path {} is blocked by the file {}",
                out.display(),
                p.display()
            )));
        }
        probe = p.parent();
    }
    Ok(())
}

/// Fully materialized TOML echo of `config`.
pub fn to_toml(config: &RunConfig) -> String {
    toml::to_string_pretty(config).expect("run config serializes to TOML")
}
