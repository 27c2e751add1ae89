//! Command-line front end: argument parsing, dataset loading or synthesis,
//! protocol dispatch and result emission.

pub mod config;
pub mod output;

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use siamese_core::data::{load_csv, synth_generate, write_csv, Dataset, SynthConfig};
use siamese_core::gradcheck::{run_suite, GradientFault};
use siamese_core::protocols::{
    pretrain_seed, run_oodt, run_sweep, train_oodt, ExperimentResult, Protocol, SiameseModel,
};

use config::{parse_config, CommandKind, ConfigError, Format, Overrides, RunConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "siamese", version, about = "Siamese few-shot emotion classification experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Source-domain feature CSV (synthesized when omitted).
    #[arg(long, global = true)]
    pub source: Option<PathBuf>,
    /// Target-domain feature CSV (synthesized when omitted).
    #[arg(long, global = true)]
    pub target: Option<PathBuf>,
    /// Pretrained model.json to reuse instead of pretraining.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output formats, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub format: Option<Vec<Format>>,
    /// Maximum number of trials run concurrently.
    #[arg(long, global = true)]
    pub parallel: Option<usize>,
    /// Frozen extractor layer counts to sweep, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub frozen_layers: Option<Vec<usize>>,
    /// Adopted target speaker counts to sweep, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub adopted_speakers: Option<Vec<usize>>,
    /// Repetitions per sweep cell.
    #[arg(long, global = true)]
    pub repetitions: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic source and target CSVs.
    Synth,
    /// Train on the source domain and save model.json.
    Pretrain,
    /// Score the source-trained model on the whole target domain.
    Oodt,
    /// Leave-one-speaker-out training and testing on the target domain.
    Idt,
    /// Fine-tune on few adopted target speakers.
    Finetune {
        /// Add the distance-ratio loss step.
        #[arg(long)]
        distance_loss: bool,
    },
    /// Full factorial sweep.
    Experiment {
        /// Protocols to run, comma separated.
        #[arg(long, value_delimiter = ',')]
        protocols: Option<Vec<Protocol>>,
    },
    /// Finite-difference check of both loss gradients.
    Gradcheck {
        /// Scale the largest analytic gradient entry by 1 + this factor.
        #[arg(long, hide = true)]
        inject_fault: Option<f64>,
    },
}

impl Command {
    pub fn kind(&self) -> CommandKind {
        match self {
            Command::Synth => CommandKind::Synth,
            Command::Pretrain => CommandKind::Pretrain,
            Command::Oodt => CommandKind::Oodt,
            Command::Idt => CommandKind::Idt,
            Command::Finetune { .. } => CommandKind::Finetune,
            Command::Experiment { .. } => CommandKind::Experiment,
            Command::Gradcheck { .. } => CommandKind::Gradcheck,
        }
    }
}

/// Gradient check breached its tolerance (exit status 2).
#[derive(Debug)]
pub struct GradientCheckFailed(pub String);

impl fmt::Display for GradientCheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gradient check failed:\n{}", self.0)
    }
}

impl std::error::Error for GradientCheckFailed {}

/// Exit status for an error: 1 for anything the user can fix in the inputs,
/// 2 for runtime and numeric failures.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<siamese_core::Error>() {
            return if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME };
        }
    }
    EXIT_RUNTIME
}

pub fn overrides(cli: &Cli) -> Overrides {
    let c = &cli.common;
    Overrides {
        source: c.source.clone(),
        target: c.target.clone(),
        model: c.model.clone(),
        out: c.out.clone(),
        seed: c.seed,
        formats: c.format.clone(),
        parallel: c.parallel,
        frozen_layers: c.frozen_layers.clone(),
        adopted_speakers: c.adopted_speakers.clone(),
        repetitions: c.repetitions,
        protocols: match &cli.command {
            Command::Experiment { protocols } => protocols.clone(),
            _ => None,
        },
        distance_loss: matches!(cli.command, Command::Finetune { distance_loss: true }),
    }
}

fn load_side(path: Option<&Path>, synth: &SynthConfig, what: &str) -> Result<Dataset> {
    match path {
        Some(p) => load_csv(p).with_context(|| format!("loading {what} data from {}", p.display())),
        None => synth_generate(synth).with_context(|| format!("synthesizing {what} data")),
    }
}

fn load_model(path: &Path) -> Result<SiameseModel> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let model: SiameseModel = serde_json::from_str(&text)
        .map_err(|e| ConfigError(format!("{} is not a model file: {e}", path.display())))?;
    model
        .validate()
        .with_context(|| format!("checking model {}", path.display()))?;
    Ok(model)
}

/// Parses the config and runs the command; returns what to print on
/// standard output.
pub fn run(cli: &Cli) -> Result<String> {
    let config = parse_config(cli.common.config.as_deref(), cli.command.kind(), &overrides(cli))?;
    if let Command::Gradcheck { inject_fault } = cli.command {
        return gradcheck(&config, inject_fault);
    }
    let pool = match config.parallel {
        Some(n) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .context("starting worker threads")?,
        ),
        None => None,
    };
    match pool {
        Some(pool) => pool.install(|| dispatch(&config)),
        None => dispatch(&config),
    }
}

fn dispatch(config: &RunConfig) -> Result<String> {
    let exp = &config.experiment;
    let source = || load_side(config.source.as_deref(), &config.synth.source, "source");
    let target = || load_side(config.target.as_deref(), &config.synth.target, "target");
    let model = || config.model.as_deref().map(load_model).transpose();

    let result: ExperimentResult = match config.command {
        CommandKind::Gradcheck => unreachable!("handled before dispatch"),
        CommandKind::Synth => {
            let (s, t) = (source()?, target()?);
            let mut s_csv = Vec::new();
            write_csv(&s, &mut s_csv)?;
            let mut t_csv = Vec::new();
            write_csv(&t, &mut t_csv)?;
            let written = output::write_atomically(
                &config.out,
                &[
                    (output::CONFIG_FILE, config::to_toml(config).into_bytes()),
                    ("source.csv", s_csv),
                    ("target.csv", t_csv),
                ],
            )?;
            return Ok(format!(
                "source: {} samples, target: {} samples\n{}",
                s.len(),
                t.len(),
                listing(&written)
            ));
        }
        CommandKind::Pretrain => {
            let s = source()?;
            let trained = train_oodt(&s, &exp.training, pretrain_seed(exp.master_seed))?;
            let mut json = serde_json::to_vec_pretty(&trained)?;
            json.push(b'\n');
            let written = output::write_atomically(
                &config.out,
                &[
                    (output::CONFIG_FILE, config::to_toml(config).into_bytes()),
                    ("model.json", json),
                ],
            )?;
            return Ok(format!("pretrained on {} samples\n{}", s.len(), listing(&written)));
        }
        CommandKind::Oodt => run_oodt(exp, &source()?, &target()?, model()?.as_ref())?,
        CommandKind::Idt => {
            let mut e = exp.clone();
            e.protocols = vec![Protocol::Idt];
            run_sweep(&e, None, &target()?, None)?
        }
        CommandKind::Finetune => {
            let mut e = exp.clone();
            e.protocols = vec![if config.use_distance_loss {
                Protocol::FineTuneDistanceLoss
            } else {
                Protocol::FineTune
            }];
            let pretrained = model()?;
            let s = if pretrained.is_some() { None } else { Some(source()?) };
            run_sweep(&e, s.as_ref(), &target()?, pretrained.as_ref())?
        }
        CommandKind::Experiment => {
            let pretrained = model()?;
            let needs_source = exp.protocols.contains(&Protocol::Oodt)
                || (pretrained.is_none() && exp.protocols.iter().any(|p| *p != Protocol::Idt));
            let s = if needs_source { Some(source()?) } else { None };
            run_sweep(exp, s.as_ref(), &target()?, pretrained.as_ref())?
        }
    };
    let written = output::emit_results(&result, config)?;
    let failed = result.trials.iter().filter(|t| t.error.is_some()).count();
    let mut text = output::render_summary(&result);
    if failed > 0 {
        text.push_str(&format!("{failed} trial(s) failed; see the error column\n"));
    }
    text.push_str(&listing(&written));
    Ok(text)
}

fn listing(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| format!("wrote {}\n", p.display())).collect()
}

fn gradcheck(config: &RunConfig, inject_fault: Option<f64>) -> Result<String> {
    let g = &config.gradcheck;
    let fault = inject_fault.map(|relative_perturbation| GradientFault {
        parameter: None,
        relative_perturbation,
    });
    let report = run_suite(g.seed, g.step, g.tolerance, fault)?;
    let text = report.render();
    if report.passed() {
        Ok(text)
    } else {
        Err(GradientCheckFailed(text).into())
    }
}
