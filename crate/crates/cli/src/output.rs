//! Result tables, JSON mirror, human summary and crash-safe file output.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use siamese_core::protocols::{AggregateRow, ExperimentResult, TrialRow};

use crate::config::{to_toml, Format, RunConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const TRIALS_CSV: &str = "trials.csv";
pub const AGGREGATES_CSV: &str = "aggregates.csv";
pub const RESULTS_JSON: &str = "results.json";
pub const TIMINGS_CSV: &str = "timings.csv";
pub const SUMMARY_TXT: &str = "summary.txt";

/// Writes every file to a temporary sibling first and renames them into
/// place only once all writes succeeded.
pub fn write_atomically(out: &Path, files: &[(&str, Vec<u8>)]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut staged = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let mut tmp = tempfile::Builder::new()
            .prefix(".partial-")
            .tempfile_in(out)
            .with_context(|| format!("cannot write into {}", out.display()))?;
        tmp.write_all(bytes)
            .and_then(|_| tmp.as_file().sync_all())
            .with_context(|| format!("cannot write {name}"))?;
        staged.push((tmp, out.join(name)));
    }
    let mut written = Vec::with_capacity(staged.len());
    for (tmp, dest) in staged {
        tmp.persist(&dest)
            .with_context(|| format!("cannot move result into {}", dest.display()))?;
        written.push(dest);
    }
    Ok(written)
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

#[derive(Serialize)]
struct TimingRow<'a> {
    protocol: &'a str,
    frozen_layers: Option<usize>,
    adopted_speakers: Option<usize>,
    repetition: usize,
    test_speaker: Option<&'a str>,
    wall_time_ms: f64,
}

pub fn timings_csv(trials: &[TrialRow]) -> Result<Vec<u8>> {
    let rows: Vec<TimingRow> = trials
        .iter()
        .map(|t| TimingRow {
            protocol: t.protocol.as_str(),
            frozen_layers: t.frozen_layers,
            adopted_speakers: t.adopted_speakers,
            repetition: t.repetition,
            test_speaker: t.test_speaker.as_deref(),
            wall_time_ms: t.wall_time_ms,
        })
        .collect();
    csv_bytes(&rows)
}

#[derive(Serialize)]
struct JsonMirror<'a> {
    command: &'a str,
    config: &'a RunConfig,
    trials: &'a [TrialRow],
    aggregates: &'a [AggregateRow],
}

fn pct(v: f64) -> String {
    if v.is_finite() {
        format!("{:.1}", 100.0 * v)
    } else {
        "-".into()
    }
}

fn opt(v: Option<usize>) -> String {
    v.map_or_else(|| "-".into(), |v| v.to_string())
}

/// Aggregate table with UAR in percent to one decimal.
pub fn render_summary(result: &ExperimentResult) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<24} {:<13} {:>6} {:>7} {:>6} {:>6} {:>7} {:>6}",
        "protocol", "loss", "frozen", "adopted", "trials", "failed", "UAR%", "std%"
    );
    for a in &result.aggregates {
        let _ = writeln!(
            s,
            "{:<24} {:<13} {:>6} {:>7} {:>6} {:>6} {:>7} {:>6}",
            a.protocol.as_str(),
            a.loss_mode,
            opt(a.frozen_layers),
            opt(a.adopted_speakers),
            a.trials,
            a.failed,
            pct(a.mean_uar),
            pct(a.std_uar)
        );
    }
    s
}

/// Writes the config echo, the requested result formats, timings and the
/// summary into `config.out`. Everything except `timings.csv` is a pure
/// function of the result and the config.
pub fn emit_results(result: &ExperimentResult, config: &RunConfig) -> Result<Vec<PathBuf>> {
    if result.trials.is_empty() {
        bail!("no trials to write");
    }
    let mut files: Vec<(&str, Vec<u8>)> = vec![(CONFIG_FILE, to_toml(config).into_bytes())];
    if config.formats.contains(&Format::Csv) {
        files.push((TRIALS_CSV, csv_bytes(&result.trials)?));
        files.push((AGGREGATES_CSV, csv_bytes(&result.aggregates)?));
    }
    if config.formats.contains(&Format::Json) {
        let mirror = JsonMirror {
            command: config.command.as_str(),
            config,
            trials: &result.trials,
            aggregates: &result.aggregates,
        };
        let mut json = serde_json::to_vec_pretty(&mirror)?;
        json.push(b'\n');
        files.push((RESULTS_JSON, json));
    }
    files.push((TIMINGS_CSV, timings_csv(&result.trials)?));
    files.push((SUMMARY_TXT, render_summary(result).into_bytes()));
    write_atomically(&config.out, &files)
}
