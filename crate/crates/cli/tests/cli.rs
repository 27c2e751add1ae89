//! Config parsing, result emission and the `siamese` binary's contract.

use std::path::Path;
use std::process::{Command, Output};

use siamese_cli::config::{parse_config, CommandKind, Format, Overrides, RunConfig};
use siamese_cli::output::{emit_results, AGGREGATES_CSV, RESULTS_JSON, SUMMARY_TXT, TRIALS_CSV};
use siamese_core::protocols::{ExperimentResult, Protocol, TrialRow};

fn siamese(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_siamese"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

#[test]
fn minimal_config_materializes_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("target.csv");
    std::fs::write(&target, "sample_id,speaker_id,emotion\n").unwrap();
    let file = dir.path().join("run.toml");
    std::fs::write(
        &file,
        format!("target = {:?}\n[experiment]\nprotocols = [\"idt\"]\n", target.to_str().unwrap()),
    )
    .unwrap();
    let parse = || parse_config(Some(&file), CommandKind::Idt, &Overrides::default()).unwrap();
    let c = parse();
    assert_eq!(c.experiment.repetitions, 10);
    assert_eq!(c.experiment.training.pretrain.learning_rate, 1e-3);
    assert_eq!(c.experiment.training.finetune.learning_rate, 1e-3);
    assert_eq!(c.experiment.master_seed, 0);
    assert_eq!(c.experiment.protocols, vec![Protocol::Idt]);
    assert_eq!(c.formats, vec![Format::Json, Format::Csv]);
    assert_eq!(c, parse());
}

#[test]
fn freezing_the_whole_extractor_is_a_validation_error() {
    let o = Overrides {
        frozen_layers: Some(vec![3]),
        ..Default::default()
    };
    let err = parse_config(None, CommandKind::Experiment, &o).unwrap_err();
    assert!(err.0.contains("frozen_layers 3"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let out = siamese(dir.path(), &["experiment", "--frozen-layers", "3"]);
    assert_eq!(code(&out), 1, "{}", text(&out.stderr));
    assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none(), "nothing should be written");
}

#[test]
fn unknown_keys_and_bad_values_exit_with_validation_status() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "outt = \"x\"\n[experiment]\nrepetition = 2\n").unwrap();
    let out = siamese(dir.path(), &["experiment", "--config", "bad.toml"]);
    assert_eq!(code(&out), 1);
    let err = text(&out.stderr);
    assert!(err.contains("outt") && err.contains("experiment.repetition"), "{err}");

    let out = siamese(dir.path(), &["experiment", "--protocols", "oodt,bogus"]);
    assert_eq!(code(&out), 1);
    assert!(text(&out.stderr).contains("finetune_distance_loss"));

    let out = siamese(dir.path(), &["experiment", "--format", "xml"]);
    assert_eq!(code(&out), 1);

    std::fs::write(dir.path().join("broken.csv"), "sample_id,speaker_id,emotion,f00\na,b,anger,1\n").unwrap();
    let out = siamese(dir.path(), &["idt", "--target", "broken.csv"]);
    assert_eq!(code(&out), 1, "{}", text(&out.stderr));
    assert!(text(&out.stderr).contains("f01"), "{}", text(&out.stderr));
}

#[test]
fn gradcheck_reports_and_fails_on_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let ok = siamese(dir.path(), &["gradcheck", "--seed", "0"]);
    assert_eq!(code(&ok), 0, "{}", text(&ok.stderr));
    let report = text(&ok.stdout);
    assert!(report.contains("bce") && report.contains("distance") && report.contains("max_rel_err"));
    assert_eq!(report, text(&siamese(dir.path(), &["gradcheck", "--seed", "0"]).stdout));

    let bad = siamese(dir.path(), &["gradcheck", "--seed", "0", "--inject-fault", "0.1"]);
    assert_eq!(code(&bad), 2);
    assert!(text(&bad.stderr).contains("FAIL"));
}

fn fake_trials(n_reps: usize) -> ExperimentResult {
    let mut trials = Vec::new();
    for protocol in [Protocol::FineTune, Protocol::FineTuneDistanceLoss] {
        for frozen in 0..3 {
            for rep in 0..n_reps {
                trials.push(TrialRow {
                    protocol,
                    source: "src".into(),
                    target: "tgt".into(),
                    frozen_layers: Some(frozen),
                    adopted_speakers: Some(2),
                    repetition: rep,
                    test_speaker: None,
                    seed: (rep * 7 + frozen) as u64,
                    uar: Some(0.25 + 0.01 * rep as f64 + 0.1 / (3.0 + frozen as f64)),
                    distance_loss_steps: 0,
                    distance_loss_skips: 0,
                    error: None,
                    wall_time_ms: rep as f64,
                });
            }
        }
    }
    ExperimentResult::from_trials(trials)
}

#[test]
fn emitted_tables_are_complete_stable_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let result = fake_trials(10);
    let config = RunConfig {
        out: dir.path().join("out"),
        ..RunConfig::default()
    };
    emit_results(&result, &config).unwrap();
    let read = |name: &str| std::fs::read(config.out.join(name)).unwrap();
    let first: Vec<Vec<u8>> = [TRIALS_CSV, AGGREGATES_CSV, RESULTS_JSON, SUMMARY_TXT].map(read).to_vec();
    emit_results(&result, &config).unwrap();
    let second: Vec<Vec<u8>> = [TRIALS_CSV, AGGREGATES_CSV, RESULTS_JSON, SUMMARY_TXT].map(read).to_vec();
    assert_eq!(first, second);

    let mut trials = csv::Reader::from_reader(first[0].as_slice());
    let headers = trials.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = trials.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 60);
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();

    let mut aggs = csv::Reader::from_reader(first[1].as_slice());
    let ah = aggs.headers().unwrap().clone();
    let acol = |name: &str| ah.iter().position(|h| h == name).unwrap();
    let mut cells = 0;
    for a in aggs.records().map(Result::unwrap) {
        let key = (&a[acol("protocol")], &a[acol("frozen_layers")], &a[acol("adopted_speakers")]);
        let values: Vec<f64> = rows
            .iter()
            .filter(|r| (&r[col("protocol")], &r[col("frozen_layers")], &r[col("adopted_speakers")]) == key)
            .map(|r| r[col("uar")].parse().unwrap())
            .collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let reported: f64 = a[acol("mean_uar")].parse().unwrap();
        assert!((reported - mean).abs() <= 1e-12);
        cells += 1;
    }
    assert_eq!(cells, 6);

    let json: serde_json::Value = serde_json::from_slice(&first[2]).unwrap();
    assert_eq!(json["trials"].as_array().unwrap().len(), 60);
    assert_eq!(json["config"]["experiment"]["master_seed"], 0);
    assert!(text(&first[3]).contains("finetune_distance_loss"));
}

#[test]
fn emission_honours_format_selection_and_empty_results() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig {
        out: dir.path().join("csv_only"),
        formats: vec![Format::Csv],
        ..RunConfig::default()
    };
    emit_results(&fake_trials(1), &config).unwrap();
    assert!(config.out.join(TRIALS_CSV).exists());
    assert!(!config.out.join(RESULTS_JSON).exists());
    assert!(emit_results(&ExperimentResult::from_trials(Vec::new()), &config).is_err());
}

fn digest(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn pipeline_through_saved_model_leaves_inputs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = siamese(d, &["synth", "--out", "data"]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    let source_before = digest(&d.join("data/source.csv"));
    let target_before = digest(&d.join("data/target.csv"));

    let out = siamese(d, &["pretrain", "--source", "data/source.csv", "--out", "model"]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    assert!(d.join("model/model.json").exists());

    let out = siamese(
        d,
        &[
            "finetune",
            "--distance-loss",
            "--model",
            "model/model.json",
            "--target",
            "data/target.csv",
            "--adopted-speakers",
            "2",
            "--frozen-layers",
            "0,1",
            "--repetitions",
            "2",
            "--out",
            "ft",
        ],
    );
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    let trials = std::fs::read_to_string(d.join("ft").join(TRIALS_CSV)).unwrap();
    assert_eq!(trials.lines().count(), 1 + 4);
    assert!(trials.lines().skip(1).all(|l| l.starts_with("finetune_distance_loss,")));

    let out = siamese(d, &["oodt", "--model", "model/model.json", "--source", "data/source.csv", "--target", "data/target.csv", "--out", "oodt"]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    let echo = std::fs::read_to_string(d.join("oodt/config.toml")).unwrap();
    assert!(echo.contains("command = \"oodt\"") && echo.contains("master_seed = 0"), "{echo}");

    assert_eq!(digest(&d.join("data/source.csv")), source_before);
    assert_eq!(digest(&d.join("data/target.csv")), target_before);

    std::fs::write(d.join("bad_model.json"), "{\"params\": 1}").unwrap();
    let out = siamese(d, &["oodt", "--model", "bad_model.json", "--out", "x"]);
    assert_eq!(code(&out), 1, "{}", text(&out.stderr));
}
