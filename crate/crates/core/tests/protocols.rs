//! End-to-end protocol behaviour on synthetic domains.

use siamese_core::data::{synth_generate, Dataset, SynthConfig};
use siamese_core::protocols::{
    mean_uar, pretrain_seed, run_experiment, run_idt, run_oodt, run_sweep, train_oodt, ExperimentConfig,
    ExperimentResult, Protocol, TrainConfig, TrainingConfig,
};

fn domain(seed: u64, speakers: usize, shift: f64, separation: f64) -> Dataset {
    synth_generate(&SynthConfig {
        speaker_count: speakers,
        samples_per_speaker_per_class: 6,
        class_center_separation: separation,
        noise_scale: 0.6,
        domain_shift: shift,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn quick_training() -> TrainingConfig {
    TrainingConfig {
        pretrain: TrainConfig {
            epochs: 10,
            batches_per_epoch: 8,
            batch_pairs: 32,
            ..TrainConfig::pretrain_default()
        },
        finetune: TrainConfig {
            epochs: 10,
            ..TrainConfig::finetune_default()
        },
        ..TrainingConfig::default()
    }
}

fn sweep_config() -> ExperimentConfig {
    ExperimentConfig {
        protocols: vec![Protocol::FineTune, Protocol::FineTuneDistanceLoss],
        adopted_speaker_counts: vec![2],
        repetitions: 10,
        master_seed: 17,
        training: quick_training(),
        ..ExperimentConfig::default()
    }
}

fn without_timing(mut r: ExperimentResult) -> ExperimentResult {
    r.trials.iter_mut().for_each(|t| t.wall_time_ms = 0.0);
    r
}

#[test]
fn source_model_transfers_to_an_unshifted_target() {
    let source = domain(1, 8, 0.0, 6.0);
    let target = domain(2, 6, 0.0, 6.0);
    let result = run_oodt(&ExperimentConfig::default(), &source, &target, None).unwrap();
    assert_eq!(result.trials.len(), 1);
    let u = result.trials[0].uar.unwrap();
    assert!(u > 0.9, "{u}");
}

#[test]
fn in_domain_runs_one_fold_per_speaker() {
    let target = domain(3, 4, 0.0, 8.0);
    let folds = run_idt(&target, &TrainingConfig::default(), 4).unwrap();
    let speakers: Vec<&str> = folds.iter().map(|f| f.test_speaker.as_str()).collect();
    assert_eq!(speakers, target.speakers());
    assert!(mean_uar(&folds) > 0.9, "{}", mean_uar(&folds));
}

#[test]
fn sweep_has_one_row_per_cell_and_repetition() {
    let source = domain(5, 8, 0.0, 4.0);
    let target = domain(6, 6, 1.0, 4.0);
    let config = sweep_config();
    let result = run_experiment(&config, &source, &target).unwrap();
    assert_eq!(result.trials.len(), 60);
    assert!(result.trials.iter().all(|t| t.error.is_none()));
    assert_eq!(result.aggregates.len(), 6);

    for a in &result.aggregates {
        let values: Vec<f64> = result
            .trials
            .iter()
            .filter(|t| t.protocol == a.protocol && t.frozen_layers == a.frozen_layers)
            .map(|t| t.uar.unwrap())
            .collect();
        assert_eq!(values.len(), 10);
        let mean = values.iter().sum::<f64>() / 10.0;
        assert!((a.mean_uar - mean).abs() <= 1e-12);
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
        assert!((a.std_uar - var.sqrt()).abs() <= 1e-12);
    }

    // Paired trials share the split and the fine-tuning seed.
    let seeds = |p: Protocol| -> Vec<u64> { result.trials.iter().filter(|t| t.protocol == p).map(|t| t.seed).collect() };
    assert_eq!(seeds(Protocol::FineTune), seeds(Protocol::FineTuneDistanceLoss));

    let again = run_experiment(&config, &source, &target).unwrap();
    assert_eq!(without_timing(again), without_timing(result.clone()));

    // Reusing the same pretrained model gives the same sweep.
    let model = train_oodt(&source, &config.training, pretrain_seed(config.master_seed)).unwrap();
    let reused = run_sweep(&config, None, &target, Some(&model)).unwrap();
    assert_eq!(without_timing(reused), without_timing(result));
}

#[test]
fn sweep_rows_do_not_depend_on_thread_count() {
    let source = domain(7, 6, 0.0, 4.0);
    let target = domain(8, 5, 1.0, 4.0);
    let config = ExperimentConfig {
        protocols: vec![Protocol::Oodt, Protocol::FineTune, Protocol::Idt],
        frozen_layers: vec![0, 2],
        adopted_speaker_counts: vec![2, 3],
        repetitions: 2,
        training: quick_training(),
        ..ExperimentConfig::default()
    };
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        without_timing(pool.install(|| run_experiment(&config, &source, &target).unwrap()))
    };
    let one = run(1);
    assert_eq!(one.trials.len(), 2 * 2 + 2 * 2 * 2 + 5);
    assert_eq!(one, run(3));
}

#[test]
fn large_shift_hurts_the_source_model() {
    let source = domain(11, 8, 0.0, 6.0);
    let target = synth_generate(&SynthConfig {
        speaker_count: 6,
        samples_per_speaker_per_class: 6,
        class_center_separation: 6.0,
        noise_scale: 0.6,
        domain_shift: 6.0,
        domain_distortion: 1.0,
        seed: 12,
        ..SynthConfig::default()
    })
    .unwrap();
    let u = run_oodt(&ExperimentConfig::default(), &source, &target, None).unwrap().trials[0]
        .uar
        .unwrap();
    assert!(u < 0.5, "{u}");
}

#[test]
fn infeasible_cells_are_reported() {
    let source = domain(9, 4, 0.0, 4.0);
    let target = domain(10, 3, 0.0, 4.0);
    let config = ExperimentConfig {
        adopted_speaker_counts: vec![4],
        repetitions: 1,
        training: quick_training(),
        ..ExperimentConfig::default()
    };
    assert!(run_experiment(&config, &source, &target).is_err());
    let frozen = ExperimentConfig {
        frozen_layers: vec![3],
        adopted_speaker_counts: vec![2],
        ..config
    };
    assert!(matches!(frozen.validate(), Err(siamese_core::Error::InvalidConfig(_))));
    let single = ExperimentConfig {
        adopted_speaker_counts: vec![1],
        frozen_layers: vec![0],
        ..frozen
    };
    let err = single.validate().unwrap_err();
    assert!(err.to_string().contains("same-emotion pairs"), "{err}");
}
