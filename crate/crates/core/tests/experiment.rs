use std::path::Path;

use flic_core::experiment::{
    evaluate_checkpoint, onboard_command, parse_config, read_dataset, run_command, write_dataset, write_metrics, Checkpoint,
    ExperimentConfig, Mode, METRICS_HEADER,
};
use flic_core::federation::MetricsRecord;
use flic_core::FlicError;
use proptest::prelude::*;

fn small(mode: Mode) -> ExperimentConfig {
    ExperimentConfig {
        mode,
        seed: 21,
        num_classes: 6,
        samples_per_class: 60,
        num_clients: 6,
        classes_per_client: 2,
        map_dim_min: 3,
        map_dim_max: 8,
        rounds: 3,
        participation: 0.5,
        local_steps: 3,
        batch_size: 16,
        latent_dim: 4,
        hidden_dim: 8,
        onboard_rounds: 2,
        ..Default::default()
    }
}

fn record(round: usize, x: f64) -> MetricsRecord {
    MetricsRecord {
        round,
        train_loss: x,
        client_accuracy: vec![0.5, 0.75],
        mean_accuracy: 0.625,
        min_accuracy: 0.5,
        max_accuracy: 0.75,
        wall_ms: 12.345678,
        bytes_up: 1024,
        bytes_down: 2048,
    }
}

fn without_wall(path: &Path) -> Vec<Vec<String>> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    let headers = reader.headers().unwrap().clone();
    let wall = headers.iter().position(|h| h == "wall_ms").unwrap();
    reader
        .records()
        .map(|r| {
            r.unwrap()
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != wall)
                .map(|(_, f)| f.to_string())
                .collect()
        })
        .collect()
}

#[test]
fn config_file_round_trips_through_toml() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "rounds = 7\nlambda1 = 0.25\nmode = \"local\"\nanchor_scale = 1.5\n").unwrap();
    let cfg = parse_config(&path).unwrap();
    assert_eq!((cfg.rounds, cfg.lambda1, cfg.mode, cfg.anchor_scale), (7, 0.25, Mode::Local, Some(1.5)));
    std::fs::write(&path, cfg.to_toml()).unwrap();
    assert_eq!(parse_config(&path).unwrap(), cfg);
}

#[test]
fn config_errors_name_the_key_or_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "participation = 0.0\n").unwrap();
    match parse_config(&path) {
        Err(FlicError::Config { key, .. }) => assert_eq!(key, "participation"),
        other => panic!("{other:?}"),
    }
    std::fs::write(&path, "local_steps = \"ten\"\n").unwrap();
    match parse_config(&path) {
        Err(FlicError::Config { key, .. }) => assert_eq!(key, "local_steps"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_config(&dir.path().join("missing.toml")), Err(FlicError::Io { .. })));
}

#[test]
fn metrics_file_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    write_metrics(&[], &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), format!("{METRICS_HEADER}\n"));

    write_metrics(&[record(0, 0.5)], &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2);
    let mut reader = csv::Reader::from_path(&path).unwrap();
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>().join(","), METRICS_HEADER);
    assert_eq!(reader.records().count(), 1);

    assert!(write_metrics(&[record(1, 0.5), record(1, 0.4)], &path).is_err());
    assert!(matches!(
        write_metrics(&[], &dir.path().join("no/such/dir/m.csv")),
        Err(FlicError::Io { .. })
    ));
}

proptest! {
    #[test]
    fn metrics_parse_back_to_six_digits(
        mantissa in -1.0e6f64..1.0e6,
        exponent in -12i32..12,
        acc in 0.0f64..=1.0,
        wall in 0.0f64..1e7,
    ) {
        let x = mantissa * 10f64.powi(exponent);
        let r = MetricsRecord { train_loss: x, mean_accuracy: acc, min_accuracy: acc, max_accuracy: acc, wall_ms: wall, ..record(3, 0.0) };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics(std::slice::from_ref(&r), &path).unwrap();
        let mut reader = csv::Reader::from_path(&path).unwrap();
        let row = reader.records().next().unwrap().unwrap();
        let parsed: Vec<f64> = (1..6).map(|i| row[i].parse().unwrap()).collect();
        for (got, want) in parsed.iter().zip([x, acc, acc, acc, wall]) {
            prop_assert!((got - want).abs() <= 5e-6 * want.abs() + 1e-300, "{got} vs {want}");
        }
        prop_assert_eq!(row[0].parse::<usize>().unwrap(), 3);
        prop_assert_eq!(row[6].parse::<u64>().unwrap(), 1024);
    }
}

#[test]
fn dataset_directory_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Mode::Flic);
    let data = flic_core::datagen::generate(&cfg.dataset_spec()).unwrap();
    write_dataset(dir.path(), &data, cfg.num_classes, Some(&cfg.dataset_spec())).unwrap();
    let (manifest, back) = read_dataset(dir.path()).unwrap();
    assert_eq!(manifest.num_classes, 6);
    assert_eq!(manifest.clients.len(), data.len());
    assert_eq!(back, data);
}

#[test]
fn flic_run_writes_everything_and_reruns_identically() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = small(Mode::Flic);
    let summary = run_command(&cfg, a.path()).unwrap();
    run_command(&cfg, b.path()).unwrap();
    for name in ["metrics.csv", "summary.json", "messages.log", "checkpoint/model.ckpt", "dataset/manifest.json"] {
        assert!(a.path().join(name).is_file(), "{name}");
    }
    assert_eq!(without_wall(&a.path().join("metrics.csv")), without_wall(&b.path().join("metrics.csv")));
    assert_eq!(without_wall(&a.path().join("metrics.csv")).len(), cfg.rounds);
    for name in ["messages.log", "checkpoint/model.ckpt"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
    }
    assert!(summary.message_count > 0);

    // checkpoint round trip reproduces the final accuracies
    let eval = evaluate_checkpoint(&a.path().join("checkpoint"), &a.path().join("dataset")).unwrap();
    assert_eq!(Some(eval.per_client), summary.client_accuracy);

    let report = onboard_command(&cfg, &a.path().join("checkpoint"), &a.path().join("dataset"), 0).unwrap();
    assert_eq!(report.steps, cfg.onboard_rounds * cfg.local_steps);
    assert!(report.reference_accuracy.is_some());
    assert!(onboard_command(&cfg, &a.path().join("checkpoint"), &a.path().join("dataset"), 99).is_err());
}

#[test]
fn local_run_has_no_messages_and_private_alphas() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run_command(&small(Mode::Local), dir.path()).unwrap();
    assert_eq!(summary.message_count, 0);
    assert_eq!((summary.bytes_up, summary.bytes_down), (0, 0));
    let log = std::fs::read_to_string(dir.path().join("messages.log")).unwrap();
    assert_eq!(log.lines().count(), 1, "header only: {log}");
    let ckpt = Checkpoint::load(&dir.path().join("checkpoint")).unwrap();
    assert_eq!(ckpt.alphas.as_ref().map(Vec::len), Some(6));
    let eval = evaluate_checkpoint(&dir.path().join("checkpoint"), &dir.path().join("dataset")).unwrap();
    assert_eq!(Some(eval.per_client), summary.client_accuracy);
}

#[test]
fn theory_run_writes_a_decreasing_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        mode: Mode::Theory,
        ..Default::default()
    };
    let summary = run_command(&cfg, dir.path()).unwrap();
    let mut reader = csv::Reader::from_path(dir.path().join("trace.csv")).unwrap();
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), ["round", "dist", "mse"]);
    let dist: Vec<f64> = reader.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
    assert_eq!(dist.len(), cfg.theory_rounds + 1);
    assert!(dist[1..].windows(2).all(|w| w[1] < w[0]));
    assert!(summary.final_trace.unwrap().mse <= 1e-3);
    assert!(!dir.path().join("checkpoint").exists());
}

#[test]
fn reading_a_run_against_the_wrong_data_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    run_command(&small(Mode::Flic), dir.path()).unwrap();
    let other = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        num_clients: 4,
        ..small(Mode::Flic)
    };
    let data = flic_core::datagen::generate(&cfg.dataset_spec()).unwrap();
    write_dataset(other.path(), &data, cfg.num_classes, None).unwrap();
    assert!(evaluate_checkpoint(&dir.path().join("checkpoint"), other.path()).is_err());

    let ckpt = dir.path().join("checkpoint/model.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&ckpt, bytes).unwrap();
    assert!(matches!(
        evaluate_checkpoint(&dir.path().join("checkpoint"), &dir.path().join("dataset")),
        Err(FlicError::Format { .. })
    ));
}
