use std::fs;

use mrmf_core::config::ExperimentConfig;
use mrmf_core::experiment::{run_experiment, ExperimentError, RunMode, RunSummary};
use mrmf_core::fusion::load_checkpoint;
use mrmf_core::train::{read_metrics_file, Phase};

const CONFIG: &str = r#"
name = "tiny"
output_dir = "out"

[data.synthetic]
extents = [32]
channels = 2
label_len = 3
components = 1
max_frequency = 2
amplitude = [0.5, 1.5]
seed = 9
samples = 48
splits = [0.75, 0.25, 0.0]

[model]
seed = 2
layers = [
  { kind = "conv", in_channels = 2, out_channels = 4, kernel = [3], padding = [1] },
  { kind = "batch_norm", channels = 4 },
  { kind = "relu" },
  { kind = "avg_pool", kernel = [2] },
  { kind = "flatten" },
  { kind = "fc", in_features = 64, out_features = 8 },
  { kind = "tanh" },
  { kind = "fc", in_features = 8, out_features = 3 },
]

[[stages]]
coarse_factors = [4]
dense_factors = [2]
coarse = { stop = { epsilon = 0.001, patience = 2, max_epochs = 4 }, optimizer = { kind = "adam", lr = 0.01 }, batch_size = 8, seed = 1 }
dense = { stop = { epsilon = 0.001, patience = 2, max_epochs = 3 }, optimizer = { kind = "adam", lr = 0.01 }, batch_size = 8, workers = 2, seed = 2 }

[[stages]]
coarse_factors = [2]
dense_factors = [1]
coarse = { stop = { epsilon = 0.001, patience = 2, max_epochs = 2 }, optimizer = { kind = "sgd", lr = 0.05, momentum = 0.9 }, batch_size = 8, seed = 3 }
dense = { stop = { epsilon = 0.001, patience = 2, max_epochs = 3 }, optimizer = { kind = "adam", lr = 0.01 }, batch_size = 8, seed = 4 }

[finetune]
stop = { epsilon = 0.0001, patience = 2, max_epochs = 5 }
optimizer = { kind = "adam", lr = 0.005 }
batch_size = 8
workers = 3
seed = 5
"#;

#[test]
fn artifacts_match_the_returned_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(CONFIG, tmp.path()).unwrap();
    let out = run_experiment(&cfg, RunMode::Mrmf).unwrap();
    assert_eq!(out.dir, tmp.path().join("out/mrmf"));

    let records = read_metrics_file(out.dir.join("metrics.csv")).unwrap();
    assert_eq!(records, out.records);
    let phases: Vec<(usize, Phase)> = records.iter().map(|r| (r.stage, r.phase)).collect();
    assert_eq!(phases.first(), Some(&(0, Phase::Coarse)));
    assert_eq!(phases.last(), Some(&(2, Phase::Finetune)));

    let model = load_checkpoint(out.dir.join("final.mrc")).unwrap();
    assert!(model.bit_eq(&out.model));
    assert_eq!(model.input_shape(), &[32, 2]);
    let fused = load_checkpoint(out.dir.join("stage0_fused.mrc")).unwrap();
    assert_eq!(fused.input_shape(), &[16, 2]);

    let summary: RunSummary = toml::from_str(&fs::read_to_string(out.dir.join("summary.toml")).unwrap()).unwrap();
    assert_eq!(summary, out.summary);
    assert_eq!(summary.stages.len(), 2);
    assert_eq!(summary.stages[1].checkpoint.as_deref(), Some("stage1_fused.mrc"));
    let sum: f64 = records.iter().map(|r| r.epoch_seconds).sum();
    assert!((summary.total_seconds - sum).abs() < 1e-9);
}

#[test]
fn rerun_replaces_artifacts_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(CONFIG, tmp.path()).unwrap();
    let dir = run_experiment(&cfg, RunMode::Baseline).unwrap().dir;
    let first = fs::read(dir.join("metrics.csv")).unwrap();
    run_experiment(&cfg, RunMode::Baseline).unwrap();
    assert_eq!(fs::read(dir.join("metrics.csv")).unwrap(), first);
}

#[test]
fn non_finite_loss_leaves_an_abort_record() {
    let tmp = tempfile::tempdir().unwrap();
    let text = CONFIG.replace(
        "optimizer = { kind = \"adam\", lr = 0.005 }",
        "optimizer = { kind = \"sgd\", lr = 1e15 }",
    );
    let cfg = ExperimentConfig::parse(&text, tmp.path()).unwrap();
    match run_experiment(&cfg, RunMode::Mrmf) {
        Err(ExperimentError::Aborted { path, .. }) => {
            let text = fs::read_to_string(&path).unwrap();
            assert!(text.contains("finetune"), "{text}");
            assert!(!path.with_file_name("final.mrc").exists());
        }
        other => panic!("expected an abort, got {other:?}"),
    }
}
