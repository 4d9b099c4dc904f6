use super::*;
use crate::datagen::BumpDatasetSpec;
use crate::testutil::tiny_deep;

fn deep_run(epochs: usize) -> RunConfig {
    let cfg = tiny_deep(Architecture::Deep2);
    RunConfig {
        dataset: DatasetSpec::Rigid(crate::datagen::RigidDatasetSpec {
            window: 8,
            stills: 2,
            still_size: 20,
            count: 12,
            ..Default::default()
        }),
        model: ModelSpec::Custom { config: cfg },
        lambda: None,
        delta: None,
        optimizer: SgdConfig::default(),
        batch_size: 4,
        epochs,
        seed: 3,
        precision: Precision::F64,
    }
}

/// Shallow-1 over a 12-pixel line, one pool group per filter.
pub(crate) fn bump_run(count: usize, epochs: usize, seed: u64) -> RunConfig {
    RunConfig {
        dataset: DatasetSpec::Bump(BumpDatasetSpec {
            n_pixels: 12,
            sigma: 1.0,
            speed_min: 0.3,
            speed_max: 0.8,
            n_frames: 12,
            count,
        }),
        model: ModelSpec::Shallow {
            arch: Architecture::Shallow1,
            size: ShallowSize {
                input_shape: [1, 1, 12],
                filters: 4,
                kernel: 5,
                group: [1, 1, 12],
                beta: 5.0,
            },
        },
        lambda: None,
        delta: None,
        optimizer: SgdConfig {
            learning_rate: 0.05,
            momentum: 0.9,
        },
        batch_size: 8,
        epochs,
        seed,
        precision: Precision::F64,
    }
}

#[test]
fn config_json_round_trip_and_defaults() {
    let run = bump_run(10, 2, 1);
    let text = serde_json::to_string(&run).unwrap();
    assert_eq!(RunConfig::from_json(&text).unwrap(), run);
    let short = r#"{"dataset": {"generator": "bump"},
        "model": {"family": "deep", "arch": "deep-2"}, "epochs": 1}"#;
    let run = RunConfig::from_json(short).unwrap();
    assert_eq!(run.batch_size, 16);
    assert_eq!(run.optimizer, SgdConfig::default());
    assert_eq!(run.model_config().unwrap(), ModelConfig::preset(Architecture::Deep2).unwrap());
}

#[test]
fn bad_configs_name_the_field() {
    let mut run = deep_run(1);
    run.batch_size = 0;
    assert!(matches!(run.model_config(), Err(Error::Config { field, .. }) if field == "batch_size"));
    let mut run = deep_run(1);
    run.optimizer.momentum = 1.5;
    assert!(matches!(run.model_config(), Err(Error::Config { field, .. }) if field == "momentum"));
    let mut run = deep_run(1);
    run.delta = Some(DeltaConfig {
        dim: 40,
        ..Default::default()
    });
    assert!(matches!(run.model_config(), Err(Error::Config { field, .. }) if field == "delta.dim"));
    assert!(RunConfig::from_json("{\"epochs\": 1}").is_err());
}

#[test]
fn zero_epochs_saves_initial_weights() {
    let run = deep_run(0);
    let dir = tempfile::tempdir().unwrap();
    let out = run_train(&run, dir.path()).unwrap();
    let ck = Checkpoint::load(&dir.path().join("checkpoint")).unwrap();
    let init = initial_params(&out.config, None, run.seed).unwrap();
    for ((_, a), (_, b)) in ck.params.iter().zip(init.iter()) {
        assert!(a.bit_eq(&b.map(|v| v as f32 as f64)));
    }
    assert_eq!(ck.manifest.iterations, 0);
    let metrics = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(metrics, "epoch,l2_error,input_cosine,code_cosine,loss\n");
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn identical_runs_are_byte_identical() {
    let mut run = deep_run(2);
    run.delta = Some(DeltaConfig {
        dim: 2,
        k: 2,
        ..Default::default()
    });
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_train(&run, a.path()).unwrap();
    run_train(&run, b.path()).unwrap();
    assert_eq!(dir_bytes(&a.path().join("checkpoint")), dir_bytes(&b.path().join("checkpoint")));
    assert_eq!(fs::read(a.path().join(METRICS_FILE)).unwrap(), fs::read(b.path().join(METRICS_FILE)).unwrap());
    assert_eq!(ra.train.metrics.len(), 2);
    assert_eq!(ra.train.delta_states.len(), 12);
    assert_eq!(read_metrics_csv(&a.path().join(METRICS_FILE)).unwrap(), ra.train.metrics);
    let ck = Checkpoint::load(&a.path().join("checkpoint")).unwrap();
    assert_eq!(ck.delta_config().unwrap().dim, 2);
    assert!(ck.manifest.w1_layout.is_some());
}

#[test]
fn divergence_reports_the_epoch_and_keeps_no_checkpoint() {
    let mut run = deep_run(3);
    run.optimizer.learning_rate = 1e12;
    let dir = tempfile::tempdir().unwrap();
    let err = run_train(&run, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 1..=3, .. }), "{err}");
    assert!(err.is_numeric());
    assert!(!dir.path().join("checkpoint").exists());
}

#[test]
fn checkpoint_refuses_non_finite_weights() {
    let run = deep_run(0);
    let cfg = run.model_config().unwrap();
    let mut params = initial_params(&cfg, None, 0).unwrap();
    params.tensors_mut().next().unwrap().data_mut()[0] = f64::NAN;
    let dir = tempfile::tempdir().unwrap();
    assert!(Checkpoint::new(&run, &cfg, params, 0).save(dir.path()).is_err());
}

#[test]
fn frame_shape_mismatch_is_a_config_error() {
    let mut run = bump_run(4, 1, 0);
    run.model = ModelSpec::Custom {
        config: tiny_deep(Architecture::Deep2),
    };
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(run_train(&run, dir.path()), Err(Error::Config { .. })));
}

#[test]
fn bump_training_halves_the_prediction_error() {
    let run = bump_run(200, 20, 0);
    let cfg = run.model_config().unwrap();
    let triplets = datagen::generate(&run.dataset, run.seed).unwrap();
    let init = initial_params(&cfg, None, run.seed).unwrap();
    let before = crate::eval::prediction_error(&triplets, &init, &cfg, None).unwrap();
    let out = train(&run, &cfg, &triplets, |_, _| {}).unwrap();
    let after = crate::eval::prediction_error(&triplets, &out.params, &cfg, None).unwrap();
    assert!(after <= 0.5 * before, "{before} -> {after}");
}
