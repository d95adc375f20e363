//! Library-level behavior of the commands: output files, reproducibility,
//! sweeps, histograms and dataset directories.

use std::fs;
use std::path::Path;

use lobit_cli::commands::histogram::{cmd_histogram, Quantity};
use lobit_cli::commands::sweep::{cmd_sweep, parse_grid};
use lobit_cli::commands::train::{cmd_train, initial_state, run_training, METRICS_HEADER};
use lobit_cli::commands::eval::cmd_eval;
use lobit_cli::dataset::{load_dataset, write_dataset_dir, write_array, DType, DatasetSpec};
use lobit_cli::RunConfig;
use lobit_core::engine::Checkpoint;

const DATA: &str = "synthetic:classes=2,train=96,test=48,size=8,noise=0.2,seed=3";

fn config(out: &Path, pairs: &[(&str, &str)]) -> RunConfig {
    let mut all: Vec<(String, String)> = vec![
        ("model".into(), "conv:4:3,pool:2,conv:6:3,fc".into()),
        ("data".into(), DATA.into()),
        ("epochs".into(), "2".into()),
        ("batch_size".into(), "16".into()),
        ("lr".into(), "0.01".into()),
        ("out".into(), out.display().to_string()),
    ];
    all.extend(pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    RunConfig::from_sources(None, &all).unwrap()
}

#[test]
fn zero_epochs_writes_header_and_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[("epochs", "0"), ("w_bits", "1"), ("a_bits", "2"), ("g_bits", "4")]);
    cmd_train(&cfg).unwrap();
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics, format!("{METRICS_HEADER}\n"));
    let (train, _) = load_dataset(&cfg.data, None).unwrap();
    let init = initial_state(&cfg, train.input_shape(), 2).unwrap();
    let saved = Checkpoint::load(&dir.path().join("best.ckpt")).unwrap();
    assert_eq!(saved, init.to_checkpoint());
    let text = fs::read_to_string(dir.path().join("config.txt")).unwrap();
    assert_eq!(RunConfig::from_sources(Some(&dir.path().join("config.txt")), &[]).unwrap(), cfg);
    assert!(text.contains("w_bits = 1"));
}

#[test]
fn identical_configs_give_identical_metrics_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pairs = [("w_bits", "1"), ("a_bits", "2"), ("g_bits", "4")];
    cmd_train(&config(a.path(), &pairs)).unwrap();
    cmd_train(&config(b.path(), &pairs)).unwrap();
    let read = |p: &Path| fs::read(p.join("metrics.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_eq!(fs::read_to_string(a.path().join("metrics.csv")).unwrap().lines().count(), 3);
    assert_eq!(fs::read_to_string(a.path().join("timing.csv")).unwrap().lines().count(), 3);
}

#[test]
fn fused_schedule_gives_the_same_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pairs = [("w_bits", "2"), ("a_bits", "2"), ("g_bits", "3")];
    let ra = cmd_train(&config(a.path(), &pairs)).unwrap();
    let mut fused = pairs.to_vec();
    fused.push(("fused_backward", "true"));
    let rb = cmd_train(&config(b.path(), &fused)).unwrap();
    assert_eq!(ra.state.network, rb.state.network);
    assert_eq!(fs::read(a.path().join("metrics.csv")).unwrap(), fs::read(b.path().join("metrics.csv")).unwrap());
}

#[test]
fn single_point_sweep_matches_train() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = [("w_bits", "1"), ("a_bits", "2"), ("g_bits", "4")];
    let train_dir = dir.path().join("train");
    let report = cmd_train(&config(&train_dir, &pairs)).unwrap();
    let sweep_dir = dir.path().join("sweep");
    let rows = cmd_sweep(&config(&sweep_dir, &[]), &parse_grid("1,2,4").unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].final_accuracy(), Some(report.final_accuracy));
    assert_eq!(
        fs::read(train_dir.join("metrics.csv")).unwrap(),
        fs::read(sweep_dir.join("w1_a2_g4/metrics.csv")).unwrap()
    );
    let csv = fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("1,2,4,false,false,6,2,1,"));
}

#[test]
fn failing_cell_does_not_stop_the_sweep() {
    let dir = tempfile::tempdir().unwrap();
    // a 5x5 pool window does not fit the 4x4 map after the first pool
    let mut cfg = config(dir.path(), &[("model", "conv:4:3,pool:2,conv:4:3,pool:5,fc")]);
    cfg.epochs = 1;
    let rows = cmd_sweep(&cfg, &parse_grid("1,2,4;32,32,32").unwrap()).unwrap();
    assert!(rows.iter().all(|r| r.result.is_err()));
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.contains(",failed: ")).count(), 2);
}

#[test]
fn histograms_reflect_bitwidths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[("w_bits", "1"), ("a_bits", "2"), ("g_bits", "4"), ("quantize_last", "true")]);
    cmd_train(&cfg).unwrap();
    let ck = dir.path().join("last.ckpt");
    let hist = |layer: &str, what: Quantity, batch: usize| {
        cmd_histogram(&ck, layer, what, &cfg.data, None, batch, 32, &dir.path().join("h.csv")).unwrap()
    };
    for layer in ["conv2", "fc"] {
        assert_eq!(hist(layer, Quantity::Weights, 8).nonzero_bins(), 2, "{layer}");
    }
    // the first layer keeps full-precision weights by default
    assert!(hist("conv1", Quantity::Weights, 8).nonzero_bins() > 2);
    for layer in ["conv1", "conv2"] {
        let h = hist(layer, Quantity::Activations, 16);
        assert!(h.nonzero_bins() <= 4 && h.nonzero_bins() >= 1);
    }
    let g = hist("conv2", Quantity::Gradients, 16);
    assert!(g.counts.iter().sum::<u64>() > 0);
    let empty = hist("conv2", Quantity::Activations, 0);
    assert!(empty.counts.is_empty());
    assert_eq!(fs::read_to_string(dir.path().join("h.csv")).unwrap(), "bin_low,bin_high,count\n");
    let err = cmd_histogram(&ck, "conv9", Quantity::Weights, &cfg.data, None, 4, 8, &dir.path().join("x.csv"))
        .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn eval_reproduces_training_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[("w_bits", "2"), ("a_bits", "2"), ("g_bits", "6")]);
    let report = cmd_train(&cfg).unwrap();
    let r = cmd_eval(&dir.path().join("last.ckpt"), &cfg.data, None, 10).unwrap();
    assert_eq!(r.accuracy, report.final_accuracy);
    assert_eq!(r.samples, 48);
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec: DatasetSpec = DATA.parse().unwrap();
    let (train, test) = load_dataset(&spec, None).unwrap();
    write_dataset_dir(dir.path(), &train, &test).unwrap();
    let (train2, test2) = load_dataset(&DatasetSpec::Dir(dir.path().to_path_buf()), None).unwrap();
    assert_eq!(train2.labels, train.labels);
    assert_eq!(test2.labels, test.labels);
    // stored as f32
    for (a, b) in train2.images.data().iter().zip(train.images.data()) {
        assert_eq!(*a, *b as f32 as f64);
    }
    let (small, _) = load_dataset(&DatasetSpec::Dir(dir.path().to_path_buf()), Some(5)).unwrap();
    assert_eq!(small.images.shape(), &[96, 1, 5, 5]);

    // u8 pixels are scaled into [0, 1]
    write_array(&dir.path().join("train_images.lbd"), DType::U8, &[2, 2, 2], &[0.0, 255.0, 51.0, 102.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    write_array(&dir.path().join("train_labels.lbd"), DType::U8, &[2], &[1.0, 0.0]).unwrap();
    write_array(&dir.path().join("test_images.lbd"), DType::U8, &[1, 2, 2], &[0.0; 4]).unwrap();
    write_array(&dir.path().join("test_labels.lbd"), DType::U8, &[1], &[2.0]).unwrap();
    let (tr, te) = load_dataset(&DatasetSpec::Dir(dir.path().to_path_buf()), None).unwrap();
    assert_eq!(&tr.images.data()[..4], &[0.0, 1.0, 0.2, 0.4]);
    assert_eq!((tr.classes, te.classes), (3, 3));

    // label count mismatch
    write_array(&dir.path().join("test_labels.lbd"), DType::U8, &[2], &[0.0, 1.0]).unwrap();
    let err = load_dataset(&DatasetSpec::Dir(dir.path().to_path_buf()), None).unwrap_err();
    assert_eq!(err.exit_code(), 3);

    // float pixels outside [0, 1]
    write_array(&dir.path().join("test_labels.lbd"), DType::U8, &[1], &[0.0]).unwrap();
    write_array(&dir.path().join("test_images.lbd"), DType::F32, &[1, 2, 2], &[0.0, 1.5, 0.0, 0.0]).unwrap();
    assert!(load_dataset(&DatasetSpec::Dir(dir.path().to_path_buf()), None).is_err());
}

#[test]
fn small_two_class_task_is_learned_at_full_and_low_precision() {
    let spec: DatasetSpec = "synthetic:classes=2,train=800,test=400,size=8,noise=0.2,seed=1".parse().unwrap();
    let (train, test) = load_dataset(&spec, None).unwrap();
    let run = |w: &str, a: &str, g: &str| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(
            dir.path(),
            &[("model", "conv:8:3,pool:2,conv:8:3,fc"), ("epochs", "5"), ("w_bits", w), ("a_bits", a), ("g_bits", g)],
        );
        run_training(&cfg, &train, &test, None).unwrap().final_accuracy
    };
    let full = run("32", "32", "32");
    let low = run("1", "2", "4");
    assert!(full > 0.9, "full precision accuracy {full}");
    assert!((full - low).abs() <= 0.05, "full {full} vs (1,2,4) {low}");
}
