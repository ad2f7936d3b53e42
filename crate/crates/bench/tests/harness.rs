use std::fs;
use std::process::Command;

use corrattack_bench::config::{BenchConfig, DatasetSource};
use corrattack_bench::dataset::{load_dataset, save_dataset, synthetic_dataset, Ingest, LABELS_FILE};
use corrattack_bench::probe::{bo_rank_probe, ProbeConfig, RewardField};
use corrattack_bench::report::CSV_HEADER;
use corrattack_bench::runner::{random_block_baseline, run_benchmark, run_samples, ModelSource};
use corrattack_bench::SyntheticKind;
use corrattack_core::attack::{hierarchical_attack, AttackConfig, AttackMode, InvariantAudit, Selection};
use corrattack_core::image::Shape;
use corrattack_core::oracle::{argmax, CountingOracle, LogitsModel, LogitsOracle, BENCH_CLASSES};

fn csv_of(config: &BenchConfig) -> String {
    let mut buf = Vec::new();
    run_benchmark(config).unwrap().write_csv(&mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

fn small_config(count: usize, budget: usize) -> BenchConfig {
    let mut c = BenchConfig::default();
    c.dataset = DatasetSource::Synthetic { count, seed: 11 };
    c.attack.query_budget = budget;
    c
}

#[test]
fn dataset_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let shape = Shape::new(3, 32, 32);
    let source = ModelSource::synthetic(SyntheticKind::Linear, shape, 1);
    let mut samples = synthetic_dataset(20, 5, shape, &mut source.handle()).unwrap();
    samples[3].target = Some((samples[3].label + 1) % BENCH_CLASSES);
    save_dataset(dir.path(), &samples).unwrap();
    let ingest = Ingest { channels: 3, size: None, block: 32, num_classes: Some(BENCH_CLASSES) };
    let loaded = load_dataset(dir.path(), &dir.path().join(LABELS_FILE), &ingest).unwrap();
    assert_eq!(loaded, samples);

    let gray = Shape::new(1, 16, 16);
    let source = ModelSource::synthetic(SyntheticKind::Mlp, gray, 1);
    let samples = synthetic_dataset(3, 6, gray, &mut source.handle()).unwrap();
    let gdir = dir.path().join("gray");
    save_dataset(&gdir, &samples).unwrap();
    let ingest = Ingest { channels: 1, size: None, block: 16, num_classes: None };
    assert_eq!(load_dataset(&gdir, &gdir.join(LABELS_FILE), &ingest).unwrap(), samples);
}

#[test]
fn empty_and_singleton_directories() {
    let dir = tempfile::tempdir().unwrap();
    let ingest = Ingest { channels: 3, size: Some(32), block: 32, num_classes: None };
    assert!(load_dataset(dir.path(), &dir.path().join(LABELS_FILE), &ingest).unwrap().is_empty());

    let shape = Shape::new(3, 32, 32);
    let source = ModelSource::synthetic(SyntheticKind::Linear, shape, 1);
    let one = synthetic_dataset(1, 2, shape, &mut source.handle()).unwrap();
    save_dataset(dir.path(), &one).unwrap();
    let loaded = load_dataset(dir.path(), &dir.path().join(LABELS_FILE), &ingest).unwrap();
    assert_eq!(loaded, one);

    let config = BenchConfig::parse(&format!(
        "dataset = {}\nquery_budget = 2000\nmodel_seed = 1\n",
        dir.path().display()
    ))
    .unwrap();
    let report = run_benchmark(&config).unwrap();
    assert_eq!(report.records.len(), 1);
    assert_eq!(report.attempted, 1);
}

#[test]
fn labels_file_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("stray.txt"), "x").unwrap();
    let ingest = Ingest { channels: 3, size: Some(32), block: 32, num_classes: Some(10) };
    assert!(load_dataset(dir.path(), &dir.path().join(LABELS_FILE), &ingest).is_err());
    fs::write(dir.path().join(LABELS_FILE), "a.png 12\n").unwrap();
    let e = load_dataset(dir.path(), &dir.path().join(LABELS_FILE), &ingest).unwrap_err();
    assert!(e.to_string().contains(":1:"), "{e}");
}

#[test]
fn misclassified_images_are_not_attempted() {
    let config = small_config(5, 500);
    let shape = Shape::new(3, 32, 32);
    let source = ModelSource::synthetic(SyntheticKind::Linear, shape, corrattack_core::oracle::BENCH_SEED);
    let mut samples = synthetic_dataset(5, 11, shape, &mut source.handle()).unwrap();
    for s in &mut samples {
        s.label = (s.label + 1) % BENCH_CLASSES;
    }
    let report = run_samples(&config, &source, &samples).unwrap();
    assert_eq!((report.attempted, report.skipped), (0, 5));
    assert_eq!(report.success_rate, 0.0);
    assert!(report.records.iter().all(|r| r.queries.is_none()));
}

#[test]
fn budget_of_one_query_never_succeeds() {
    let report = run_benchmark(&small_config(4, 1)).unwrap();
    assert_eq!(report.attempted, 4);
    assert_eq!(report.success_rate, 0.0);
    assert_eq!(report.mean_queries, None);
    assert!(report.records.iter().all(|r| r.queries == Some(1)));
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER.join(","));
}

#[test]
fn benchmark_csv_is_reproducible_and_worker_independent() {
    let mut config = small_config(6, 800);
    let first = csv_of(&config);
    assert_eq!(first, csv_of(&config));
    config.workers = 3;
    assert_eq!(first, csv_of(&config));
    config.attack = AttackConfig::new(AttackMode::Diff);
    config.attack.query_budget = 800;
    assert_ne!(first, csv_of(&config));
}

#[test]
fn baseline_keeps_the_run_invariants() {
    let shape = Shape::new(3, 32, 32);
    let source = ModelSource::synthetic(SyntheticKind::Linear, shape, 3);
    let samples = synthetic_dataset(4, 8, shape, &mut source.handle()).unwrap();
    for (n, s) in samples.iter().enumerate() {
        let mut config = AttackConfig::new(AttackMode::Flip);
        config.seed = n as u64;
        config.query_budget = 1500;
        let plain = random_block_baseline(&mut CountingOracle::new(source.handle()), &s.image, s.label, &config).unwrap();

        config.selection = Selection::UniformRandom;
        let mut audit = InvariantAudit::new();
        let mut oracle = CountingOracle::new(source.handle());
        let audited = hierarchical_attack(&mut oracle, &s.image, s.label, &config, &mut audit).unwrap();
        assert!(audit.is_clean(), "{:?}", audit.violations);
        assert_eq!(oracle.queries_used(), audited.queries);
        assert_eq!(serde_json::to_string(&plain).unwrap(), serde_json::to_string(&audited).unwrap());
        assert!(audited.queries <= 1500);
        assert!(audited.loss_trace.windows(2).all(|w| w[1].loss <= w[0].loss));
    }

    let mut tight = AttackConfig::new(AttackMode::Flip);
    tight.query_budget = 5;
    let s = &samples[0];
    let r = random_block_baseline(&mut CountingOracle::new(source.handle()), &s.image, s.label, &tight).unwrap();
    assert!(r.queries <= 5);
    if !r.success {
        assert!(r.budget_exhausted);
        assert_eq!(r.queries, 5);
    }
}

#[test]
fn probe_needle_and_constant_fields() {
    let config = ProbeConfig::default();
    for at in [0, 100, 587] {
        let field = RewardField::needle(14, 14, 3, at, 1.0);
        let trace = bo_rank_probe(&field, &config).unwrap();
        let first_other = trace.points.iter().position(|p| p.block != at).unwrap();
        assert!(first_other <= 1);
        assert!(trace.points[first_other..].iter().all(|p| p.best_rank == 0.0));
    }
    let flat = RewardField::constant(14, 14, 3, -0.25);
    let a = bo_rank_probe(&flat, &config).unwrap();
    assert!(a.points.iter().all(|p| p.best_rank == 0.0));
    assert_eq!(a, bo_rank_probe(&flat, &config).unwrap());
    let mut buf = Vec::new();
    a.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), a.points.len() + 1);
}

#[test]
fn config_file_resolves_relative_dataset_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.conf");
    fs::write(&path, "# comment\ndataset = imgs\nmode = diff\n").unwrap();
    let c = BenchConfig::from_file(&path).unwrap();
    match c.dataset {
        DatasetSource::Directory { dir: d, labels } => {
            assert_eq!(d, dir.path().join("imgs"));
            assert_eq!(labels, dir.path().join("imgs").join(LABELS_FILE));
        }
        other => panic!("{other:?}"),
    }
    fs::write(&path, "mode = diff\nepsilon = lots\n").unwrap();
    let e = BenchConfig::from_file(&path).unwrap_err();
    assert_eq!(e.line, Some(2));
}

#[test]
fn cli_smoke() {
    let bin = env!("CARGO_BIN_EXE_corrattack");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a.json");
    let status = Command::new(bin)
        .args(["attack", "--budget", "400", "--seed", "3", "--out"])
        .arg(&out)
        .env_remove("CORRATTACK_ORACLE_URL")
        .status()
        .unwrap();
    assert!(status.success());
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!(json["queries"].as_u64().unwrap() <= 400);

    let bench_dir = dir.path().join("bench");
    let status = Command::new(bin)
        .args(["bench", "--out-dir"])
        .arg(&bench_dir)
        .args(["--num_images", "2", "--query_budget=300"])
        .env_remove("CORRATTACK_ORACLE_URL")
        .status()
        .unwrap();
    assert!(status.success());
    let csv = fs::read_to_string(bench_dir.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(bench_dir.join("report.json").exists());

    let bad = Command::new(bin).args(["bench", "--no_such_key", "1"]).status().unwrap();
    assert_eq!(bad.code(), Some(2));
    let down = Command::new(bin)
        .args(["attack", "--oracle", "http://127.0.0.1:9"])
        .status()
        .unwrap();
    assert_eq!(down.code(), Some(3));

    let map = dir.path().join("fd.csv");
    let status = Command::new(bin)
        .args(["diagnose", "fdmap", "--block", "8", "--out"])
        .arg(&map)
        .env_remove("CORRATTACK_ORACLE_URL")
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(fs::read_to_string(&map).unwrap().lines().count(), 1 + 3 * 4 * 4);
}

#[test]
fn synthetic_labels_match_model_predictions() {
    let config = small_config(3, 10);
    let shape = Shape::new(3, 32, 32);
    let source = ModelSource::synthetic(SyntheticKind::Linear, shape, corrattack_core::oracle::BENCH_SEED);
    let samples = synthetic_dataset(3, 11, shape, &mut source.handle()).unwrap();
    let mut model = source.handle();
    for s in &samples {
        assert_eq!(argmax(&model.logits(&s.image).unwrap()), s.label);
    }
    assert_eq!(run_samples(&config, &source, &samples).unwrap().attempted, 3);
}
