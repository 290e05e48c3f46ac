use std::fs;

use zsla_core::detector::DetectorBank;
use zsla_core::pipeline::{
    manual_labels, run_pipeline, training_labels, walr_sweep, write_run, write_sweep, DataBundle, Logger, PipelineConfig,
    PipelineError,
};
use zsla_core::synthdata::SplitRole;
use zsla_core::synthesis::IntersectionNet;

/// A run small enough for the test suite: 40 classes of 6 images, short
/// training, a narrow intersection block.
fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.dataset.n_classes = 40;
    cfg.dataset.images_per_class = 6;
    cfg.detector.epochs = 3;
    cfg.synthesis.epochs = 4;
    cfg.synthesis.net.heads = 2;
    cfg.synthesis.net.head_dim = 8;
    cfg.sweep.levels = vec![0.0, 0.5];
    cfg.sweep.runs = 2;
    cfg.sweep.workers = 1;
    cfg
}

#[test]
fn small_run_produces_complete_report() {
    let cfg = small_config();
    let bundle = DataBundle::generate(&cfg).unwrap();
    let out = run_pipeline(&bundle, &cfg, &Logger::silent()).unwrap();
    let r = &out.report;
    assert_eq!(out.synthesized.attributes, bundle.vocab.unseen());
    assert_eq!(out.seen.bank.attributes, bundle.vocab.seen());
    assert_eq!(out.seen.curve.len(), cfg.detector.epochs);
    assert_eq!(out.net.curve.len(), cfg.synthesis.epochs);
    for m in r.evaluation.reports() {
        assert!((0.0..=1.0).contains(&m.mauroc), "{} mAUROC {}", m.role.as_str(), m.mauroc);
    }
    assert!(r.evaluation.direct.is_some() && r.evaluation.cosine_to_direct.is_some());
    for g in [&r.annotation.gzsl_zsla, &r.annotation.gzsl_manual] {
        assert!((0.0..=1.0).contains(&g.h));
    }
    assert_eq!(out.annotation.annotations.len(), bundle.dataset.scenes.len());
}

#[test]
fn identical_configs_write_identical_artifacts() {
    let mut cfg = small_config();
    cfg.walr = 0.3;
    let bundle = DataBundle::generate(&cfg).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = run_pipeline(&bundle, &cfg, &Logger::silent()).unwrap();
        write_run(&tmp.path().join(name), &bundle, &out).unwrap();
    }
    let mut names: Vec<_> = fs::read_dir(tmp.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() >= 12);
    for name in names {
        let a = fs::read(tmp.path().join("a").join(&name)).unwrap();
        let b = fs::read(tmp.path().join("b").join(&name)).unwrap();
        assert!(a == b, "{name:?} differs");
    }
}

#[test]
fn artifacts_round_trip() {
    let cfg = small_config();
    let bundle = DataBundle::generate(&cfg).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    bundle.save(tmp.path()).unwrap();
    let loaded = DataBundle::load(tmp.path()).unwrap();
    assert_eq!(loaded.dataset.labels, bundle.dataset.labels);
    assert_eq!(loaded.features, bundle.features);
    assert_eq!(loaded.vocab.fingerprint(), bundle.vocab.fingerprint());

    let out = run_pipeline(&bundle, &cfg, &Logger::silent()).unwrap();
    let run = tmp.path().join("run");
    write_run(&run, &bundle, &out).unwrap();
    let seen = DetectorBank::load(&run.join("seen_bank.bin"), &bundle.vocab).unwrap();
    assert_eq!(&seen, &out.seen.bank);
    let net = IntersectionNet::load(&run.join("net.bin")).unwrap();
    let (a, b) = (out.seen.bank.abs_column(0), out.seen.bank.abs_column(1));
    assert_eq!(net.intersect(&a, &b).unwrap(), out.net.net.intersect(&a, &b).unwrap());
    let config = PipelineConfig::load(&run.join("config.json")).unwrap();
    assert_eq!(config, out.config);
}

#[test]
fn missing_data_directory_names_the_producer() {
    let tmp = tempfile::tempdir().unwrap();
    match DataBundle::load(&tmp.path().join("nowhere")) {
        Err(PipelineError::Missing(msg)) => assert!(msg.contains("gen-data"), "{msg}"),
        other => panic!("expected a missing-input error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn noisy_arms_agree_on_shared_scenes() {
    let cfg = small_config();
    let bundle = DataBundle::generate(&cfg).unwrap();
    let train = training_labels(&bundle, 0.4, 9).unwrap();
    let manual = manual_labels(&bundle, 0.4, 9).unwrap();
    let shared = bundle.scenes(&[SplitRole::ZslaTrain, SplitRole::ZslaVal]);
    assert!(train.corrupted > 0 && manual.corrupted >= train.corrupted);
    for s in 0..bundle.dataset.scenes.len() {
        if shared.contains(&s) {
            assert_eq!(train.labels[s], manual.labels[s]);
        } else {
            assert_eq!(train.labels[s], bundle.dataset.labels[s]);
        }
    }
    let clean = training_labels(&bundle, 0.0, 9).unwrap();
    assert_eq!(clean.corrupted, 0);
    assert_eq!(clean.labels, bundle.dataset.labels);
}

#[test]
fn sweep_covers_every_level_and_run() {
    let cfg = small_config();
    let bundle = DataBundle::generate(&cfg).unwrap();
    let report = walr_sweep(&bundle, &cfg, &Logger::silent()).unwrap();
    assert_eq!(report.runs.len(), 4);
    assert_eq!(report.levels.len(), 2);
    for (level, walr) in report.levels.iter().zip([0.0, 0.5]) {
        assert_eq!(level.walr, walr);
        assert_eq!(level.unseen_mauroc.n, 2);
        assert!(level.unseen_mauroc.half_width.is_some());
    }
    let seeds: Vec<u64> = report.runs.iter().filter(|r| r.walr == 0.5).map(|r| r.seed).collect();
    assert_eq!(seeds, [cfg.seed, cfg.seed + 1]);

    let tmp = tempfile::tempdir().unwrap();
    write_sweep(tmp.path(), &report).unwrap();
    let summary = fs::read_to_string(tmp.path().join("sweep_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 6);
    assert_eq!(fs::read_to_string(tmp.path().join("sweep_runs.csv")).unwrap().lines().count(), 5);
}

#[test]
fn invalid_noise_rate_is_rejected() {
    let mut cfg = small_config();
    cfg.walr = 1.5;
    assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))));
}
