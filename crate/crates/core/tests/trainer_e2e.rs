//! End-to-end trainer behavior: determinism, checkpoint resume, stage
//! separation, degenerate batches and artifact emission.

use std::fs;
use std::path::PathBuf;

use noisytail::augment::AugmentConfig;
use noisytail::data::{self, DatasetBundle, Image, NoiseKind, Sample};
use noisytail::model::{Arch, Branch};
use noisytail::trainer::{self, MethodFlags, TrainConfig};

fn blob_pair(seed: u64) -> (DatasetBundle, DatasetBundle) {
    let train = data::make_blobs_tagged(3, 40, 16, 0.08, seed, 0).unwrap();
    let test = data::make_blobs_tagged(3, 15, 16, 0.08, seed, 1).unwrap();
    (train, test)
}

fn small_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs_warmup: 2,
        epochs_main: 2,
        batch_size: 32,
        lr0: 0.05,
        seed,
        arch: Arch::Mlp { widths: vec![16] },
        aug: AugmentConfig::blobs(),
        ..TrainConfig::default()
    }
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("nt_e2e_{name}_{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

/// metrics.csv with the wall-time column stripped (the single
/// non-deterministic field).
fn metrics_without_walltime(dir: &std::path::Path) -> String {
    let raw = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    raw.lines()
        .map(|line| match line.rfind(',') {
            Some(pos) if !line.starts_with('#') => &line[..pos],
            _ => line,
        })
        .map(|l| format!("{l}\n"))
        .collect()
}

#[test]
fn same_seed_runs_are_identical() {
    let (train, test) = blob_pair(11);
    let cfg = small_cfg(5);
    let d1 = tmp_dir("det1");
    let d2 = tmp_dir("det2");
    let (net1, out1) = trainer::train(&cfg, &train, &test, Some(&d1), "h").unwrap();
    let (net2, out2) = trainer::train(&cfg, &train, &test, Some(&d2), "h").unwrap();
    assert_eq!(net1.export_weights(), net2.export_weights());
    assert_eq!(metrics_without_walltime(&d1), metrics_without_walltime(&d2));
    assert_eq!(out1.records.len(), out2.records.len());
    for (a, b) in out1.records.iter().zip(&out2.records) {
        assert_eq!(a.test_accuracy.to_bits(), b.test_accuracy.to_bits());
        assert_eq!(a.lr.to_bits(), b.lr.to_bits());
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (train, test) = blob_pair(13);
    let cfg = small_cfg(7);
    let straight = tmp_dir("straight");
    let resumed = tmp_dir("resumed");

    let (net_a, _) = trainer::train(&cfg, &train, &test, Some(&straight), "h").unwrap();
    // stop after 2 of 4 epochs, then continue from the checkpoint
    trainer::train_with_limit(&cfg, &train, &test, Some(&resumed), "h", Some(2)).unwrap();
    assert!(resumed.join("checkpoint.bin").exists());
    let (net_b, _) = trainer::train(&cfg, &train, &test, Some(&resumed), "h").unwrap();

    assert_eq!(net_a.export_weights(), net_b.export_weights());
    assert_eq!(metrics_without_walltime(&straight), metrics_without_walltime(&resumed));
}

#[test]
fn resume_rejects_config_mismatch() {
    let (train, test) = blob_pair(17);
    let cfg = small_cfg(9);
    let dir = tmp_dir("mismatch");
    trainer::train_with_limit(&cfg, &train, &test, Some(&dir), "hash-a", Some(1)).unwrap();
    match trainer::train(&cfg, &train, &test, Some(&dir), "hash-b") {
        Err(noisytail::Error::Load(msg)) => assert!(msg.contains("hash")),
        other => panic!("expected load error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn warmup_leaves_strong_branch_untouched() {
    let (train, test) = blob_pair(19);
    let cfg = TrainConfig { epochs_warmup: 3, epochs_main: 0, ..small_cfg(3) };
    let (net, _) = trainer::train(&cfg, &train, &test, None, "h").unwrap();
    for bn in net.bn_layers() {
        let strong = bn.running(Branch::Strong);
        assert!(strong.mu.iter().all(|&v| v == 0.0));
        assert!(strong.sigma.iter().all(|&v| v == 1.0));
        assert!(bn.gamma_hat.to_vec().iter().all(|&v| v == 1.0));
        assert!(bn.beta_hat.to_vec().iter().all(|&v| v == 0.0));
        // weak branch did move
        let weak = bn.running(Branch::Weak);
        assert!(weak.mu.iter().any(|&v| v != 0.0) || weak.sigma.iter().any(|&v| v != 1.0));
    }
}

#[test]
fn full_noise_smoke_run_completes() {
    let (clean, test) = blob_pair(23);
    let noisy = data::inject_noise_ci(&clean, 1.0, 3).unwrap();
    let cfg = TrainConfig { epochs_warmup: 0, epochs_main: 1, ..small_cfg(4) };
    let (_, outcome) = trainer::train(&cfg, &noisy, &test, None, "h").unwrap();
    assert_eq!(outcome.records.len(), 1);
    // the trainer never aborts and the priors stay on the simplex; the
    // separation report exists because the mask has both classes... here all
    // samples are noisy, so AUROC is undefined and reported as absent.
    assert!(outcome.warmup_separation.is_none());
}

#[test]
fn partial_noise_reports_separation() {
    let (clean, test) = blob_pair(29);
    let noisy = data::inject_noise_ci(&clean, 0.3, 3).unwrap();
    let cfg = small_cfg(6);
    let (_, outcome) = trainer::train(&cfg, &noisy, &test, None, "h").unwrap();
    let rep = outcome.warmup_separation.expect("separation report");
    assert!(rep.auroc_matching > 0.0 && rep.auroc_matching <= 1.0);
    assert!(rep.auroc_ce > 0.0 && rep.auroc_ce <= 1.0);
    assert!(outcome.final_separation.is_some());
    // stage-2 records carry selection metrics
    let last = outcome.records.last().unwrap();
    assert!(last.clean_precision.is_some());
    assert!(last.auroc_matching.is_some());
}

#[test]
fn identical_batch_losses_skip_update() {
    // Eight byte-identical samples of one class: every matching loss is
    // identical, OTSU collapses, the clean set is empty and the batch skips.
    let img = Image::new(2, 2, vec![0.3, 0.6, 0.2, 0.9]);
    let samples: Vec<Sample> = (0..8)
        .map(|i| Sample { image: img.clone(), given_label: 0, true_label: 0, id: i })
        .collect();
    let train = DatasetBundle {
        samples,
        k: 2,
        class_counts: vec![8, 0],
        rho: 1.0,
        eta: 0.0,
        noise_kind: NoiseKind::None,
        seed: 0,
    };
    let test = train.clone();
    let mut aug = AugmentConfig::blobs();
    // make both views the identity so per-sample losses collapse exactly
    aug.pad = 0;
    aug.flips_enabled = false;
    aug.contrast_min = 1.0;
    aug.contrast_max = 1.0;
    aug.brightness_max = 0.0;
    aug.cutout_size = 0;
    let cfg = TrainConfig {
        epochs_warmup: 0,
        epochs_main: 1,
        batch_size: 8,
        arch: Arch::Mlp { widths: vec![4] },
        aug,
        ..small_cfg(2)
    };
    let (_, outcome) = trainer::train(&cfg, &train, &test, None, "h").unwrap();
    assert_eq!(outcome.skipped_batches, 1);
}

#[test]
fn artifacts_emitted_and_idempotent() {
    let (clean, test) = blob_pair(31);
    let noisy = data::inject_noise_ci(&clean, 0.2, 5).unwrap();
    let dir = tmp_dir("emit");
    let cfg = small_cfg(8);
    trainer::train(&cfg, &noisy, &test, Some(&dir), "abc123").unwrap();

    let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("# noisytail metrics schema v1 config_hash=abc123"));
    // constant column count across all data rows
    let counts: Vec<usize> =
        metrics.lines().skip(1).map(|l| l.split(',').count()).collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config_hash"], "abc123");
    assert_eq!(summary["epochs_run"], 4);
    assert!(dir.join("histograms/warmup_matching.csv").exists());
    assert!(dir.join("histograms/final_ce.csv").exists());

    // re-running the finished run must not change any artifact bytes
    let before_metrics = metrics_without_walltime(&dir);
    let before_summary = fs::read_to_string(dir.join("summary.json")).unwrap();
    trainer::train(&cfg, &noisy, &test, Some(&dir), "abc123").unwrap();
    assert_eq!(before_metrics, metrics_without_walltime(&dir));
    assert_eq!(before_summary, fs::read_to_string(dir.join("summary.json")).unwrap());
}

#[test]
fn ce_method_never_touches_strong_branch() {
    let (clean, test) = blob_pair(37);
    let noisy = data::inject_noise_ci(&clean, 0.2, 5).unwrap();
    let cfg = TrainConfig { method: MethodFlags::ce(), ..small_cfg(10) };
    let (net, outcome) = trainer::train(&cfg, &noisy, &test, None, "h").unwrap();
    for bn in net.bn_layers() {
        let strong = bn.running(Branch::Strong);
        assert!(strong.mu.iter().all(|&v| v == 0.0));
        assert!(strong.sigma.iter().all(|&v| v == 1.0));
    }
    // no selection columns for the baseline
    assert!(outcome.records.last().unwrap().clean_precision.is_none());
}
