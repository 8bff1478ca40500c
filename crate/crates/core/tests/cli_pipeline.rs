use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use modl_mel::cli::{
    cmd_bench_memory, cmd_eval, cmd_gen_data, cmd_recon, cmd_train, Method, RunConfig, BENCH_CSV, INVALID_MARKER,
    METRICS_CASES_CSV, METRICS_SUMMARY_CSV, RUN_CONFIG_FILE,
};
use modl_mel::mel::Engine;
use modl_mel::mri::{split_manifest_file, CaseEntry, Split, MANIFEST_FILE};
use modl_mel::train::{BEST_CHECKPOINT_DIR, LOG_FILE};

const SMALL_CONFIG: &str = r#"{
  "data_dir": "data",
  "out_dir": "run",
  "dataset": {"shape": [16, 16], "coils": 2, "calib": 4, "n_train": 3, "n_val": 2, "n_test": 2, "seed": 11},
  "train": {"epochs": 1, "batch_size": 2, "net": {"n_unrolls": 2, "regularizer": {"channels": 4}}},
  "bench": {"shape": [16, 16], "coils": 2}
}"#;

fn small_config(dir: &Path) -> RunConfig {
    let p = dir.join("config.json");
    fs::write(&p, SMALL_CONFIG).unwrap();
    RunConfig::load(&p).unwrap()
}

fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn gen_data_writes_disjoint_splits_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let manifest = cmd_gen_data(&cfg).unwrap();
    assert!(cfg.data_dir.join(MANIFEST_FILE).is_file());
    let mut seen = BTreeSet::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let text = fs::read_to_string(cfg.data_dir.join(split_manifest_file(split))).unwrap();
        let entries: Vec<CaseEntry> = serde_json::from_str(&text).unwrap();
        assert!(!entries.is_empty());
        for e in entries {
            assert_eq!(e.split, split);
            assert!(seen.insert(e.id), "case {} listed twice", e.id);
        }
    }
    assert_eq!(seen.len(), manifest.cases.len());
    for c in &manifest.cases {
        assert!(
            (3.4..=4.6).contains(&c.realized_acceleration),
            "R = {}",
            c.realized_acceleration
        );
    }

    let mut again = cfg.clone();
    again.data_dir = dir.path().join("data_again");
    cmd_gen_data(&again).unwrap();
    assert_eq!(tree_bytes(&cfg.data_dir), tree_bytes(&again.data_dir));
}

#[test]
fn train_recon_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    cmd_gen_data(&cfg).unwrap();
    let out = cmd_train(&cfg, None).unwrap();
    assert_eq!(out.log.len(), 1);
    for f in [RUN_CONFIG_FILE, LOG_FILE] {
        assert!(cfg.out_dir.join(f).is_file(), "{f}");
    }
    assert!(cfg.out_dir.join(BEST_CHECKPOINT_DIR).is_dir());

    for m in [Method::Modl, Method::ZeroFilled, Method::GroundTruth] {
        let files = cmd_recon(&cfg, m, None, Split::Val, None, None).unwrap();
        assert_eq!(files.len(), 2);
        for f in &files {
            assert!(f.with_extension("pgm").is_file());
        }
    }
    let one = cmd_recon(&cfg, Method::CgSense, None, Split::Val, Some(3), None).unwrap();
    assert_eq!(one.len(), 1);

    let report = cmd_eval(
        &cfg,
        None,
        &[Method::Modl, Method::ZeroFilled, Method::GroundTruth],
        Split::Val,
        None,
    )
    .unwrap();
    let mut per_method: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for c in &report.cases {
        per_method.entry(&c.method).or_default().push(c.case);
    }
    assert_eq!(per_method.len(), 3);
    for ids in per_method.values() {
        let unique: BTreeSet<_> = ids.iter().collect();
        assert_eq!((ids.len(), unique.len()), (2, 2));
    }
    for c in report.cases.iter().filter(|c| c.method == "ground_truth") {
        assert!(c.psnr_infinite && c.psnr_db.is_infinite());
        assert!((c.ssim - 1.0).abs() < 1e-12);
    }
    let zf = report.mean_psnr("zero_filled").unwrap();
    assert!(zf.is_finite());
    for f in [METRICS_CASES_CSV, METRICS_SUMMARY_CSV] {
        assert!(cfg.out_dir.join(f).is_file(), "{f}");
    }
}

#[test]
fn training_rejects_architecture_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cmd_gen_data(&cfg).unwrap();
    cfg.train.net.regularizer.spatial_rank = 3;
    let err = cmd_train(&cfg, None).unwrap_err();
    assert!(err.to_string().contains("architecture mismatch"), "{err}");
}

#[test]
fn bench_memory_rows_and_growth() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.bench.unrolls = vec![2];
    let s = cmd_bench_memory(&cfg).unwrap();
    assert_eq!(s.rows.len(), 2);
    assert!(cfg.out_dir.join(BENCH_CSV).is_file());

    cfg.bench.unrolls = vec![8, 2, 4];
    cfg.bench.engines = vec![Engine::Standard];
    let s = cmd_bench_memory(&cfg).unwrap();
    let ns: Vec<usize> = s.rows.iter().map(|r| r.n_unrolls).collect();
    assert_eq!(ns, vec![2, 4, 8]);
    assert_eq!(s.standard_increasing, Some(true));
    assert!(s.check().is_ok());
}

#[test]
fn binary_reports_failure_with_marker() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    fs::create_dir_all(&out).unwrap();
    let status = Process::new(env!("CARGO_BIN_EXE_modl-mel"))
        .args(["--out", out.to_str().unwrap(), "train", "--data"])
        .arg(dir.path().join("missing"))
        .output()
        .unwrap();
    assert!(!status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).contains("error"));
    assert!(out.join(INVALID_MARKER).is_file());

    let ok = Process::new(env!("CARGO_BIN_EXE_modl-mel"))
        .args([
            "--out",
            out.to_str().unwrap(),
            "--engine",
            "mel",
            "bench-memory",
            "--unroll-list",
            "1,2",
        ])
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(!out.join(INVALID_MARKER).exists());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("max feasible unrolls [mel]"));
}
