use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use tqdm_cli::{ablate, analyze, eval, gen_data, resolve_config, train, AnalysisKind, AnalyzeRequest, ConfigArgs, Variant};
use tqdm_core::config::RunConfig;

const TINY: &[&str] = &[
    "crop_size=16",
    "patch=4",
    "backbone_width=16",
    "backbone_blocks=1",
    "mlp_ratio=2",
    "embed_dim=16",
    "feature_dim=16",
    "decoder_layers=3",
    "pixel_decoder_layers=1",
    "ffn_hidden=16",
    "prompt_len=4",
    "text_token_dim=16",
    "text_blocks=1",
    "total_steps=6",
    "warmup_steps=2",
    "batch_size=2",
    "checkpoint_every=3",
    "train_scenes=6",
    "val_scenes=3",
    "test_scenes=3",
];

fn tiny_args() -> ConfigArgs {
    ConfigArgs {
        overrides: TINY.iter().map(|s| s.to_string()).collect(),
        small: true,
        ..ConfigArgs::default()
    }
}

fn tiny() -> RunConfig {
    resolve_config(&tiny_args(), false).unwrap()
}

fn digest_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn trained_checkpoint(dir: &Path) -> PathBuf {
    train(&tiny(), dir, None).unwrap().final_checkpoint.unwrap()
}

#[test]
fn gen_data_is_reproducible_and_counts_match() {
    let cfg = tiny();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let n = gen_data(&cfg, a.path()).unwrap();
    gen_data(&cfg, b.path()).unwrap();
    assert_eq!(n, 6 + 3 + 3 * 3);
    assert_eq!(digest_tree(a.path()), digest_tree(b.path()));
    let manifest = fs::read_to_string(a.path().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), n);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(a.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["crop_size"], 16);
}

#[test]
fn seed_flag_targets_the_right_field() {
    let args = ConfigArgs { seed: Some(9), ..tiny_args() };
    assert_eq!(resolve_config(&args, true).unwrap().data_seed, 9);
    let run = resolve_config(&args, false).unwrap();
    assert_eq!((run.seed, run.data_seed), (9, 0));
    let bad = ConfigArgs { overrides: vec!["crop_size=0".into()], ..ConfigArgs::default() };
    assert!(resolve_config(&bad, false).is_err());
}

#[test]
fn train_writes_logs_and_eval_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path());
    let log = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert!(dir.path().join("checkpoints/step000003.ckpt").exists());
    assert!(dir.path().join("summary.json").exists());

    let domains = vec!["source".to_string(), "sketch".to_string()];
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    let first = eval(&ckpt, &domains, "test", &e1).unwrap();
    eval(&ckpt, &domains, "test", &e2).unwrap();
    assert_eq!(first.len(), 2);
    for name in ["miou.csv", "per_class_iou.csv", "eval.json"] {
        assert_eq!(fs::read(e1.join(name)).unwrap(), fs::read(e2.join(name)).unwrap(), "{name}");
    }
    let per_class = fs::read_to_string(e1.join("per_class_iou.csv")).unwrap();
    assert_eq!(per_class.lines().count(), 1 + 2 * 5);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(e1.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["total_steps"], 6);
}

#[test]
fn analysis_exports_have_the_documented_shape() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path());
    let request = |kind| AnalyzeRequest {
        kind,
        domain: "source".into(),
        split: "val".into(),
        image: 0,
        anchor: Some((1, 2)),
        target_domain: None,
    };

    let path = analyze(&ckpt, &request(AnalysisKind::Simmap), &dir.path().join("sim")).unwrap();
    let mut rows = csv::Reader::from_path(path).unwrap();
    let values: Vec<f64> = rows.records().map(|r| r.unwrap()[3].parse().unwrap()).collect();
    assert_eq!(values.len(), 5 * 16 * 16);
    assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));

    let path = analyze(&ckpt, &request(AnalysisKind::Coherence), &dir.path().join("coh")).unwrap();
    let mut rows = csv::Reader::from_path(path).unwrap();
    let mut stages = BTreeSet::new();
    for r in rows.records() {
        let r = r.unwrap();
        stages.insert(r[0].to_string());
        if &r[3] == "1" && &r[4] == "2" {
            assert_eq!(r[5].parse::<f64>().unwrap(), 1.0);
        }
    }
    assert_eq!(stages.len(), 2);

    let path = analyze(&ckpt, &request(AnalysisKind::Pr), &dir.path().join("pr")).unwrap();
    let mut rows = csv::Reader::from_path(path).unwrap();
    let mut per_class = std::collections::BTreeMap::<String, usize>::new();
    for r in rows.records() {
        *per_class.entry(r.unwrap()[0].to_string()).or_default() += 1;
    }
    assert!(!per_class.is_empty());
    assert!(per_class.values().all(|&n| n == 101));

    let other = AnalyzeRequest { target_domain: Some("sketch".into()), ..request(AnalysisKind::Coherence) };
    assert!(analyze(&ckpt, &other, &dir.path().join("coh2")).is_ok());
    let missing = AnalyzeRequest { image: 99, ..request(AnalysisKind::Simmap) };
    assert!(analyze(&ckpt, &missing, &dir.path().join("bad")).is_err());
}

#[test]
fn ablation_grid_has_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let rows = ablate(&tiny(), &[Variant::Full, Variant::RandomQueries], 3, dir.path()).unwrap();
    assert_eq!(rows.len(), 6);
    let hashes: BTreeSet<_> = rows.iter().map(|r| r.checkpoint_sha256.clone()).collect();
    assert_eq!(hashes.len(), 6);
    let configs: BTreeSet<_> = rows.iter().map(|r| r.config_hash.clone()).collect();
    assert_eq!(configs.len(), 6);
    let table = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 7);
    assert!(table.lines().next().unwrap().starts_with("variant,seed,config_hash"));
    assert!(rows.iter().any(|r| r.variant == "full") && rows.iter().any(|r| r.variant == "random_queries"));
}

#[test]
fn variants_flip_exactly_their_toggle() {
    let base = tiny();
    for v in Variant::ALL {
        let c = v.apply(&base);
        assert_eq!(v == Variant::Full, c == base, "{}", v.name());
    }
}

#[test]
fn binary_runs_gen_data_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let mut cmd = Process::new(env!("CARGO_BIN_EXE_tqdm-mini"));
    cmd.arg("gen-data").arg("--small").arg("--seed").arg("4").arg("--out").arg(dir.path());
    for s in TINY {
        cmd.arg("--set").arg(s);
    }
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["data_seed"], 4);

    let out = Process::new(env!("CARGO_BIN_EXE_tqdm-mini"))
        .args(["train", "--set", "no_such_key=1", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}
