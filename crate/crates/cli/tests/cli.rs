use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{"data": {"num_images": 12}, "train": {"epochs": 2, "lr_drop_epochs": [1], "lambda_ramp_steps": 0}}"#;

fn dynroute(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynroute"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DYNROUTE_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = walk(dir).into_iter().map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap())).collect();
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn gen_data_is_reproducible_and_seed_sensitive() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.json"), SMALL).unwrap();
    ok(&dynroute(&["gen-data", "--config", "c.json", "--out", "a"], tmp.path()));
    ok(&dynroute(&["gen-data", "--config", "c.json", "--out", "b"], tmp.path()));
    ok(&dynroute(&["gen-data", "--config", "c.json", "--seed", "99", "--out", "c"], tmp.path()));
    let a = read_dir_bytes(&tmp.path().join("a"));
    assert_eq!(a.len(), 13);
    assert_eq!(a, read_dir_bytes(&tmp.path().join("b")));
    let c = read_dir_bytes(&tmp.path().join("c"));
    assert_eq!(c.len(), a.len());
    assert_ne!(c, a);
}

#[test]
fn env_seed_matches_flag_seed() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.json"), SMALL).unwrap();
    ok(&dynroute(&["gen-data", "--config", "c.json", "--seed", "42", "--out", "flag"], tmp.path()));
    let out = Command::new(env!("CARGO_BIN_EXE_dynroute"))
        .args(["gen-data", "--config", "c.json", "--out", "env"])
        .current_dir(tmp.path())
        .env("DYNROUTE_SEED", "42")
        .output()
        .unwrap();
    ok(&out);
    assert_eq!(read_dir_bytes(&tmp.path().join("flag")), read_dir_bytes(&tmp.path().join("env")));
}

#[test]
fn train_eval_export_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("c.json"), SMALL).unwrap();
    ok(&dynroute(&["gen-data", "--config", "c.json", "--out", "data"], dir));
    ok(&dynroute(&["train", "--config", "c.json", "--data", "data", "--out", "run"], dir));

    let log = dynroute::train::read_log(&dir.join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.len(), 4);
    assert!(log.iter().filter(|r| r.epoch == 1).all(|r| r.l_global == 0.0 && r.l_local == 0.0));

    let eval = dynroute(&["eval", "--checkpoint", "run/checkpoint.ckpt", "--data", "data", "--report", "eval.csv"], dir);
    ok(&eval);
    assert!(String::from_utf8_lossy(&eval.stdout).contains("C_net mean"));
    let report = std::fs::read_to_string(dir.join("eval.csv")).unwrap();
    let header: Vec<&str> = report.lines().next().unwrap().split(',').collect();
    for col in ["mean", "max", "min", "std"] {
        assert!(header.contains(&col), "{header:?}");
    }
    assert_eq!(std::fs::read_to_string(dir.join("eval_samples.csv")).unwrap().lines().count(), 13);

    ok(&dynroute(&["cost-report", "--checkpoint", "run/checkpoint.ckpt", "--data", "data", "--out", "cost.csv"], dir));
    let cost = std::fs::read_to_string(dir.join("cost.csv")).unwrap();
    assert!(cost.starts_with("sample_id,C_net,C_tot,ratio\n"));
    assert_eq!(cost.lines().count(), 1 + 12 + 4);

    let route = ["export-route", "--checkpoint", "run/checkpoint.ckpt", "--image", "data/images/000000.pgm", "--out"];
    ok(&dynroute(&[&route[..], &["r.dot", "--format", "dot"]].concat(), dir));
    assert!(std::fs::read_to_string(dir.join("r.dot")).unwrap().starts_with("digraph route {"));
    ok(&dynroute(&[&route[..], &["r.svg", "--format", "svg"]].concat(), dir));
    assert!(std::fs::read_to_string(dir.join("r.svg")).unwrap().starts_with("<svg"));
    let bad = dynroute(&[&route[..], &["r.png", "--format", "png"]].concat(), dir);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("bad.json"), r#"{"data": {"scale_mix": [{"pattern": [1, 1, 1], "weight": 1.0}]}}"#).unwrap();
    assert_eq!(dynroute(&["gen-data", "--config", "bad.json", "--out", "x"], dir).status.code(), Some(2));
    std::fs::write(dir.join("typo.json"), r#"{"trian": {}}"#).unwrap();
    assert_eq!(dynroute(&["gen-data", "--config", "typo.json", "--out", "x"], dir).status.code(), Some(2));
    assert_eq!(dynroute(&["frobnicate"], dir).status.code(), Some(2));
    assert_eq!(dynroute(&["train", "--data", "missing", "--out", "r"], dir).status.code(), Some(2));

    std::fs::write(dir.join("c.json"), SMALL).unwrap();
    ok(&dynroute(&["gen-data", "--config", "c.json", "--out", "data"], dir));
    ok(&dynroute(&["train", "--config", "c.json", "--data", "data", "--out", "run"], dir));
    std::fs::create_dir(dir.join("empty")).unwrap();
    std::fs::write(dir.join("empty/annotations.jsonl"), "").unwrap();
    let out = dynroute(&["eval", "--checkpoint", "run/checkpoint.ckpt", "--data", "empty", "--report", "e.csv"], dir);
    assert_eq!(out.status.code(), Some(2));
    // colour corpus against a greyscale checkpoint
    std::fs::write(dir.join("rgb.json"), r#"{"data": {"num_images": 2, "channels": 3}, "supernet": {"input_channels": 3}}"#).unwrap();
    ok(&dynroute(&["gen-data", "--config", "rgb.json", "--out", "rgb"], dir));
    let out = dynroute(&["eval", "--checkpoint", "run/checkpoint.ckpt", "--data", "rgb", "--report", "e.csv"], dir);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diverging_run_exits_3_and_keeps_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = r#"{"data": {"num_images": 8}, "train": {"epochs": 3, "lr_drop_epochs": [], "base_lr": 1e200, "grad_clip_norm": null}}"#;
    std::fs::write(dir.join("c.json"), cfg).unwrap();
    ok(&dynroute(&["gen-data", "--config", "c.json", "--out", "data"], dir));
    let out = dynroute(&["train", "--config", "c.json", "--data", "data", "--out", "run"], dir);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("run/checkpoint.ckpt").exists());
}
