use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cpm::dataset::Dataset;
use cpm::env::Mode;
use tempfile::TempDir;

fn cpm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpm"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn quick_config(dir: &Path) -> PathBuf {
    let p = dir.join("quick.json");
    std::fs::write(
        &p,
        r#"{"train": {"stage1_epochs": 1, "stage2_epochs": 1, "stage3_rounds": 1, "episode_batch": 2}}"#,
    )
    .unwrap();
    p
}

fn gen(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["gen-data", "--episodes", "4", "--episode-len", "4", "--seed", "7"];
    args.extend_from_slice(extra);
    ok(cpm(dir, &args));
    dir.join("data.cpmd")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_byte_identical_and_records_its_mode() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let pa = gen(a.path(), &["--mode", "unobserved"]);
    let pb = gen(b.path(), &["--mode", "unobserved"]);
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    let data = Dataset::load(&pa).unwrap();
    assert_eq!(data.header().config.mode, Mode::Unobserved);
    assert_eq!(data.transitions(), 16);
    assert!(a.path().join("config.json").exists());
}

#[test]
fn gen_data_rejects_too_few_objects() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(&cpm(d.path(), &["gen-data", "--objects", "2"])), 2);
}

#[test]
fn stage_two_without_a_checkpoint_is_a_pipeline_error() {
    let d = TempDir::new().unwrap();
    let data = gen(d.path(), &[]);
    assert_eq!(code(&cpm(d.path(), &["train", "--data", s(&data), "--stage", "2"])), 3);
    assert_eq!(code(&cpm(d.path(), &["train", "--data", s(&data), "--stage", "9"])), 2);
}

#[test]
fn training_is_reproducible_and_resumable() {
    let d = TempDir::new().unwrap();
    let data = gen(d.path(), &[]);
    let cfg = quick_config(d.path());
    let runs: Vec<Vec<u8>> = ["r1", "r2"]
        .iter()
        .map(|r| {
            let out = d.path().join(r);
            ok(cpm(&out, &["train", "--data", s(&data), "--stage", "1", "--config", s(&cfg)]));
            assert!(out.join("timing.csv").exists());
            std::fs::read(out.join("metrics.csv")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    let r1 = d.path().join("r1");
    let r3 = d.path().join("r3");
    let ckpt = r1.join("model.ckpt");
    ok(cpm(
        &r3,
        &["train", "--data", s(&data), "--stage", "2", "--checkpoint", s(&ckpt), "--config", s(&cfg)],
    ));
    let metrics = std::fs::read_to_string(r3.join("metrics.csv")).unwrap();
    assert!(metrics.lines().any(|l| l.starts_with("2,") && l.contains("policy")));
    let gnn_ckpt = d.path().join("g");
    ok(cpm(&gnn_ckpt, &["train", "--data", s(&data), "--model", "gnn", "--config", s(&cfg)]));
    let mismatched = cpm(
        &r3,
        &["train", "--data", s(&data), "--model", "gnn", "--checkpoint", s(&ckpt), "--stage", "1"],
    );
    assert_eq!(code(&mismatched), 2);
}

#[test]
fn eval_writes_horizons_and_aggregates() {
    let d = TempDir::new().unwrap();
    let data = gen(d.path(), &[]);
    let cfg = quick_config(d.path());
    let mut ckpts = Vec::new();
    for seed in ["1", "2"] {
        let out = d.path().join(seed);
        ok(cpm(&out, &["train", "--data", s(&data), "--stage", "1", "--seed", seed, "--config", s(&cfg)]));
        ckpts.push(out.join("model.ckpt"));
    }
    let ev = d.path().join("ev");
    ok(cpm(
        &ev,
        &[
            "eval", "--data", s(&data), "--checkpoint", s(&ckpts[0]), s(&ckpts[1]), "--horizons", "1,2",
            "--aggregate", "top1of2", "--plot",
        ],
    ));
    let text = std::fs::read_to_string(ev.join("eval.csv")).unwrap();
    let records = cpm::eval::read_csv(&text).unwrap();
    assert_eq!(records.len(), 2 * 2 * 2);
    assert!(records.iter().any(|r| r.horizon == 2 && r.metric == "mrr"));
    assert!(ev.join("aggregate.csv").exists());
    assert!(std::fs::read_dir(&ev).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "svg")));
    let missing = cpm(&ev, &["eval", "--data", s(&data), "--checkpoint", "nope.ckpt"]);
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.ckpt"));
}

#[test]
fn plan_with_the_oracle_and_missing_tasks() {
    let d = TempDir::new().unwrap();
    let cfg = d.path().join("plan.json");
    std::fs::write(&cfg, r#"{"plan": {"tasks": 4}}"#).unwrap();
    let tasks = d.path().join("tasks.json");
    ok(cpm(d.path(), &["plan", "--tasks", s(&tasks), "--write-suite", "--oracle", "--config", s(&cfg)]));
    let text = std::fs::read_to_string(d.path().join("plan.csv")).unwrap();
    assert!(text.starts_with("planner,task,reward"));
    assert!(text.lines().any(|l| l == "oracle,mean,1"));
    assert_eq!(code(&cpm(d.path(), &["plan", "--tasks", "absent.json", "--oracle"])), 2);
}
