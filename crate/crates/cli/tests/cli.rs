use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_branchtune"));
    c.env("BRANCHTUNE_THREADS", "1");
    c
}

fn smoke_cfg() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("smoke.cfg")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn branchtune")
}

fn run_smoke(out: &Path) -> (Output, Duration) {
    let t0 = Instant::now();
    let o = run(&["run", "--config", smoke_cfg().to_str().unwrap(), "--out", out.to_str().unwrap()]);
    (o, t0.elapsed())
}

#[test]
fn smoke_run_writes_every_artifact_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let (o, took) = run_smoke(&a);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(took < Duration::from_secs(60), "smoke run took {took:?}");
    for f in ["metrics.json", "accuracy_matrix.csv", "cka_stage_2.csv", "checkpoints/stage_2.ckpt"] {
        assert!(a.join(f).is_file(), "missing {f}");
    }

    let (o, _) = run_smoke(&b);
    assert!(o.status.success());
    assert_eq!(fs::read(a.join("metrics.json")).unwrap(), fs::read(b.join("metrics.json")).unwrap());
    assert_eq!(fs::read(a.join("checkpoints/stage_2.ckpt")).unwrap(), fs::read(b.join("checkpoints/stage_2.ckpt")).unwrap());

    // The echoed config reproduces the run.
    let c = dir.path().join("c");
    let o = run(&["run", "--config", a.join("effective_config.toml").to_str().unwrap(), "--out", c.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(fs::read(a.join("metrics.json")).unwrap(), fs::read(c.join("metrics.json")).unwrap());

    let o = run(&["report", "--out", a.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("mean stability"));

    let ckpt = a.join("checkpoints/stage_2.ckpt");
    let o = run(&["probe", "--config", smoke_cfg().to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 3);

    let init = a.join("checkpoints/stage_0.ckpt");
    let o = run(&["cka", "--config", smoke_cfg().to_str().unwrap(), "--a", init.to_str().unwrap(), "--b", ckpt.to_str().unwrap(), "--task", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("layer_index,layer_name,cka"));
}

#[test]
fn reseeding_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_cfg();
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&["run", "--config", cfg, "--out", a.to_str().unwrap(), "--seed", "7"]).status.success());
    assert!(run(&["run", "--config", cfg, "--out", b.to_str().unwrap(), "--seed", "8"]).status.success());
    let ma = fs::read_to_string(a.join("metrics.json")).unwrap();
    assert!(ma.contains("\"model_seed\": 7"));
    assert_ne!(ma, fs::read_to_string(b.join("metrics.json")).unwrap());
}

#[test]
fn unknown_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(smoke_cfg()).unwrap().replace("[stream]", "[stream]\nshuffle = true");
    let path = dir.path().join("bad.cfg");
    fs::write(&path, text).unwrap();
    let o = run(&["run", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("shuffle"));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn missing_config_and_bad_report_dir() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["run", "--config", dir.path().join("nope.cfg").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gen_data_writes_loadable_cifar_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = run(&["gen-data", "--classes", "3", "--per-class", "4", "--eval-per-class", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::metadata(out.join("train.bin")).unwrap().len(), 12 * 3074);
    let d = branchtune::data::load_cifar100_binary(&out.join("eval.bin")).unwrap();
    assert_eq!(d.len(), 6);
    let o = run(&["gen-data", "--classes", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
