use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_bppo");

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(cwd).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn quick_config(dir: &Path) -> String {
    let p = dir.join("quick.toml");
    std::fs::write(
        &p,
        "[warmup]\ntarget_accuracy = 0.0\neval_size = 20\n\n[train]\nbatch_prompts = 4\neval_size = 20\neval_every = 2\n",
    )
    .unwrap();
    p.display().to_string()
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["bogus"][..], &["train", "--algo", "ppo"], &["eval"], &["train", "--workers", "0"]] {
        let o = run(args, tmp.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(stderr(&o).starts_with("error: kind=usage msg="), "{}", stderr(&o));
        assert_eq!(stderr(&o).lines().count(), 1);
    }
    assert_eq!(run(&["--help"], tmp.path()).status.code(), Some(0));
    assert_eq!(run(&["warmup", "--task", "mod_add:1"], tmp.path()).status.code(), Some(2));
}

#[test]
fn config_and_checkpoint_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["eval", "--checkpoint", "missing.ckpt"], tmp.path());
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("kind=missing_checkpoint"));

    std::fs::write(tmp.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(run(&["eval", "--checkpoint", "junk.ckpt"], tmp.path()).status.code(), Some(4));

    std::fs::write(tmp.path().join("bad.toml"), "[train]\nsteps = 0\n").unwrap();
    let o = run(&["train", "--config", "bad.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    std::fs::write(tmp.path().join("typo.toml"), "[train]\nstepz = 3\n").unwrap();
    assert_eq!(run(&["warmup", "--config", "typo.toml"], tmp.path()).status.code(), Some(3));

    assert_eq!(run(&["warmup", "--config", "absent.toml"], tmp.path()).status.code(), Some(5));
    assert_eq!(run(&["compare", "nope_a", "nope_b"], tmp.path()).status.code(), Some(5));
}

#[test]
fn warmup_failure_exits_6() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("hard.toml"),
        "[warmup]\nmax_steps = 2\neval_every = 1\neval_size = 10\ntarget_accuracy = 1.0\n",
    )
    .unwrap();
    let o = run(&["warmup", "--config", "hard.toml", "--out", "w"], tmp.path());
    assert_eq!(o.status.code(), Some(6));
    assert!(stderr(&o).contains("kind=training_failed"));
}

#[test]
fn fdcheck_reports_json() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["analyze", "fdcheck", "--loss", "grpo", "--coords", "5"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["coords"], 5);
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-6);
    let o = run(&["analyze", "fdcheck", "--step=-1"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn pipeline_warmup_train_compare_curate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = quick_config(dir);
    let ok = |args: &[&str]| {
        let o = run(args, dir);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        o
    };
    ok(&["warmup", "--config", &cfg, "--seed", "2", "--out", "w"]);
    for f in ["config.toml", "manifest.json", "warmup.jsonl", "final.ckpt", "summary.json"] {
        assert!(dir.join("w").join(f).exists(), "{f}");
    }
    ok(&["train", "--config", &cfg, "--seed", "2", "--algo", "grpo", "--steps", "3", "--init", "w/final.ckpt", "--out", "g"]);
    ok(&["train", "--config", &cfg, "--seed", "2", "--algo", "bppo", "--steps", "3", "--init", "w/final.ckpt", "--out", "b"]);
    let metrics = std::fs::read_to_string(dir.join("b/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.lines().all(|l| l.contains("\"algo\":\"bppo\"")));
    // Flags override the file.
    let echoed = std::fs::read_to_string(dir.join("b/config.toml")).unwrap();
    assert!(echoed.contains("steps = 3") && echoed.contains("batch_prompts = 4"));

    let o = ok(&["compare", "g", "b", "--out", "c"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("token reduction"));
    let csv = std::fs::read_to_string(dir.join("c/compare.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "step,tokens_a,tokens_b,sample_ms_a,update_ms_a,sample_ms_b,update_ms_b,eval_a,eval_b"
    );
    assert_eq!(csv.lines().count(), 4);

    let o = ok(&["eval", "--checkpoint", "b/final.ckpt", "--n", "10", "--exit", "1"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["exit_depth"], 1);

    std::fs::write(dir.join("pool.txt"), "15 1 10 2 11\n15 3 10 4 11\n15 1 10 2 11\n15 7 10 7 11\n").unwrap();
    ok(&["curate", "--pool", "pool.txt", "--checkpoint", "w/final.ckpt", "--k", "2", "--m", "1", "--out", "picked.txt"]);
    assert_eq!(std::fs::read_to_string(dir.join("picked.txt")).unwrap().lines().count(), 2);

    // Mismatched policy config is rejected before any work.
    std::fs::write(dir.join("small.toml"), "[policy]\nd_model = 32\n").unwrap();
    let o = run(&["train", "--config", "small.toml", "--init", "w/final.ckpt", "--out", "x"], dir);
    assert_eq!(o.status.code(), Some(3));
}
