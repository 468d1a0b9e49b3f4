use std::path::Path;
use std::process::Command;

const TINY: &str = r#"
seed = 4
[model.backbone]
layers = [3, 4]
width = 8
hidden = 8
[model.controller]
budgets = [2, 4, 6]
[data]
train_samples = 16
[train.epochs]
unimodal = 1
fusion = 1
controller = 1
skipgate = 1
prune_soft = 1
prune_hard = 1
[eval]
samples_per_cell = 3
"#;

fn cli(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_budgetnet"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(["--config", "tiny.toml", "--out-dir", "run"])
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn subcommands_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();

    let out = cli(dir.path(), &["train", "--stage", "3"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage2.json"));
    assert!(!cli(dir.path(), &["train", "--stage", "0"]).status.success());
    assert!(!cli(dir.path(), &["eval"]).status.success());

    for stage in ["1", "2", "3", "4", "5"] {
        let out = cli(dir.path(), &["train", "--stage", stage]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let out = cli(dir.path(), &["eval"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("budget guarantee: pass"));
    for f in ["metrics.csv", "report.json", "utilization.csv", "traces.jsonl"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
    std::fs::remove_file(dir.path().join("run/metrics.csv")).unwrap();
    assert!(cli(dir.path(), &["report"]).status.success());
    assert!(dir.path().join("run/metrics.csv").exists());

    let out = cli(dir.path(), &["gen-data", "--count", "4", "--kind", "a-blur", "--output", "scenes.jsonl"]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.path().join("scenes.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().all(|l| l.contains("\"a-blur\"")));
    assert!(!cli(dir.path(), &["gen-data", "--kind", "smoke", "--output", "x.jsonl"]).status.success());
}

#[test]
fn gradcheck_passes() {
    let out = Command::new(env!("CARGO_BIN_EXE_budgetnet")).arg("gradcheck").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().count() >= 8 && !text.contains("FAIL"), "{text}");
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), "seed = 1\nunknown_key = 3\n").unwrap();
    let out = cli(dir.path(), &["eval"]);
    assert_eq!(out.status.code(), Some(2));
}
