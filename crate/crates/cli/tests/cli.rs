use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "data.per_class = 2
model.token_dim = 8
model.blocks = 2
train.steps = 3
train.batch = 2
schedule.inference_steps = 5
fusion.stratified_steps = 2
run.prompts = 0,1
run.images = 2
";

fn strata(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_strata"));
    cmd.args(args).env_remove("STRATA_OUT_DIR");
    if let Some(p) = env_out {
        cmd.env("STRATA_OUT_DIR", p);
    }
    cmd.output().unwrap()
}

fn stdout_dir(o: &Output) -> PathBuf {
    PathBuf::from(String::from_utf8(o.stdout.clone()).unwrap().trim())
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("c.cfg");
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn train_tiny(dir: &Path) -> PathBuf {
    let cfg = write_config(dir, "");
    let out = dir.join("out");
    let o = strata(
        &["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    stdout_dir(&o).join("model.strd")
}

#[test]
fn unknown_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "guidance.scael = 3\n");
    let out = dir.path().join("out");
    let o = strata(&["generate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("guidance.scael"));
    assert!(!out.exists());

    let o = strata(&["make-data", "--set", "fusion.lambda_p=0.9", "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fusion.lambda_p"));
    let o = strata(&["generate", "--bogus-flag"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn help_lists_keys_with_defaults() {
    for sub in ["train", "invert", "generate", "ablate", "analyze", "make-data"] {
        let o = strata(&[sub, "--help"], None);
        assert_eq!(o.status.code(), Some(0));
        let text = String::from_utf8(o.stdout).unwrap();
        for (k, _, _) in strata::pipeline::KEYS {
            assert!(text.contains(k), "{sub} help lacks {k}");
        }
        for d in ["guidance.scale", "schedule.inference_steps", "fusion.lambda_g", "fusion.stratified_steps"] {
            assert!(text.lines().any(|l| l.contains(d) && l.contains("[default:")));
        }
        assert!(text.contains("[default: 7.5]") && text.contains("[default: 50]"));
    }
}

#[test]
fn generate_twice_is_identical_and_ablate_emits_grid() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny(dir.path());
    let cfg = write_config(dir.path(), &format!("model.checkpoint = {}\n", model.display()));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let mut dirs = Vec::new();
    for out in [&a, &b] {
        let o = strata(
            &["generate", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()],
            None,
        );
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        dirs.push(stdout_dir(&o));
    }
    assert_eq!(dirs[0].file_name(), dirs[1].file_name());
    for entry in fs::read_dir(&dirs[0]).unwrap() {
        let name = entry.unwrap().file_name();
        let (x, y) = (dirs[0].join(&name), dirs[1].join(&name));
        if x.is_file() {
            assert_eq!(fs::read(&x).unwrap(), fs::read(&y).unwrap(), "{name:?}");
        }
    }
    assert!(fs::read_to_string(dirs[0].join("config.txt")).unwrap().contains("run.seed=7\n"));

    // STRATA_OUT_DIR supplies the default output root.
    let env_out = dir.path().join("env");
    let o = strata(
        &["ablate", "--config", cfg.to_str().unwrap(), "--set", "ablate.lambdas=0,0.33,0.5,0.67,1.0"],
        Some(&env_out),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let run = stdout_dir(&o);
    assert!(run.starts_with(&env_out));
    let csv = fs::read_to_string(run.join("lambda_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);
}

#[test]
fn set_is_last_write_wins() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = strata(
        &[
            "make-data", "--set", "data.per_class=1", "--set", "data.per_class=2",
            "--set", "data.classes=2", "--out", out.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(0));
    let labels = fs::read_to_string(stdout_dir(&o).join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 1 + 2 * 3);
}

#[test]
fn runtime_failure_exits_two_and_names_stage() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("m.strd");
    fs::write(&bogus, b"STRD garbage").unwrap();
    let out = dir.path().join("out");
    let o = strata(
        &["invert", "--set", &format!("model.checkpoint={}", bogus.display()), "--out", out.to_str().unwrap()],
        None,
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("load-model"));
}
