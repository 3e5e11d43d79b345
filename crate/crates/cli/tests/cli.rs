use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seeds = [0]
checkpoint_every = 3

[data]
source_train = 6
target_train = 6
source_test = 4
target_test = 4

[data.scene]
height = 32
width = 32
min_size = 8.0
max_size = 14.0
max_objects = 2

[detector]
height = 32
width = 32
channels = [4, 6, 8]
hidden = 8
anchor_size = 12.0

[teacher]
input_size = 12
channels = [4, 4, 4]
epochs = 2
batch_size = 4

[troln]
height = 32
width = 32
channels = [4, 6, 8]
hidden = 8
disc_hidden = 4

[troln_train]
iterations = 4

[train]
iterations = 6
source_per_step = 1
target_per_step = 1
lr = 0.01
disc_hidden = 4
"#;

fn dua(args: &[&str], run_dir: &Path, config: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_dua"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--run-dir")
        .arg(run_dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn stages_run_in_sequence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = tmp.path().join("run");

    dua(&["gen-data"], &run, &cfg);
    assert!(run.join("data/summary.json").exists());
    dua(&["train-teachers"], &run, &cfg);
    dua(&["train-detector"], &run, &cfg);
    dua(&["train-detector", "--use-dua"], &run, &cfg);
    for flags in [&[][..], &["--use-dce"], &["--use-dua"], &["--use-dua", "--use-dce"]] {
        let mut args = vec!["evaluate"];
        args.extend_from_slice(flags);
        let out = dua(&args, &run, &cfg);
        assert!(String::from_utf8_lossy(&out.stdout).contains("AP_t"));
    }
    let out = dua(&["report"], &run, &cfg);
    let md = String::from_utf8_lossy(&out.stdout);
    assert_eq!(md.lines().filter(|l| l.starts_with('|')).count(), 2 + 4, "{md}");
    for v in ["baseline_raw", "baseline_dce", "dua_raw", "dua_dce"] {
        assert!(run.join("seed_0/eval").join(v).join("report.json").exists(), "{v}");
    }
    assert!(run.join("summary.json").exists());
    assert!(run.join("config.toml").exists());
}

#[test]
fn seed_flag_selects_one_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY.replace("seeds = [0]", "seeds = [0, 1, 2]")).unwrap();
    let run = tmp.path().join("run");
    dua(&["gen-data"], &run, &cfg);
    let out = dua(&["train-teachers", "--seed", "5"], &run, &cfg);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("seed 5") && !text.contains("seed 0"), "{text}");
}

#[test]
fn bad_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "seeds = \"zero\"").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dua"))
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn default_config_round_trips() {
    let out = Command::new(env!("CARGO_BIN_EXE_dua")).arg("default-config").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("use_dua") && text.contains("[train]"));
}
