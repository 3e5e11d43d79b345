mod common;

use std::fs;

use common::tiny_config;
use dua_core::align::read_jsonl;
use dua_core::dua::DuaLogRow;
use dua_core::metrics::source_bias;
use dua_core::runner::{
    gen_data, regenerate_report, report, run_stage1, run_stage2, run_stage3, EvalReport, ExperimentConfig,
    MeanStd,
};
use dua_core::Error;

fn read_report(cfg: &ExperimentConfig, seed: u64, dua: bool, dce: bool) -> EvalReport {
    let p = cfg.eval_dir(seed, dua, dce).join("report.json");
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn missing_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert!(matches!(run_stage1(&cfg, 0), Err(Error::Config(_))));
    assert!(matches!(run_stage2(&cfg, 0, false), Err(Error::Config(_))));
}

#[test]
fn config_round_trips_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let p = dir.path().join("c.toml");
    fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    assert_eq!(ExperimentConfig::load(&p).unwrap(), cfg);

    fs::write(&p, "seeds = [4]\n[train]\nlambda1 = 0.5\n").unwrap();
    let partial = ExperimentConfig::load(&p).unwrap();
    assert_eq!(partial.seeds, vec![4]);
    assert_eq!(partial.train.lambda1, 0.5);
    assert_eq!(partial.train.distill_iou, 0.8);

    let mut bad = cfg.clone();
    bad.detector.width = 40;
    assert!(bad.validate().is_err());
    fs::write(&p, "seeds = \"x\"").unwrap();
    assert!(matches!(ExperimentConfig::load(&p), Err(Error::Config(_))));
}

#[test]
fn stage1_is_reproducible_and_logs_teacher_loss() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut ca = tiny_config(a.path());
    ca.teacher.epochs = 6;
    ca.teacher.lr = 0.002;
    let cb = ExperimentConfig {
        run_dir: b.path().to_path_buf(),
        ..ca.clone()
    };
    for c in [&ca, &cb] {
        gen_data(c).unwrap();
        run_stage1(c, 0).unwrap();
    }
    for f in ["teacher.json", "troln.json", "split.json", "troln_log.jsonl", "teacher_report.json"] {
        let x = fs::read(ca.stage1_dir(0).join(f)).unwrap();
        let y = fs::read(cb.stage1_dir(0).join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
    let rep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ca.stage1_dir(0).join("teacher_report.json")).unwrap()).unwrap();
    let loss: Vec<f64> = rep["epoch_loss"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(loss.len(), 6);
    // two-epoch moving average
    let smooth: Vec<f64> = loss.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    assert!(smooth.windows(2).all(|w| w[1] <= w[0]), "{loss:?}");
}

#[test]
fn stage2_logs_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    gen_data(&cfg).unwrap();
    run_stage1(&cfg, 0).unwrap();

    let base = run_stage2(&cfg, 0, false).unwrap();
    let log_path = cfg.stage2_dir(0, false).join("train_log.jsonl");
    let text = fs::read_to_string(&log_path).unwrap();
    assert!(!text.contains("L_dist"));
    let base_log: Vec<DuaLogRow> = read_jsonl(&log_path).unwrap();
    assert_eq!(base_log.len(), 6);

    // zero distillation weights reproduce the baseline trajectory
    let zero_dir = tempfile::tempdir().unwrap();
    let mut zero = tiny_config(zero_dir.path());
    zero.data_dir = Some(cfg.data_dir());
    zero.train.lambda1 = 0.0;
    zero.train.lambda2 = 0.0;
    fs::create_dir_all(zero.stage1_dir(0)).unwrap();
    fs::copy(cfg.stage1_dir(0).join("teacher.json"), zero.stage1_dir(0).join("teacher.json")).unwrap();
    run_stage2(&zero, 0, true).unwrap();
    let zero_log: Vec<DuaLogRow> = read_jsonl(&zero.stage2_dir(0, true).join("train_log.jsonl")).unwrap();
    for (a, b) in base_log.iter().zip(&zero_log) {
        assert_eq!((a.l_da, a.l_det, a.l_adv), (b.l_da, b.l_det, b.l_adv));
        assert!(b.l_dist.is_some());
    }

    // interrupted run: 4 steps, then extend to 6
    let int_dir = tempfile::tempdir().unwrap();
    let mut short = tiny_config(int_dir.path());
    short.data_dir = Some(cfg.data_dir());
    short.train.iterations = 4;
    run_stage2(&short, 0, false).unwrap();
    short.train.iterations = 6;
    let resumed = run_stage2(&short, 0, false).unwrap();
    assert_eq!(resumed.resumed_from, 4);
    assert_eq!(resumed.fingerprint, base.fingerprint);
    let resumed_log: Vec<DuaLogRow> = read_jsonl(&short.stage2_dir(0, false).join("train_log.jsonl")).unwrap();
    assert_eq!(resumed_log, base_log);
}

#[test]
fn stage3_reports_are_consistent_and_regenerable() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.seeds = vec![0, 1];
    gen_data(&cfg).unwrap();
    for seed in [0, 1] {
        run_stage1(&cfg, seed).unwrap();
        run_stage2(&cfg, seed, false).unwrap();
        for dce in [false, true] {
            run_stage3(&cfg, seed, false, dce).unwrap();
        }
    }
    let raw = fs::read(cfg.eval_dir(0, false, false).join("report.json")).unwrap();
    let dce = fs::read(cfg.eval_dir(0, false, true).join("report.json")).unwrap();
    assert_ne!(raw, dce);
    for seed in [0, 1] {
        for d in [false, true] {
            let r = read_report(&cfg, seed, false, d);
            if let Some(b) = r.bias {
                assert_eq!(b.theta, source_bias(r.ap_s, r.ap_t).unwrap());
                assert_eq!((b.ap_s, b.ap_t), (r.ap_s, r.ap_t));
            }
            assert_eq!(regenerate_report(&cfg.eval_dir(seed, false, d)).unwrap(), r);
            assert_eq!(r.target.consistency_raw.is_some(), d);
        }
    }
    let summary = report(&cfg).unwrap();
    assert_eq!(summary.rows.len(), 2);
    let row = summary.row(false, true).unwrap();
    let ap: Vec<f64> = [0, 1].iter().map(|&s| read_report(&cfg, s, false, true).ap_t).collect();
    let m = MeanStd::of(&ap).unwrap();
    assert_eq!(row.ap_t, Some(m));
    let mean = (ap[0] + ap[1]) / 2.0;
    let sd = (((ap[0] - mean).powi(2) + (ap[1] - mean).powi(2)) / 1.0).sqrt();
    assert!((m.mean - mean).abs() < 1e-15 && (m.std - sd).abs() < 1e-12);
    assert!(cfg.run_dir.join("summary.md").exists());
    for split in ["source", "target"] {
        assert!(cfg.eval_dir(0, false, true).join(format!("scatter_{split}.svg")).exists());
    }

    // a tampered report no longer matches its dump
    let p = cfg.eval_dir(1, false, false).join("report.json");
    let mut r = read_report(&cfg, 1, false, false);
    r.ap_s += 0.5;
    fs::write(&p, serde_json::to_string(&r).unwrap()).unwrap();
    assert!(report(&cfg).is_err());
}
