//! Experiment orchestration: data generation, teacher training, detector
//! training, evaluation, and aggregate reports, all persisted under a run
//! directory.
//!
//! Layout:
//! ```text
//! <run_dir>/config.toml
//! <data_dir>/{source_train,s2t_train,target_train,source_test,target_test,corpus}/
//! <run_dir>/seed_<s>/stage1/{teacher.json,teacher_report.json,split.json,balance.json,troln.json,troln_log.jsonl}
//! <run_dir>/seed_<s>/stage2/<baseline|dua>/{detector.json,resume.json,train_log.jsonl}
//! <run_dir>/seed_<s>/eval/<baseline|dua>_<raw|dce>/{dump.json,report.json,scatter_*.{csv,svg}}
//! <run_dir>/summary.{json,md}
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::align::{read_jsonl, write_jsonl};
use crate::dce::{dce_pipeline, LocFactors, RefinedDetection};
use crate::detcore::geometry::BBox;
use crate::detcore::{postprocess, top_foreground, Detection, DetectorConfig};
use crate::dua::{train_detector, DaDetector, DetectorTrainConfig, DuaLogRow};
use crate::metrics::{
    ap50, consistency_report, consistency_candidates, write_scatter_csv, write_scatter_svg, ApReport,
    BiasReport, ConsistencyReport, ImageGt,
};
use crate::nn::Sgd;
use crate::parallel;
use crate::synthdomain::{
    build_instance_corpus, gen_scene, load_corpus, load_scenes, save_corpus, save_scenes, stylize_to_target,
    Domain, InstanceCrop, LabeledScene, SceneConfig,
};
use crate::teacher_cls::{
    balance_check, split_corpus, train_teacher, BalanceReport, ClassifierTeacher, TeacherConfig, TeacherReport,
};
use crate::troln::{train_troln, Troln, TrolnConfig, TrolnTrainConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub source_train: usize,
    pub target_train: usize,
    pub source_test: usize,
    pub target_test: usize,
    /// Fraction of the teacher corpus held out for the balance check.
    pub holdout_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneConfig::default(),
            source_train: 200,
            target_train: 200,
            source_test: 100,
            target_test: 100,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub consistency_samples: usize,
    pub consistency_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            consistency_samples: 500,
            consistency_seed: 0,
        }
    }
}

/// Everything a run needs. Serialized as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub run_dir: PathBuf,
    /// Defaults to `<run_dir>/data`.
    pub data_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub use_dua: bool,
    pub use_dce: bool,
    /// Steps between resumable checkpoints during detector training.
    pub checkpoint_every: usize,
    pub data: DataConfig,
    pub detector: DetectorConfig,
    pub teacher: TeacherConfig,
    pub troln: TrolnConfig,
    pub troln_train: TrolnTrainConfig,
    pub train: DetectorTrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs/default"),
            data_dir: None,
            seeds: vec![0, 1, 2],
            use_dua: false,
            use_dce: false,
            checkpoint_every: 250,
            data: DataConfig::default(),
            detector: DetectorConfig::default(),
            teacher: TeacherConfig::default(),
            troln: TrolnConfig::default(),
            troln_train: TrolnTrainConfig::default(),
            train: DetectorTrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.data.scene;
        s.validate()?;
        let dims = [
            ("detector", self.detector.height, self.detector.width),
            ("troln", self.troln.height, self.troln.width),
        ];
        for (name, h, w) in dims {
            if (h, w) != (s.height, s.width) {
                return Err(Error::Config(format!(
                    "{name} input {h}×{w} does not match scenes {}×{}",
                    s.height, s.width
                )));
            }
        }
        if self.detector.num_classes != s.num_classes {
            return Err(Error::Config("detector.num_classes differs from data.scene.num_classes".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.data.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.run_dir.join("data"))
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.run_dir.join(format!("seed_{seed}"))
    }

    pub fn stage1_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("stage1")
    }

    pub fn stage2_dir(&self, seed: u64, use_dua: bool) -> PathBuf {
        self.seed_dir(seed).join("stage2").join(detector_name(use_dua))
    }

    pub fn eval_dir(&self, seed: u64, use_dua: bool, use_dce: bool) -> PathBuf {
        self.seed_dir(seed).join("eval").join(variant_name(use_dua, use_dce))
    }
}

fn detector_name(use_dua: bool) -> &'static str {
    if use_dua {
        "dua"
    } else {
        "baseline"
    }
}

pub fn variant_name(use_dua: bool, use_dce: bool) -> String {
    format!("{}_{}", detector_name(use_dua), if use_dce { "dce" } else { "raw" })
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub const SPLITS: [&str; 5] = ["source_train", "s2t_train", "target_train", "source_test", "target_test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub seed: u64,
    pub counts: Vec<(String, usize)>,
    pub corpus: usize,
}

fn scene_seed(data_seed: u64, split: u64, i: usize) -> u64 {
    data_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(split << 32)
        .wrapping_add(i as u64)
}

/// Generate all splits and the teacher corpus under the data directory.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<DataSummary> {
    cfg.validate()?;
    let d = &cfg.data;
    let gen = |split: u64, n: usize, domain: Domain| -> Result<Vec<LabeledScene>> {
        let idx: Vec<usize> = (0..n).collect();
        parallel::map(&idx, |&i| gen_scene(scene_seed(d.seed, split, i), domain, &d.scene))
            .into_iter()
            .collect()
    };
    let source_train = gen(1, d.source_train, Domain::Source)?;
    let s2t: Vec<LabeledScene> = parallel::map(&source_train, |s| stylize_to_target(s, &d.scene.target_style))
        .into_iter()
        .collect::<Result<_>>()?;
    let target_train = gen(2, d.target_train, Domain::Target)?;
    let source_test = gen(3, d.source_test, Domain::Source)?;
    let target_test = gen(4, d.target_test, Domain::Target)?;
    let mut mixed = source_train.clone();
    mixed.extend_from_slice(&s2t);
    let corpus = build_instance_corpus(&mixed, cfg.teacher.input_size)?;

    let root = cfg.data_dir();
    let splits = [&source_train, &s2t, &target_train, &source_test, &target_test];
    let mut counts = Vec::new();
    for (name, scenes) in SPLITS.iter().zip(splits) {
        save_scenes(&root.join(name), scenes)?;
        counts.push((name.to_string(), scenes.len()));
    }
    save_corpus(&root.join("corpus"), &corpus)?;
    let summary = DataSummary {
        seed: d.seed,
        counts,
        corpus: corpus.len(),
    };
    write_json(&root.join("summary.json"), &summary)?;
    info!("generated data under {}", root.display());
    Ok(summary)
}

pub fn load_split(cfg: &ExperimentConfig, name: &str) -> Result<Vec<LabeledScene>> {
    let p = cfg.data_dir().join(name);
    if !p.is_dir() {
        return Err(Error::Config(format!("missing dataset split {}", p.display())));
    }
    load_scenes(&p)
}

fn load_corpus_checked(cfg: &ExperimentConfig) -> Result<Vec<InstanceCrop>> {
    let p = cfg.data_dir().join("corpus");
    if !p.is_dir() {
        return Err(Error::Config(format!("missing teacher corpus {}", p.display())));
    }
    load_corpus(&p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub seed: u64,
    pub teacher: TeacherReport,
    pub balance: BalanceReport,
    pub teacher_fingerprint: u64,
    pub troln_fingerprint: u64,
    pub troln_steps: usize,
}

/// Train the classification teacher and TROLN on source plus
/// source-to-target data.
pub fn run_stage1(cfg: &ExperimentConfig, seed: u64) -> Result<Stage1Summary> {
    cfg.validate()?;
    let corpus = load_corpus_checked(cfg)?;
    let mut scenes = load_split(cfg, "source_train")?;
    scenes.extend(load_split(cfg, "s2t_train")?);
    let dir = cfg.stage1_dir(seed);
    fs::create_dir_all(&dir)?;

    let split = split_corpus(corpus.len(), cfg.data.holdout_fraction, seed);
    write_json(&dir.join("split.json"), &split)?;
    let train: Vec<InstanceCrop> = split.train.iter().map(|&i| corpus[i].clone()).collect();
    let holdout: Vec<InstanceCrop> = split.holdout.iter().map(|&i| corpus[i].clone()).collect();
    let (teacher, report) = train_teacher(&train, cfg.data.scene.num_classes, &cfg.teacher, seed)?;
    teacher.save(&dir.join("teacher.json"))?;
    write_json(&dir.join("teacher_report.json"), &report)?;
    let balance = balance_check(&teacher, &holdout)?;
    write_json(&dir.join("balance.json"), &balance)?;
    info!(
        "seed {seed}: teacher train acc {:.3}, holdout S {:.3} / S→T {:.3}",
        report.train_accuracy, balance.source_accuracy, balance.source_to_target_accuracy
    );

    let (troln, log) = train_troln(&scenes, &cfg.troln, &cfg.troln_train, seed)?;
    troln.save(&dir.join("troln.json"))?;
    write_jsonl(&dir.join("troln_log.jsonl"), &log)?;
    let summary = Stage1Summary {
        seed,
        teacher_fingerprint: teacher.fingerprint(),
        troln_fingerprint: troln.fingerprint(),
        troln_steps: log.len(),
        teacher: report,
        balance,
    };
    write_json(&dir.join("stage1.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Summary {
    pub seed: u64,
    pub use_dua: bool,
    pub steps: usize,
    pub resumed_from: usize,
    pub fingerprint: u64,
    pub final_row: Option<DuaLogRow>,
}

/// Train one detector variant, resuming from `resume.json` when present.
pub fn run_stage2(cfg: &ExperimentConfig, seed: u64, use_dua: bool) -> Result<Stage2Summary> {
    cfg.validate()?;
    let source = load_split(cfg, "source_train")?;
    let target = load_split(cfg, "target_train")?;
    let teacher = if use_dua {
        Some(ClassifierTeacher::load(&cfg.stage1_dir(seed).join("teacher.json"))?)
    } else {
        None
    };
    let tc = DetectorTrainConfig {
        use_dua,
        ..cfg.train.clone()
    };
    let dir = cfg.stage2_dir(seed, use_dua);
    fs::create_dir_all(&dir)?;
    let resume = dir.join("resume.json");
    let log_path = dir.join("train_log.jsonl");
    let (mut model, mut opt, start, mut log) = if resume.exists() {
        let (m, o, next) = DaDetector::load_resume(&resume)?;
        let mut log: Vec<DuaLogRow> = if log_path.exists() { read_jsonl(&log_path)? } else { Vec::new() };
        log.truncate(next);
        (m, o, next, log)
    } else {
        let m = DaDetector::new(cfg.detector.clone(), tc.disc_hidden, tc.lambda_grl, seed);
        (m, Sgd::new(tc.lr, tc.momentum, tc.weight_decay), 0, Vec::new())
    };
    if start > 0 {
        info!("seed {seed} {}: resuming at step {start}", detector_name(use_dua));
    }
    let mut step = start;
    while step < tc.iterations {
        let end = (step + cfg.checkpoint_every).min(tc.iterations);
        let rows = train_detector(&mut model, &mut opt, &source, &target, teacher.as_ref(), &tc, seed, step..end)?;
        log.extend(rows);
        step = end;
        model.save_resume(&resume, &opt, step)?;
        write_jsonl(&log_path, &log)?;
        if let Some(r) = log.last() {
            info!(
                "seed {seed} {} step {step}: L_DA {:.4} L_det {:.4} L_adv {:.4}",
                detector_name(use_dua),
                r.l_da,
                r.l_det,
                r.l_adv
            );
        }
    }
    model.save(&dir.join("detector.json"))?;
    write_jsonl(&log_path, &log)?;
    let summary = Stage2Summary {
        seed,
        use_dua,
        steps: tc.iterations,
        resumed_from: start,
        fingerprint: model.params.fingerprint(),
        final_row: log.last().cloned(),
    };
    write_json(&dir.join("stage2.json"), &summary)?;
    Ok(summary)
}

/// One candidate box as persisted for re-scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpedBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub proposal_id: usize,
    pub cls_raw: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cls_refined: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factors: Option<LocFactors>,
    pub kept_by_nms: bool,
}

impl DumpedBox {
    fn detection(&self, refined: bool) -> Detection {
        let cls = match (&self.cls_refined, refined) {
            (Some(c), true) => c.clone(),
            _ => self.cls_raw.clone(),
        };
        Detection {
            bbox: self.bbox,
            cls,
            proposal_id: self.proposal_id,
        }
    }
}

impl From<RefinedDetection> for DumpedBox {
    fn from(r: RefinedDetection) -> Self {
        Self {
            bbox: r.bbox,
            proposal_id: r.proposal_id,
            cls_raw: r.cls_raw,
            s: Some(r.s),
            cls_refined: Some(r.cls_refined),
            factors: Some(r.factors),
            kept_by_nms: r.kept_by_nms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitDump {
    pub gts: Vec<ImageGt>,
    pub images: Vec<Vec<DumpedBox>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalDump {
    pub seed: u64,
    pub use_dua: bool,
    pub use_dce: bool,
    pub num_classes: usize,
    pub consistency_samples: usize,
    pub consistency_seed: u64,
    pub source: SplitDump,
    pub target: SplitDump,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub ap50: ApReport,
    /// Correlation of the scores used for ranking (refined under DCE).
    pub consistency: ConsistencyReport,
    /// Under DCE: the same sampled boxes scored with the unrefined head output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency_raw: Option<ConsistencyReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub variant: String,
    pub use_dua: bool,
    pub use_dce: bool,
    #[serde(rename = "AP_s")]
    pub ap_s: f64,
    #[serde(rename = "AP_t")]
    pub ap_t: f64,
    /// `None` when both APs are zero.
    pub bias: Option<BiasReport>,
    pub source: SplitMetrics,
    pub target: SplitMetrics,
}

fn raw_boxes(outputs: Vec<crate::detcore::HeadOutput>, nms_iou: f64) -> Vec<DumpedBox> {
    let kept: BTreeSet<usize> = postprocess(&outputs, nms_iou).iter().map(|d| d.proposal_id).collect();
    outputs
        .into_iter()
        .map(|o| {
            let (c, _) = top_foreground(&o.cls);
            DumpedBox {
                bbox: o.boxes[c],
                proposal_id: o.proposal_id,
                kept_by_nms: kept.contains(&o.proposal_id),
                cls_raw: o.cls,
                s: None,
                cls_refined: None,
                factors: None,
            }
        })
        .collect()
}

fn dump_split(
    scenes: &[LabeledScene],
    model: &DaDetector,
    troln: Option<&Troln>,
) -> Result<SplitDump> {
    let images = parallel::map(scenes, |s| -> Result<Vec<DumpedBox>> {
        match troln {
            Some(t) => Ok(dce_pipeline(&s.image, &model.det, &model.params, t)?
                .into_iter()
                .map(DumpedBox::from)
                .collect()),
            None => Ok(raw_boxes(model.det.infer(&model.params, &s.image)?, model.det.cfg.nms_iou)),
        }
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(SplitDump {
        gts: scenes.iter().map(ImageGt::from).collect(),
        images,
    })
}

fn split_metrics(d: &SplitDump, dump: &EvalDump) -> Result<SplitMetrics> {
    let refined = dump.use_dce;
    let post: Vec<Vec<Detection>> = d
        .images
        .iter()
        .map(|v| v.iter().filter(|b| b.kept_by_nms).map(|b| b.detection(refined)).collect())
        .collect();
    let ap = ap50(&post, &d.gts, dump.num_classes)?;
    let pre = |r: bool| -> Vec<Vec<Detection>> {
        d.images.iter().map(|v| v.iter().map(|b| b.detection(r)).collect()).collect()
    };
    let n = dump.consistency_samples;
    let seed = dump.consistency_seed;
    let consistency = consistency_report(&consistency_candidates(&pre(refined), &d.gts)?, n, seed);
    let consistency_raw = if refined {
        Some(consistency_report(&consistency_candidates(&pre(false), &d.gts)?, n, seed))
    } else {
        None
    };
    Ok(SplitMetrics {
        ap50: ap,
        consistency,
        consistency_raw,
    })
}

/// Metrics are a pure function of the dump.
pub fn report_from_dump(dump: &EvalDump) -> Result<EvalReport> {
    let source = split_metrics(&dump.source, dump)?;
    let target = split_metrics(&dump.target, dump)?;
    let (ap_s, ap_t) = (source.ap50.map, target.ap50.map);
    Ok(EvalReport {
        seed: dump.seed,
        variant: variant_name(dump.use_dua, dump.use_dce),
        use_dua: dump.use_dua,
        use_dce: dump.use_dce,
        ap_s,
        ap_t,
        bias: BiasReport::new(ap_s, ap_t).ok(),
        source,
        target,
    })
}

fn write_scatters(dir: &Path, r: &EvalReport) -> Result<()> {
    for (split, m) in [("source", &r.source), ("target", &r.target)] {
        let pairs = &m.consistency.pairs;
        write_scatter_csv(&dir.join(format!("scatter_{split}.csv")), pairs)?;
        let title = format!(
            "{} {split}: Src {} Tau-b {}",
            r.variant,
            fmt_opt(m.consistency.src),
            fmt_opt(m.consistency.tau_b)
        );
        write_scatter_svg(&dir.join(format!("scatter_{split}.svg")), pairs, &title)?;
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.3}"))
}

/// Evaluate one variant on both test splits; writes the dump, the report,
/// and scatter plots.
pub fn run_stage3(cfg: &ExperimentConfig, seed: u64, use_dua: bool, use_dce: bool) -> Result<EvalReport> {
    cfg.validate()?;
    let model = DaDetector::load(&cfg.stage2_dir(seed, use_dua).join("detector.json"))?;
    let troln = if use_dce {
        Some(Troln::load(&cfg.stage1_dir(seed).join("troln.json"))?)
    } else {
        None
    };
    let source = load_split(cfg, "source_test")?;
    let target = load_split(cfg, "target_test")?;
    let dump = EvalDump {
        seed,
        use_dua,
        use_dce,
        num_classes: cfg.detector.num_classes,
        consistency_samples: cfg.eval.consistency_samples,
        consistency_seed: cfg.eval.consistency_seed,
        source: dump_split(&source, &model, troln.as_ref())?,
        target: dump_split(&target, &model, troln.as_ref())?,
    };
    let dir = cfg.eval_dir(seed, use_dua, use_dce);
    write_json(&dir.join("dump.json"), &dump)?;
    let report = report_from_dump(&dump)?;
    write_json(&dir.join("report.json"), &report)?;
    write_scatters(&dir, &report)?;
    info!(
        "seed {seed} {}: AP_s {:.4} AP_t {:.4}",
        report.variant, report.ap_s, report.ap_t
    );
    Ok(report)
}

/// Recompute a report from its persisted dump.
pub fn regenerate_report(dir: &Path) -> Result<EvalReport> {
    let dump: EvalDump = read_json(&dir.join("dump.json"))?;
    report_from_dump(&dump)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub use_dua: bool,
    pub use_dce: bool,
    pub seeds: Vec<u64>,
    #[serde(rename = "AP_s")]
    pub ap_s: Option<MeanStd>,
    #[serde(rename = "AP_t")]
    pub ap_t: Option<MeanStd>,
    pub theta: Option<MeanStd>,
    pub src_t: Option<MeanStd>,
    pub tau_b_t: Option<MeanStd>,
    /// Under DCE: target correlations of the unrefined scores on the same boxes.
    pub src_t_raw: Option<MeanStd>,
    pub tau_b_t_raw: Option<MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<AblationRow>,
}

impl Summary {
    pub fn row(&self, use_dua: bool, use_dce: bool) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.use_dua == use_dua && r.use_dce == use_dce)
    }
}

fn aggregate(reports: &[EvalReport], use_dua: bool, use_dce: bool) -> AblationRow {
    let ms = |f: &dyn Fn(&EvalReport) -> Option<f64>| {
        let v: Vec<f64> = reports.iter().filter_map(f).collect();
        if v.len() == reports.len() {
            MeanStd::of(&v)
        } else {
            None
        }
    };
    AblationRow {
        variant: variant_name(use_dua, use_dce),
        use_dua,
        use_dce,
        seeds: reports.iter().map(|r| r.seed).collect(),
        ap_s: ms(&|r| Some(r.ap_s)),
        ap_t: ms(&|r| Some(r.ap_t)),
        theta: ms(&|r| r.bias.map(|b| b.theta)),
        src_t: ms(&|r| r.target.consistency.src),
        tau_b_t: ms(&|r| r.target.consistency.tau_b),
        src_t_raw: ms(&|r| r.target.consistency_raw.as_ref().and_then(|c| c.src)),
        tau_b_t_raw: ms(&|r| r.target.consistency_raw.as_ref().and_then(|c| c.tau_b)),
    }
}

/// Aggregate every available variant across seeds. Each report is first
/// regenerated from its dump; a mismatch with the stored report is an error.
pub fn report(cfg: &ExperimentConfig) -> Result<Summary> {
    let mut rows = Vec::new();
    for (use_dua, use_dce) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut reports = Vec::new();
        for &seed in &cfg.seeds {
            let dir = cfg.eval_dir(seed, use_dua, use_dce);
            if !dir.join("dump.json").exists() {
                continue;
            }
            let r = regenerate_report(&dir)?;
            let stored: EvalReport = read_json(&dir.join("report.json"))?;
            if stored != r {
                return Err(Error::Checkpoint(format!("{} does not match its dump", dir.display())));
            }
            reports.push(r);
        }
        if !reports.is_empty() {
            rows.push(aggregate(&reports, use_dua, use_dce));
        }
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("no evaluation dumps under {}", cfg.run_dir.display())));
    }
    let summary = Summary { rows };
    write_json(&cfg.run_dir.join("summary.json"), &summary)?;
    fs::write(cfg.run_dir.join("summary.md"), summary_markdown(&summary))?;
    Ok(summary)
}

fn cell(v: Option<MeanStd>, scale: f64) -> String {
    v.map_or("–".into(), |m| format!("{:.2} ± {:.2}", m.mean * scale, m.std * scale))
}

pub fn summary_markdown(s: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| DUA | DCE | AP50 source | AP50 target | Θ (%) | Src target | Tau-b target |");
    let _ = writeln!(out, "|---|---|---|---|---|---|---|");
    for r in &s.rows {
        let mark = |b: bool| if b { "✓" } else { "" };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} |",
            mark(r.use_dua),
            mark(r.use_dce),
            cell(r.ap_s, 100.0),
            cell(r.ap_t, 100.0),
            cell(r.theta, 100.0),
            cell(r.src_t, 1.0),
            cell(r.tau_b_t, 1.0)
        );
    }
    let seeds = s.rows.first().map(|r| r.seeds.len()).unwrap_or(0);
    let _ = writeln!(out, "\nmean ± sample std over {seeds} seed(s)");
    out
}

/// Everything end to end: data, both detector variants, all four
/// evaluations for every seed, then the summary.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Summary> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.run_dir)?;
    fs::write(cfg.run_dir.join("config.toml"), cfg.to_toml()?)?;
    gen_data(cfg)?;
    for &seed in &cfg.seeds {
        run_stage1(cfg, seed)?;
        for use_dua in [false, true] {
            run_stage2(cfg, seed, use_dua)?;
            for use_dce in [false, true] {
                run_stage3(cfg, seed, use_dua, use_dce)?;
            }
        }
    }
    report(cfg)
}
