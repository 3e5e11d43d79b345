//! Distillation of source region features toward a frozen, domain-balanced
//! classification teacher, trained jointly with the aligned detector.

use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::align::{da_objective_graph, disc_accuracy, Aligner};
use crate::detcore::geometry::{best_match, BBox};
use crate::detcore::{
    assign_targets, detection_loss_graph, gt_jitter, roi_features, rpn_loss, Detector, DetectorConfig,
    JitterConfig,
};
use crate::nn::{ChannelProjection, Gradients, Graph, Mode, ParamStore, Sgd, Tensor, Var};
use crate::parallel;
use crate::synthdomain::{rng_for, Domain, LabeledScene, Raster};
use crate::teacher_cls::ClassifierTeacher;
use crate::{Error, Result};

/// A source region chosen for distillation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub index: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: usize,
    pub iou: f64,
}

/// Regions whose best IoU with ground truth is at least `t`, labelled by
/// their best-matching box (ties to the lower index).
pub fn select_distill_proposals(proposals: &[BBox], gt: &[BBox], gt_labels: &[usize], t: f64) -> Vec<Selected> {
    proposals
        .iter()
        .enumerate()
        .filter_map(|(index, b)| match best_match(b, gt) {
            Some((gi, v)) if v >= t => Some(Selected {
                index,
                bbox: *b,
                label: gt_labels[gi],
                iou: v,
            }),
            _ => None,
        })
        .collect()
}

/// Crop the region from `image`, resize it to the teacher input and return
/// the teacher's logits.
pub fn crop_and_query_teacher(image: &Raster, proposal: &BBox, teacher: &ClassifierTeacher) -> Result<Vec<f64>> {
    if !proposal.is_valid() || proposal.width() <= 1.0 || proposal.height() <= 1.0 {
        return Err(Error::InvalidInput(format!(
            "region {proposal:?} is too small to crop"
        )));
    }
    let s = teacher.config.input_size;
    teacher.logits(&image.crop_resize(proposal, s, s))
}

/// `Q = φ(g(F))` restricted to the K foreground logits: `[N, K]`.
pub fn project_logits(
    g: &mut Graph,
    ps: &ParamStore,
    proj: &ChannelProjection,
    det: &Detector,
    feats: Var,
) -> Var {
    let z = proj.forward(g, ps, feats, Mode::Train);
    let logits = det.head.classify(g, ps, z, Mode::Train);
    let k = det.cfg.num_classes;
    g.select_cols(logits, &(0..k).collect::<Vec<_>>())
}

/// Mean absolute difference over all `R × K` entries; 0 when `R = 0`.
pub fn distill_loss(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("{} teacher vs {} student rows", p.len(), q.len())));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (a, b) in p.iter().zip(q) {
        if a.len() != b.len() {
            return Err(Error::Shape("logit length mismatch".into()));
        }
        total += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        n += a.len();
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

pub fn distill_loss_graph(g: &mut Graph, q: Var, p: &[Vec<f64>]) -> Var {
    let target: Vec<f64> = p.iter().flatten().copied().collect();
    let n = target.len();
    g.weighted_l1(q, target, vec![1.0; n], n as f64)
}

/// Mean cross-entropy of `softmax(Q)` against the labels; 0 when empty.
pub fn aux_cls_loss(q: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if q.len() != labels.len() {
        return Err(Error::Shape("one label per row required".into()));
    }
    let mut total = 0.0;
    for (row, &y) in q.iter().zip(labels) {
        if y >= row.len() {
            return Err(Error::InvalidInput(format!("label {y} out of range for {} classes", row.len())));
        }
        total += crate::nn::log_sum_exp(row) - row[y];
    }
    Ok(if q.is_empty() { 0.0 } else { total / q.len() as f64 })
}

pub fn aux_cls_loss_graph(g: &mut Graph, q: Var, labels: &[usize]) -> Result<Var> {
    let k = g.value(q).shape()[1];
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidInput(format!("label {y} out of range for {k} classes")));
    }
    let n = labels.len();
    Ok(g.softmax_ce(q, labels.to_vec(), vec![1.0; n], n as f64))
}

/// `L_obj = L_DA + λ1·L_dist + λ2·L_cls-aux`.
pub fn total_objective(l_da: f64, l_dist: f64, l_cls: f64, lambda1: f64, lambda2: f64) -> f64 {
    l_da + lambda1 * l_dist + lambda2 * l_cls
}

pub fn total_objective_graph(g: &mut Graph, l_da: Var, l_dist: Var, l_cls: Var, lambda1: f64, lambda2: f64) -> Var {
    let a = g.scale(l_dist, lambda1);
    let b = g.scale(l_cls, lambda2);
    let s = g.add(l_da, a);
    g.add(s, b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainConfig {
    pub iterations: usize,
    pub source_per_step: usize,
    pub target_per_step: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_adv: f64,
    pub lambda_grl: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// IoU floor for distillation regions.
    pub distill_iou: f64,
    pub use_dua: bool,
    pub disc_hidden: usize,
    pub jitter: JitterConfig,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            source_per_step: 2,
            target_per_step: 2,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 5e-4,
            lambda_adv: 1.0,
            lambda_grl: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            distill_iou: 0.8,
            use_dua: false,
            disc_hidden: 32,
            jitter: JitterConfig::default(),
        }
    }
}

/// Detector, discriminators and projection sharing one parameter store.
#[derive(Clone, Debug)]
pub struct DaDetector {
    pub det: Detector,
    pub align: Aligner,
    pub proj: ChannelProjection,
    pub params: ParamStore,
    disc_hidden: usize,
}

#[derive(Serialize, Deserialize)]
struct DaDetectorFile {
    config: DetectorConfig,
    disc_hidden: usize,
    lambda_grl: f64,
    params: serde_json::Value,
}

/// Everything needed to continue training: parameters, optimizer state and
/// the next step index.
#[derive(Serialize, Deserialize)]
struct ResumeFile {
    next_step: usize,
    optimizer: Sgd,
    model: DaDetectorFile,
}

impl DaDetector {
    pub fn new(cfg: DetectorConfig, disc_hidden: usize, lambda_grl: f64, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut rng = rng_for(seed, 0xde7);
        let det = Detector::new(cfg, &mut params, &mut rng);
        let align = Aligner::new(
            &mut params,
            det.cfg.feature_channels(),
            det.cfg.roi_dim(),
            disc_hidden,
            lambda_grl,
            &mut rng,
        );
        let proj = ChannelProjection::identity(&mut params, "dua.proj", det.cfg.feature_channels());
        Self {
            det,
            align,
            proj,
            params,
            disc_hidden,
        }
    }

    fn to_file(&self) -> Result<DaDetectorFile> {
        Ok(DaDetectorFile {
            config: self.det.cfg.clone(),
            disc_hidden: self.disc_hidden,
            lambda_grl: self.align.lambda_grl,
            params: self.params.to_value()?,
        })
    }

    fn from_file(f: &DaDetectorFile) -> Result<Self> {
        let mut m = Self::new(f.config.clone(), f.disc_hidden, f.lambda_grl, 0);
        m.params.load_values_from(&ParamStore::from_value(&f.params)?)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_file()?)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save_resume(&self, path: &Path, optimizer: &Sgd, next_step: usize) -> Result<()> {
        let f = ResumeFile {
            next_step,
            optimizer: optimizer.clone(),
            model: self.to_file()?,
        };
        std::fs::write(path, serde_json::to_string(&f)?)?;
        Ok(())
    }

    pub fn load_resume(path: &Path) -> Result<(Self, Sgd, usize)> {
        let f: ResumeFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok((Self::from_file(&f.model)?, f.optimizer, f.next_step))
    }
}

/// One row per optimisation step. Distillation fields are absent when
/// distillation is off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DuaLogRow {
    pub step: usize,
    #[serde(rename = "L_DA")]
    pub l_da: f64,
    #[serde(rename = "L_det")]
    pub l_det: f64,
    #[serde(rename = "L_adv")]
    pub l_adv: f64,
    #[serde(rename = "L_dist", skip_serializing_if = "Option::is_none", default)]
    pub l_dist: Option<f64>,
    #[serde(rename = "L_cls_aux", skip_serializing_if = "Option::is_none", default)]
    pub l_cls_aux: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_selected: Option<usize>,
    pub disc_acc: f64,
}

#[derive(Default)]
struct ImageOut {
    grads: Option<Gradients>,
    l_det: f64,
    l_adv: f64,
    l_dist: f64,
    l_cls: f64,
    n_selected: usize,
    disc_hit: usize,
    disc_total: usize,
}

enum Item<'a> {
    Source(&'a LabeledScene, u64),
    Target(&'a LabeledScene),
}

fn image_step(
    model: &DaDetector,
    item: &Item,
    teacher: Option<&ClassifierTeacher>,
    cfg: &DetectorTrainConfig,
    scale: f64,
) -> Result<ImageOut> {
    let det = &model.det;
    let ps = &model.params;
    let mut g = Graph::new();
    let scene = match item {
        Item::Source(s, _) | Item::Target(s) => *s,
    };
    let fm = det.backbone.forward(&mut g, ps, &scene.image, Mode::Train)?;
    let d = scene.domain.label();
    let mut out = ImageOut::default();
    let root = match item {
        Item::Target(_) => {
            let rpn_out = det.rpn.forward(&mut g, ps, &fm, Mode::Frozen);
            let learned: Vec<BBox> = det.decode_rpn(g.value(rpn_out)).iter().map(|p| p.bbox).collect();
            let roi = if learned.is_empty() {
                None
            } else {
                Some(roi_features(&mut g, &fm, &learned, det.cfg.pooled)?)
            };
            let adv = model.align.adv_losses(&mut g, ps, fm.var, roi, d)?;
            out.l_adv = g.value(adv.total).item();
            (out.disc_hit, out.disc_total) = disc_accuracy(g.value(adv.image_logits).data(), d);
            g.scale(adv.total, cfg.lambda_adv)
        }
        Item::Source(_, seed) => {
            let mut rng = rng_for(*seed, 0);
            let rpn_out = det.rpn.forward(&mut g, ps, &fm, Mode::Train);
            let (rc, rr) = rpn_loss(
                &mut g,
                rpn_out,
                &det.anchors(),
                &scene.boxes,
                det.cfg.rpn_pos_iou,
                det.cfg.rpn_neg_iou,
            );
            let props: Vec<BBox> = gt_jitter(
                &scene.boxes,
                &cfg.jitter,
                det.cfg.width as f64,
                det.cfg.height as f64,
                &mut rng,
            )
            .into_iter()
            .map(|p| p.bbox)
            .collect();
            let targets = assign_targets(&props, &scene.boxes, &scene.labels, det.cfg.fg_iou, det.cfg.num_classes);
            let feats = roi_features(&mut g, &fm, &props, det.cfg.pooled)?;
            let head = det.head.forward(&mut g, ps, feats, Mode::Train);
            let (ce, reg) = detection_loss_graph(&mut g, head.cls_logits, head.deltas, &targets);
            let a = g.add(rc, rr);
            let b = g.add(a, ce);
            let l_det = g.add(b, reg);
            out.l_det = g.value(l_det).item();

            let learned: Vec<BBox> = det.decode_rpn(g.value(rpn_out)).iter().map(|p| p.bbox).collect();
            let roi = if learned.is_empty() {
                None
            } else {
                Some(roi_features(&mut g, &fm, &learned, det.cfg.pooled)?)
            };
            let adv = model.align.adv_losses(&mut g, ps, fm.var, roi, d)?;
            out.l_adv = g.value(adv.total).item();
            (out.disc_hit, out.disc_total) = disc_accuracy(g.value(adv.image_logits).data(), d);
            let l_da = da_objective_graph(&mut g, l_det, adv.total, cfg.lambda_adv);

            match teacher {
                Some(t) if cfg.use_dua => {
                    let sel = select_distill_proposals(&props, &scene.boxes, &scene.labels, cfg.distill_iou);
                    out.n_selected = sel.len();
                    if sel.is_empty() {
                        l_da
                    } else {
                        let p = sel
                            .iter()
                            .map(|s| crop_and_query_teacher(&scene.image, &s.bbox, t))
                            .collect::<Result<Vec<_>>>()?;
                        let dim = det.cfg.roi_dim();
                        let idx: Vec<usize> = sel
                            .iter()
                            .flat_map(|s| (0..dim).map(move |c| s.index * dim + c))
                            .collect();
                        let sf = g.gather(feats, idx, vec![sel.len(), dim]);
                        let q = project_logits(&mut g, ps, &model.proj, det, sf);
                        let ld = distill_loss_graph(&mut g, q, &p);
                        let labels: Vec<usize> = sel.iter().map(|s| s.label).collect();
                        let lc = aux_cls_loss_graph(&mut g, q, &labels)?;
                        out.l_dist = g.value(ld).item();
                        out.l_cls = g.value(lc).item();
                        total_objective_graph(&mut g, l_da, ld, lc, cfg.lambda1, cfg.lambda2)
                    }
                }
                _ => l_da,
            }
        }
    };
    let scaled = g.scale(root, scale);
    out.grads = Some(g.backward(scaled, ps.len()).0);
    Ok(out)
}

/// Run optimisation steps `steps` (inclusive start, exclusive end). Each
/// step draws its images from a generator keyed by `(seed, step)`, so a run
/// split across calls matches an uninterrupted one.
#[allow(clippy::too_many_arguments)]
pub fn train_detector(
    model: &mut DaDetector,
    opt: &mut Sgd,
    source: &[LabeledScene],
    target: &[LabeledScene],
    teacher: Option<&ClassifierTeacher>,
    cfg: &DetectorTrainConfig,
    seed: u64,
    steps: std::ops::Range<usize>,
) -> Result<Vec<DuaLogRow>> {
    if source.iter().any(|s| s.domain != Domain::Source) {
        return Err(Error::InvalidInput("labelled batches must be source scenes".into()));
    }
    if target.iter().any(|s| s.domain != Domain::Target) {
        return Err(Error::InvalidInput("unlabelled batches must be target scenes".into()));
    }
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidInput("need source and target scenes".into()));
    }
    if cfg.use_dua && teacher.is_none() {
        return Err(Error::InvalidInput("distillation needs a teacher".into()));
    }
    let mut log = Vec::with_capacity(steps.len());
    for step in steps {
        let mut rng = rng_for(seed, 0x10_0000 + step as u64);
        let mut items = Vec::new();
        use rand::Rng;
        for _ in 0..cfg.source_per_step {
            items.push(Item::Source(&source[rng.random_range(0..source.len())], rng.random()));
        }
        for _ in 0..cfg.target_per_step {
            items.push(Item::Target(&target[rng.random_range(0..target.len())]));
        }
        let (ns, nt) = (cfg.source_per_step as f64, cfg.target_per_step as f64);
        let model_ref = &*model;
        let outs = parallel::map(&items, |it| {
            let scale = match it {
                Item::Source(..) => 1.0 / ns,
                Item::Target(_) => 1.0 / nt,
            };
            image_step(model_ref, it, teacher, cfg, scale)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let mut grads = Gradients::new(model.params.len());
        let mut row = DuaLogRow {
            step,
            l_da: 0.0,
            l_det: 0.0,
            l_adv: 0.0,
            l_dist: None,
            l_cls_aux: None,
            n_selected: None,
            disc_acc: 0.0,
        };
        let (mut adv_s, mut adv_t, mut dist, mut cls, mut nsel, mut hit, mut tot) = (0.0, 0.0, 0.0, 0.0, 0, 0, 0);
        for (it, o) in items.iter().zip(&outs) {
            if let Some(gr) = &o.grads {
                grads.merge(gr);
            }
            match it {
                Item::Source(..) => {
                    row.l_det += o.l_det / ns;
                    adv_s += o.l_adv / ns;
                    dist += o.l_dist / ns;
                    cls += o.l_cls / ns;
                    nsel += o.n_selected;
                }
                Item::Target(_) => adv_t += o.l_adv / nt,
            }
            hit += o.disc_hit;
            tot += o.disc_total;
        }
        row.l_adv = adv_s + adv_t;
        row.l_da = row.l_det + cfg.lambda_adv * row.l_adv;
        row.disc_acc = hit as f64 / tot.max(1) as f64;
        if cfg.use_dua {
            row.l_dist = Some(dist);
            row.l_cls_aux = Some(cls);
            row.n_selected = Some(nsel);
        }
        if !grads.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite gradient at step {step}")));
        }
        opt.step(&mut model.params, &grads);
        if step % 100 == 0 {
            info!(
                "detector step {step}: L_det {:.4} L_adv {:.4} disc_acc {:.3}{}",
                row.l_det,
                row.l_adv,
                row.disc_acc,
                row.l_dist.map_or(String::new(), |d| format!(" L_dist {d:.4}"))
            );
        }
        log.push(row);
    }
    Ok(log)
}

/// Student logits for arbitrary regions of one image (diagnostics).
pub fn student_logits(model: &DaDetector, image: &Raster, boxes: &[BBox]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let fm = model.det.backbone.forward(&mut g, &model.params, image, Mode::Frozen)?;
    let f = roi_features(&mut g, &fm, boxes, model.det.cfg.pooled)?;
    let q = project_logits(&mut g, &model.params, &model.proj, &model.det, f);
    let t: &Tensor = g.value(q);
    Ok((0..boxes.len()).map(|i| t.row(i).to_vec()).collect())
}
