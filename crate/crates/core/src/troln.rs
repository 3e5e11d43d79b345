//! Class-agnostic localization network with a pixel-level domain
//! discriminator. Predicts centerness per feature cell and IoU per region;
//! the discriminator's target-probability map re-weights both losses.

use std::path::Path;

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detcore::geometry::{best_match, decode_deltas, encode_deltas, iou, nms, BBox};
use crate::detcore::loss::SMOOTH_L1_BETA;
use crate::detcore::{gt_jitter, roi_features, Backbone, FeatureMap, JitterConfig};
use crate::nn::{smooth_l1, Conv2d, Gradients, Graph, Linear, Mode, ParamStore, RoiWeights, Sgd, Var};
use crate::parallel;
use crate::synthdomain::{rng_for, Domain, LabeledScene, Raster};
use crate::{Error, Result};

pub const PROB_EPS: f64 = 1e-6;
const MAX_LOG_DIST: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrolnConfig {
    pub height: usize,
    pub width: usize,
    pub channels: [usize; 3],
    pub pooled: usize,
    /// Pooled size of the affinity map when averaging over a region.
    pub tau_pooled: usize,
    pub hidden: usize,
    pub disc_hidden: usize,
    /// Regions at or above this IoU supervise the IoU and box heads.
    pub pos_iou: f64,
    pub nms_iou: f64,
    pub num_proposals: usize,
    pub jitter: JitterConfig,
}

impl Default for TrolnConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: [8, 16, 32],
            pooled: 3,
            tau_pooled: 7,
            hidden: 32,
            disc_hidden: 16,
            pos_iou: 0.3,
            nms_iou: 0.7,
            num_proposals: 20,
            jitter: JitterConfig {
                levels: vec![0.03, 0.08, 0.12, 0.16, 0.2, 0.25, 0.3, 0.35, 0.4],
                negatives: 0,
                ..JitterConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrolnTrainConfig {
    pub iterations: usize,
    /// Images per domain per step (source and source-to-target, 1:1).
    pub per_domain: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrolnTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            per_domain: 2,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Per-cell probability of the target domain, `H_f × W_f`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinityMap {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub data: Vec<f64>,
}

impl AffinityMap {
    pub fn new(height: usize, width: usize, stride: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "affinity map {height}×{width} with {} values",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("affinity value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            stride,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, stride: usize, v: f64) -> Result<Self> {
        Self::new(height, width, stride, vec![v; height * width])
    }

    /// Cell containing image point `(x, y)`, clamped to the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let s = self.stride as f64;
        let i = ((y / s).floor().max(0.0) as usize).min(self.height - 1);
        let j = ((x / s).floor().max(0.0) as usize).min(self.width - 1);
        (i, j)
    }

    pub fn at_point(&self, x: f64, y: f64) -> f64 {
        let (i, j) = self.cell_of(x, y);
        self.data[i * self.width + j]
    }
}

/// Centerness of `(x, y)` in `b`; `None` outside the box.
pub fn centerness_target(x: f64, y: f64, b: &BBox) -> Option<f64> {
    if x < b.x1 || x > b.x2 || y < b.y1 || y > b.y2 {
        return None;
    }
    let (l, r, t, bo) = (x - b.x1, b.x2 - x, y - b.y1, b.y2 - y);
    let ratio = |a: f64, c: f64| {
        let hi = a.max(c);
        if hi == 0.0 {
            0.0
        } else {
            a.min(c) / hi
        }
    };
    Some((ratio(l, r) * ratio(t, bo)).sqrt())
}

/// Mean clamped binary cross-entropy of the map against label `d`.
pub fn discriminator_loss(m: &AffinityMap, d: f64) -> f64 {
    let n = m.data.len() as f64;
    m.data
        .iter()
        .map(|&p| {
            let q = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -d * q.ln() - (1.0 - d) * (1.0 - q).ln()
        })
        .sum::<f64>()
        / n
}

/// Region weight: mean of the pooled map over the proposal. Regions spanning
/// at most one cell along either axis collapse to the cell holding their centre.
pub fn tau2(m: &AffinityMap, proposal: &BBox, pooled: usize) -> Result<f64> {
    if !proposal.is_valid() {
        return Err(Error::InvalidInput(format!("degenerate proposal {proposal:?}")));
    }
    let s = m.stride as f64;
    if proposal.width() <= s || proposal.height() <= s {
        let (cx, cy) = proposal.center();
        return Ok(m.at_point(cx, cy));
    }
    let w = RoiWeights::from_image_box(proposal.to_array(), m.stride, m.height, m.width, pooled);
    let v = w.pool(&m.data, 1, m.height, m.width);
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// `(tau1, tau2)`: the map at `pixel` and its pooled mean over `proposal`.
pub fn affinity_weights(m: &AffinityMap, pixel: (f64, f64), proposal: &BBox, pooled: usize) -> Result<(f64, f64)> {
    Ok((m.at_point(pixel.0, pixel.1), tau2(m, proposal, pooled)?))
}

/// Supervision for feature cells whose centre lies inside a ground-truth box.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PixelTargets {
    pub cells: Vec<usize>,
    pub centers: Vec<(f64, f64)>,
    pub cent: Vec<f64>,
    /// Log distances to the left, top, right and bottom sides, in strides.
    pub ltrb: Vec<[f64; 4]>,
}

pub fn pixel_targets(gt: &[BBox], hf: usize, wf: usize, stride: usize) -> PixelTargets {
    let s = stride as f64;
    let mut out = PixelTargets::default();
    for i in 0..hf {
        for j in 0..wf {
            let (x, y) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
            // smallest enclosing box wins
            let owner = gt
                .iter()
                .filter(|b| b.contains_point(x, y))
                .min_by(|a, b| a.area().total_cmp(&b.area()));
            if let Some(b) = owner {
                out.cells.push(i * wf + j);
                out.centers.push((x, y));
                out.cent.push(centerness_target(x, y, b).unwrap_or(0.0));
                out.ltrb.push([
                    ((x - b.x1) / s).ln(),
                    ((y - b.y1) / s).ln(),
                    ((b.x2 - x) / s).ln(),
                    ((b.y2 - y) / s).ln(),
                ]);
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProposalTargets {
    pub boxes: Vec<BBox>,
    pub iou: Vec<f64>,
    pub positive: Vec<bool>,
    pub deltas: Vec<[f64; 4]>,
}

pub fn proposal_targets(boxes: &[BBox], gt: &[BBox], pos_iou: f64) -> ProposalTargets {
    let mut out = ProposalTargets::default();
    for b in boxes {
        let m = best_match(b, gt);
        let v = m.map_or(0.0, |(_, v)| v);
        out.boxes.push(*b);
        out.iou.push(v);
        out.positive.push(v >= pos_iou);
        out.deltas.push(m.map_or([0.0; 4], |(gi, _)| encode_deltas(b, &gt[gi])));
    }
    out
}

/// Plain predicted values for one image: `cent` and `m` are `H_f·W_f`,
/// `ltrb` is channel-major `4·H_f·W_f`, `iou` has one entry per region and
/// `deltas` four.
#[derive(Clone, Debug, PartialEq)]
pub struct TrolnPreds {
    pub cent: Vec<f64>,
    pub ltrb: Vec<f64>,
    pub iou: Vec<f64>,
    pub deltas: Vec<f64>,
    pub m: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrolnLoss {
    pub cent: f64,
    pub rpn_reg: f64,
    pub iou: f64,
    pub rcnn_reg: f64,
    pub dis: f64,
}

impl TrolnLoss {
    /// Localization terms only.
    pub fn localization(&self) -> f64 {
        self.cent + self.rpn_reg + self.iou + self.rcnn_reg
    }

    pub fn total(&self) -> f64 {
        self.localization() + self.dis
    }
}

/// Re-weighted loss on plain values. `tau1` follows `pix.cells`, `tau2`
/// follows `props.boxes`.
pub fn troln_loss(
    p: &TrolnPreds,
    pix: &PixelTargets,
    props: &ProposalTargets,
    tau1: &[f64],
    tau2: &[f64],
    d: f64,
) -> TrolnLoss {
    let hw = p.cent.len();
    let n_pix = pix.cells.len() as f64;
    let mut cent = 0.0;
    let mut rpn_reg = 0.0;
    for (k, &cell) in pix.cells.iter().enumerate() {
        cent += (tau1[k] + 1.0) * (p.cent[cell] - pix.cent[k]).abs();
        for c in 0..4 {
            rpn_reg += smooth_l1(p.ltrb[c * hw + cell] - pix.ltrb[k][c], SMOOTH_L1_BETA);
        }
    }
    let n_pos = props.positive.iter().filter(|&&b| b).count() as f64;
    let mut iou_l = 0.0;
    let mut rcnn_reg = 0.0;
    for r in 0..props.boxes.len() {
        if !props.positive[r] {
            continue;
        }
        iou_l += (tau2[r] + 1.0) * (p.iou[r] - props.iou[r]).abs();
        for c in 0..4 {
            rcnn_reg += smooth_l1(p.deltas[4 * r + c] - props.deltas[r][c], SMOOTH_L1_BETA);
        }
    }
    let m = AffinityMap {
        height: 1,
        width: p.m.len(),
        stride: 1,
        data: p.m.clone(),
    };
    let div = |a: f64, n: f64| if n > 0.0 { a / n } else { 0.0 };
    TrolnLoss {
        cent: div(cent, n_pix),
        rpn_reg: div(rpn_reg, n_pix),
        iou: div(iou_l, n_pos),
        rcnn_reg: div(rcnn_reg, n_pos),
        dis: discriminator_loss(&m, d),
    }
}

/// The unweighted localization loss.
pub fn oln_loss(p: &TrolnPreds, pix: &PixelTargets, props: &ProposalTargets) -> f64 {
    let zeros1 = vec![0.0; pix.cells.len()];
    let zeros2 = vec![0.0; props.boxes.len()];
    troln_loss(p, pix, props, &zeros1, &zeros2, 0.0).localization()
}

pub struct TrolnLossVars {
    pub cent: Var,
    pub rpn_reg: Var,
    pub iou: Var,
    pub rcnn_reg: Var,
    pub dis: Var,
    pub total: Var,
}

/// Graph form of [`troln_loss`]. The weights are constants: no gradient
/// reaches the discriminator through them.
#[allow(clippy::too_many_arguments)]
pub fn troln_loss_graph(
    g: &mut Graph,
    cent: Var,
    ltrb: Var,
    iou_pred: Var,
    deltas: Var,
    m: Var,
    pix: &PixelTargets,
    props: &ProposalTargets,
    tau1: &[f64],
    tau2: &[f64],
    d: f64,
) -> TrolnLossVars {
    let hw = g.value(cent).len();
    let n_pix = pix.cells.len() as f64;
    let mut ct = vec![0.0; hw];
    let mut cw = vec![0.0; hw];
    let mut rt = vec![0.0; 4 * hw];
    let mut rw = vec![0.0; 4 * hw];
    for (k, &cell) in pix.cells.iter().enumerate() {
        ct[cell] = pix.cent[k];
        cw[cell] = tau1[k] + 1.0;
        for c in 0..4 {
            rt[c * hw + cell] = pix.ltrb[k][c];
            rw[c * hw + cell] = 1.0;
        }
    }
    let cent_l = g.weighted_l1(cent, ct, cw, n_pix);
    let rpn_reg = g.smooth_l1(ltrb, rt, rw, SMOOTH_L1_BETA, n_pix);

    let n = props.boxes.len();
    let n_pos = props.positive.iter().filter(|&&b| b).count() as f64;
    let mut it = vec![0.0; n];
    let mut iw = vec![0.0; n];
    let mut dt = vec![0.0; 4 * n];
    let mut dw = vec![0.0; 4 * n];
    for r in 0..n {
        if props.positive[r] {
            it[r] = props.iou[r];
            iw[r] = tau2[r] + 1.0;
            for c in 0..4 {
                dt[4 * r + c] = props.deltas[r][c];
                dw[4 * r + c] = 1.0;
            }
        }
    }
    let iou_l = g.weighted_l1(iou_pred, it, iw, n_pos);
    let rcnn_reg = g.smooth_l1(deltas, dt, dw, SMOOTH_L1_BETA, n_pos);
    let dis = g.bce_prob(m, vec![d; hw], PROB_EPS, hw as f64);
    let a = g.add(cent_l, rpn_reg);
    let b = g.add(a, iou_l);
    let c = g.add(b, rcnn_reg);
    let total = g.add(c, dis);
    TrolnLossVars {
        cent: cent_l,
        rpn_reg,
        iou: iou_l,
        rcnn_reg,
        dis,
        total,
    }
}

#[derive(Clone, Debug)]
struct TrolnNet {
    backbone: Backbone,
    cent: Conv2d,
    reg: Conv2d,
    disc1: Conv2d,
    disc2: Conv2d,
    fc: Linear,
    iou_head: Linear,
    box_head: Linear,
}

struct MapOut {
    fm: FeatureMap,
    cent: Var,
    ltrb: Var,
    m: Var,
}

impl TrolnNet {
    fn new<R: Rng>(ps: &mut ParamStore, cfg: &TrolnConfig, rng: &mut R) -> Self {
        let c = cfg.channels[2];
        let roi_dim = c * cfg.pooled * cfg.pooled;
        let net = Self {
            backbone: Backbone::new(ps, "troln.backbone", cfg.height, cfg.width, cfg.channels, rng),
            cent: Conv2d::new(ps, "troln.cent", c, 1, 1, 1, 0, rng),
            reg: Conv2d::new(ps, "troln.reg", c, 4, 1, 1, 0, rng),
            disc1: Conv2d::new(ps, "troln.disc1", c, cfg.disc_hidden, 1, 1, 0, rng),
            disc2: Conv2d::new(ps, "troln.disc2", cfg.disc_hidden, 1, 1, 1, 0, rng),
            fc: Linear::new(ps, "troln.fc", roi_dim, cfg.hidden, rng),
            iou_head: Linear::with_std(ps, "troln.iou", cfg.hidden, 1, 0.01, rng),
            box_head: Linear::with_std(ps, "troln.box", cfg.hidden, 4, 0.001, rng),
        };
        for w in [net.cent.w, net.reg.w] {
            ps.get_mut(w).scale(0.1);
        }
        ps.get_mut(net.cent.b).data_mut()[0] = 0.5;
        ps.get_mut(net.iou_head.b).data_mut()[0] = 0.5;
        net
    }

    fn maps(&self, g: &mut Graph, ps: &ParamStore, img: &Raster, mode: Mode) -> Result<MapOut> {
        let fm = self.backbone.forward(g, ps, img, mode)?;
        let cent = self.cent.forward(g, ps, fm.var, mode);
        let ltrb = self.reg.forward(g, ps, fm.var, mode);
        let h = self.disc1.forward(g, ps, fm.var, mode);
        let h = g.relu(h);
        let z = self.disc2.forward(g, ps, h, mode);
        let m = g.sigmoid(z);
        Ok(MapOut { fm, cent, ltrb, m })
    }

    fn region_heads(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        fm: &FeatureMap,
        boxes: &[BBox],
        pooled: usize,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        let f = roi_features(g, fm, boxes, pooled)?;
        let h = self.fc.forward(g, ps, f, mode);
        let h = g.relu(h);
        let b = self.iou_head.forward(g, ps, h, mode);
        let d = self.box_head.forward(g, ps, h, mode);
        Ok((b, d))
    }
}

/// A frozen localization network with its parameters.
#[derive(Clone, Debug)]
pub struct Troln {
    pub config: TrolnConfig,
    params: ParamStore,
    net: TrolnNet,
}

/// Localization-quality proposal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizedProposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub c: f64,
    pub b: f64,
    pub tau1: f64,
    pub tau2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrolnLogRow {
    pub step: usize,
    #[serde(rename = "L_cent")]
    pub cent: f64,
    #[serde(rename = "L_rpn_reg")]
    pub rpn_reg: f64,
    #[serde(rename = "L_iou")]
    pub iou: f64,
    #[serde(rename = "L_rcnn_reg")]
    pub rcnn_reg: f64,
    #[serde(rename = "L_dis")]
    pub dis: f64,
    pub disc_acc: f64,
}

#[derive(Serialize, Deserialize)]
struct TrolnFile {
    config: TrolnConfig,
    params: serde_json::Value,
}

struct StepOut {
    loss: TrolnLoss,
    grads: Gradients,
    disc_correct: usize,
    disc_total: usize,
}

impl Troln {
    pub fn init(config: TrolnConfig, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let net = TrolnNet::new(&mut params, &config, &mut rng_for(seed, 0x701));
        Self {
            config,
            params,
            net,
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn fingerprint(&self) -> u64 {
        self.params.fingerprint()
    }

    fn affinity_from(&self, g: &Graph, mo: &MapOut) -> AffinityMap {
        AffinityMap {
            height: mo.fm.height,
            width: mo.fm.width,
            stride: mo.fm.stride,
            data: g.value(mo.m).data().to_vec(),
        }
    }

    /// Affinity map of one image.
    pub fn affinity(&self, img: &Raster) -> Result<AffinityMap> {
        let mut g = Graph::new();
        let mo = self.net.maps(&mut g, &self.params, img, Mode::Frozen)?;
        Ok(self.affinity_from(&g, &mo))
    }

    /// Forward and backward on one labelled image.
    fn step_one<R: Rng>(&self, scene: &LabeledScene, rng: &mut R) -> Result<StepOut> {
        let cfg = &self.config;
        let mut g = Graph::new();
        let mo = self.net.maps(&mut g, &self.params, &scene.image, Mode::Train)?;
        let m = self.affinity_from(&g, &mo);
        let pix = pixel_targets(&scene.boxes, m.height, m.width, m.stride);
        let tau1: Vec<f64> = pix.cells.iter().map(|&c| m.data[c]).collect();
        let boxes: Vec<BBox> = gt_jitter(
            &scene.boxes,
            &cfg.jitter,
            cfg.width as f64,
            cfg.height as f64,
            rng,
        )
        .into_iter()
        .map(|p| p.bbox)
        .collect();
        let props = proposal_targets(&boxes, &scene.boxes, cfg.pos_iou);
        let tau2s = boxes
            .iter()
            .map(|b| tau2(&m, b, cfg.tau_pooled))
            .collect::<Result<Vec<f64>>>()?;
        let (b, d) = self
            .net
            .region_heads(&mut g, &self.params, &mo.fm, &boxes, cfg.pooled, Mode::Train)?;
        let dlabel = scene.domain.label();
        let lv = troln_loss_graph(&mut g, mo.cent, mo.ltrb, b, d, mo.m, &pix, &props, &tau1, &tau2s, dlabel);
        let loss = TrolnLoss {
            cent: g.value(lv.cent).item(),
            rpn_reg: g.value(lv.rpn_reg).item(),
            iou: g.value(lv.iou).item(),
            rcnn_reg: g.value(lv.rcnn_reg).item(),
            dis: g.value(lv.dis).item(),
        };
        let disc_correct = m.data.iter().filter(|&&p| (p > 0.5) == (dlabel > 0.5)).count();
        let (grads, _) = g.backward(lv.total, self.params.len());
        Ok(StepOut {
            loss,
            grads,
            disc_correct,
            disc_total: m.data.len(),
        })
    }

    /// Proposals with predicted centerness and IoU plus affinity weights,
    /// at most `num_proposals`, ranked by centerness after NMS.
    pub fn infer(&self, img: &Raster) -> Result<Vec<LocalizedProposal>> {
        let cfg = &self.config;
        let mut g = Graph::new();
        let mo = self.net.maps(&mut g, &self.params, img, Mode::Frozen)?;
        let m = self.affinity_from(&g, &mo);
        let (hf, wf, s) = (m.height, m.width, m.stride as f64);
        let hw = hf * wf;
        let cent = g.value(mo.cent).data().to_vec();
        let ltrb = g.value(mo.ltrb).data().to_vec();
        let (w, h) = (cfg.width as f64, cfg.height as f64);
        let mut cand = Vec::new();
        let mut scores = Vec::new();
        for cell in 0..hw {
            let (i, j) = (cell / wf, cell % wf);
            let (x, y) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
            let e = |c: usize| s * ltrb[c * hw + cell].min(MAX_LOG_DIST).exp();
            let b = BBox::new(x - e(0), y - e(1), x + e(2), y + e(3)).clip(w, h);
            if b.width() >= 2.0 && b.height() >= 2.0 {
                cand.push(b);
                scores.push(cent[cell].clamp(0.0, 1.0));
            }
        }
        let keep: Vec<usize> = nms(&cand, &scores, cfg.nms_iou)
            .into_iter()
            .take(cfg.num_proposals)
            .collect();
        if keep.is_empty() {
            return Ok(Vec::new());
        }
        let first: Vec<BBox> = keep.iter().map(|&k| cand[k]).collect();
        let (_, d) = self
            .net
            .region_heads(&mut g, &self.params, &mo.fm, &first, cfg.pooled, Mode::Frozen)?;
        let dv = g.value(d).data().to_vec();
        let refined: Vec<BBox> = first
            .iter()
            .enumerate()
            .map(|(r, b)| {
                let nb = decode_deltas(b, &dv[4 * r..4 * r + 4]).clip(w, h);
                if nb.width() >= 2.0 && nb.height() >= 2.0 {
                    nb
                } else {
                    *b
                }
            })
            .collect();
        let (bq, _) = self
            .net
            .region_heads(&mut g, &self.params, &mo.fm, &refined, cfg.pooled, Mode::Frozen)?;
        let bv = g.value(bq).data().to_vec();
        refined
            .iter()
            .zip(&keep)
            .enumerate()
            .map(|(r, (b, &k))| {
                let (cx, cy) = b.center();
                Ok(LocalizedProposal {
                    bbox: *b,
                    c: scores[k],
                    b: bv[r].clamp(0.0, 1.0),
                    tau1: m.at_point(cx, cy),
                    tau2: tau2(&m, b, cfg.tau_pooled)?,
                })
            })
            .collect()
    }

    /// Predicted IoU for given regions (clamped), for evaluation.
    pub fn predict_iou(&self, img: &Raster, boxes: &[BBox]) -> Result<Vec<f64>> {
        if boxes.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let mo = self.net.maps(&mut g, &self.params, img, Mode::Frozen)?;
        let (b, _) = self
            .net
            .region_heads(&mut g, &self.params, &mo.fm, boxes, self.config.pooled, Mode::Frozen)?;
        Ok(g.value(b).data().iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = TrolnFile {
            config: self.config.clone(),
            params: self.params.to_value()?,
        };
        std::fs::write(path, serde_json::to_string(&f)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: TrolnFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut t = Self::init(f.config, 0);
        t.params.load_values_from(&ParamStore::from_value(&f.params)?)?;
        Ok(t)
    }
}

/// Train on source and source-to-target scenes, sampled 1:1 per step.
pub fn train_troln(
    scenes: &[LabeledScene],
    cfg: &TrolnConfig,
    train: &TrolnTrainConfig,
    seed: u64,
) -> Result<(Troln, Vec<TrolnLogRow>)> {
    let src: Vec<&LabeledScene> = scenes.iter().filter(|s| s.domain == Domain::Source).collect();
    let s2t: Vec<&LabeledScene> = scenes
        .iter()
        .filter(|s| s.domain == Domain::SourceToTarget)
        .collect();
    if scenes.iter().any(|s| s.domain == Domain::Target) {
        return Err(Error::InvalidInput("target scenes carry no labels for this network".into()));
    }
    if src.is_empty() || s2t.is_empty() {
        return Err(Error::InvalidInput(
            "training needs both source and source-to-target scenes".into(),
        ));
    }
    let mut model = Troln::init(cfg.clone(), seed);
    let mut opt = Sgd::new(train.lr, train.momentum, train.weight_decay);
    let mut rng = rng_for(seed, 0x702);
    let mut log = Vec::with_capacity(train.iterations);
    for step in 0..train.iterations {
        let mut batch: Vec<(&LabeledScene, u64)> = Vec::new();
        for _ in 0..train.per_domain {
            batch.push((src[rng.random_range(0..src.len())], rng.random()));
            batch.push((s2t[rng.random_range(0..s2t.len())], rng.random()));
        }
        let outs = parallel::map(&batch, |(scene, s)| model.step_one(scene, &mut rng_for(*s, 0)))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let mut grads = Gradients::new(model.params.len());
        let mut sum = TrolnLoss::default();
        let (mut hit, mut tot) = (0, 0);
        for o in &outs {
            grads.merge(&o.grads);
            sum.cent += o.loss.cent;
            sum.rpn_reg += o.loss.rpn_reg;
            sum.iou += o.loss.iou;
            sum.rcnn_reg += o.loss.rcnn_reg;
            sum.dis += o.loss.dis;
            hit += o.disc_correct;
            tot += o.disc_total;
        }
        let k = outs.len() as f64;
        grads.scale(1.0 / k);
        opt.step(&mut model.params, &grads);
        let row = TrolnLogRow {
            step,
            cent: sum.cent / k,
            rpn_reg: sum.rpn_reg / k,
            iou: sum.iou / k,
            rcnn_reg: sum.rcnn_reg / k,
            dis: sum.dis / k,
            disc_acc: hit as f64 / tot.max(1) as f64,
        };
        if step % 100 == 0 {
            info!(
                "troln step {step}: cent {:.4} iou {:.4} dis {:.4} acc {:.3}",
                row.cent, row.iou, row.dis, row.disc_acc
            );
        }
        log.push(row);
    }
    Ok((model, log))
}

/// `troln_infer` over one image.
pub fn troln_infer(img: &Raster, model: &Troln) -> Result<Vec<LocalizedProposal>> {
    model.infer(img)
}

/// True IoU of each region against its best ground-truth match.
pub fn true_iou(boxes: &[BBox], gt: &[BBox]) -> Vec<f64> {
    boxes
        .iter()
        .map(|b| gt.iter().map(|g| iou(b, g)).fold(0.0, f64::max))
        .collect()
}

#[cfg(test)]
mod tests;
