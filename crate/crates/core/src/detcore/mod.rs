//! Miniature two-stage detector: a strided convolutional backbone, a
//! single-anchor region proposal head, region pooling, and a shared
//! classification/regression head.

pub mod geometry;
pub mod loss;
pub mod proposals;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{softmax, Conv2d, Graph, Linear, Mode, ParamStore, RoiWeights, Var};
use crate::synthdomain::Raster;
use crate::{Error, Result};
use geometry::{decode_deltas, nms, BBox};
pub use loss::{assign_targets, detection_loss, detection_loss_graph, DetLoss, RoiTarget};
pub use proposals::{anchors, gt_jitter, label_anchors, JitterConfig, Proposal, ProposalMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Output channels of the three stride-2 convolutions.
    pub channels: [usize; 3],
    pub pooled: usize,
    pub hidden: usize,
    pub anchor_size: f64,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_nms_iou: f64,
    pub rpn_top_n: usize,
    pub fg_iou: f64,
    pub nms_iou: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 3,
            channels: [8, 16, 64],
            pooled: 3,
            hidden: 64,
            anchor_size: 16.0,
            rpn_pos_iou: 0.5,
            rpn_neg_iou: 0.3,
            rpn_nms_iou: 0.7,
            rpn_top_n: 16,
            fg_iou: 0.5,
            nms_iou: 0.5,
        }
    }
}

impl DetectorConfig {
    pub const STRIDE: usize = 8;

    pub fn feature_channels(&self) -> usize {
        self.channels[2]
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (
            self.height.div_ceil(Self::STRIDE),
            self.width.div_ceil(Self::STRIDE),
        )
    }

    pub fn roi_dim(&self) -> usize {
        self.feature_channels() * self.pooled * self.pooled
    }
}

/// Backbone output inside a graph: `[C, H_f, W_f]`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

/// Three 3×3 stride-2 convolutions with ReLU: total stride 8.
#[derive(Clone, Debug)]
pub struct Backbone {
    convs: Vec<Conv2d>,
    height: usize,
    width: usize,
}

impl Backbone {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        prefix: &str,
        height: usize,
        width: usize,
        channels: [usize; 3],
        rng: &mut R,
    ) -> Self {
        let mut cin = 3;
        let convs = channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let c = Conv2d::new(ps, &format!("{prefix}.conv{i}"), cin, cout, 3, 2, 1, rng);
                cin = cout;
                c
            })
            .collect();
        Self {
            convs,
            height,
            width,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        image: &Raster,
        mode: Mode,
    ) -> Result<FeatureMap> {
        if image.height() != self.height || image.width() != self.width {
            return Err(Error::Shape(format!(
                "backbone expects {}×{}, got {}×{}",
                self.height,
                self.width,
                image.height(),
                image.width()
            )));
        }
        let mut x = g.input(image.to_tensor());
        for conv in &self.convs {
            x = conv.forward(g, ps, x, mode);
            x = g.relu(x);
        }
        let shape = g.value(x).shape().to_vec();
        Ok(FeatureMap {
            var: x,
            channels: shape[0],
            height: shape[1],
            width: shape[2],
            stride: DetectorConfig::STRIDE,
        })
    }
}

/// Pooled region features `F(r)`, shape `[N, C * P * P]`.
pub fn roi_features(g: &mut Graph, fm: &FeatureMap, boxes: &[BBox], pooled: usize) -> Result<Var> {
    if fm.height == 0 || fm.width == 0 {
        return Err(Error::Shape("empty feature map".into()));
    }
    let rois = boxes
        .iter()
        .map(|b| {
            if !b.is_valid() {
                return Err(Error::InvalidInput(format!("degenerate box {b:?}")));
            }
            Ok(RoiWeights::from_image_box(
                b.to_array(),
                fm.stride,
                fm.height,
                fm.width,
                pooled,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(g.roi_pool(fm.var, rois))
}

/// Region head. The classification branch `fc -> relu -> cls` is the
/// function reused for projected features during distillation.
#[derive(Clone, Debug)]
pub struct RoiHead {
    pub fc: Linear,
    pub cls: Linear,
    pub reg: Linear,
}

pub struct HeadOut {
    pub hidden: Var,
    /// `[N, K + 1]`, background last.
    pub cls_logits: Var,
    /// `[N, 4K]`, class-major.
    pub deltas: Var,
}

impl RoiHead {
    pub fn new<R: Rng>(ps: &mut ParamStore, prefix: &str, in_dim: usize, hidden: usize, k: usize, rng: &mut R) -> Self {
        Self {
            fc: Linear::new(ps, &format!("{prefix}.fc"), in_dim, hidden, rng),
            cls: Linear::with_std(ps, &format!("{prefix}.cls"), hidden, k + 1, 0.01, rng),
            reg: Linear::with_std(ps, &format!("{prefix}.reg"), hidden, 4 * k, 0.001, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, feats: Var, mode: Mode) -> HeadOut {
        let h = self.fc.forward(g, ps, feats, mode);
        let h = g.relu(h);
        let cls_logits = self.cls.forward(g, ps, h, mode);
        let deltas = self.reg.forward(g, ps, h, mode);
        HeadOut {
            hidden: h,
            cls_logits,
            deltas,
        }
    }

    /// Classification branch only.
    pub fn classify(&self, g: &mut Graph, ps: &ParamStore, feats: Var, mode: Mode) -> Var {
        let h = self.fc.forward(g, ps, feats, mode);
        let h = g.relu(h);
        self.cls.forward(g, ps, h, mode)
    }
}

/// 1×1 convolution producing one objectness logit and four deltas per cell.
#[derive(Clone, Debug)]
pub struct RpnHead {
    pub conv: Conv2d,
}

impl RpnHead {
    pub fn new<R: Rng>(ps: &mut ParamStore, prefix: &str, channels: usize, rng: &mut R) -> Self {
        let conv = Conv2d::new(ps, &format!("{prefix}.rpn"), channels, 5, 1, 1, 0, rng);
        ps.get_mut(conv.w).scale(0.1);
        Self { conv }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, fm: &FeatureMap, mode: Mode) -> Var {
        self.conv.forward(g, ps, fm.var, mode)
    }
}

/// Per-region output of the detector head before NMS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadOutput {
    pub proposal_id: usize,
    pub proposal: BBox,
    /// Softmax over `K + 1` classes, background last.
    pub cls: Vec<f64>,
    /// Regressed box for each foreground class.
    pub boxes: Vec<BBox>,
}

/// A scored detection (post-softmax `cls`, background last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub cls: Vec<f64>,
    pub proposal_id: usize,
}

impl Detection {
    /// Best foreground class and its score.
    pub fn top_foreground(&self) -> (usize, f64) {
        top_foreground(&self.cls)
    }
}

/// Argmax over all but the last (background) entry; ties go to the lower index.
pub fn top_foreground(cls: &[f64]) -> (usize, f64) {
    let k = cls.len() - 1;
    let mut best = (0, cls[0]);
    for (i, &v) in cls.iter().enumerate().take(k).skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Detector parameters and module layout.
#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: DetectorConfig,
    pub backbone: Backbone,
    pub rpn: RpnHead,
    pub head: RoiHead,
}

impl Detector {
    pub fn new<R: Rng>(cfg: DetectorConfig, ps: &mut ParamStore, rng: &mut R) -> Self {
        let backbone = Backbone::new(ps, "det.backbone", cfg.height, cfg.width, cfg.channels, rng);
        let rpn = RpnHead::new(ps, "det", cfg.feature_channels(), rng);
        let head = RoiHead::new(ps, "det.head", cfg.roi_dim(), cfg.hidden, cfg.num_classes, rng);
        Self {
            cfg,
            backbone,
            rpn,
            head,
        }
    }

    pub fn anchors(&self) -> Vec<BBox> {
        let (h, w) = self.cfg.feature_size();
        anchors(h, w, DetectorConfig::STRIDE, self.cfg.anchor_size)
    }

    /// Decode RPN outputs `[5, H_f, W_f]` into proposals: top-N after NMS.
    pub fn decode_rpn(&self, rpn_out: &crate::nn::Tensor) -> Vec<Proposal> {
        let anchors = self.anchors();
        let hw = anchors.len();
        let d = rpn_out.data();
        let (w, h) = (self.cfg.width as f64, self.cfg.height as f64);
        let mut props = Vec::with_capacity(hw);
        for (cell, a) in anchors.iter().enumerate() {
            let deltas = [d[hw + cell], d[2 * hw + cell], d[3 * hw + cell], d[4 * hw + cell]];
            let b = decode_deltas(a, &deltas).clip(w, h);
            if b.width() >= 2.0 && b.height() >= 2.0 {
                props.push(Proposal {
                    bbox: b,
                    objectness: crate::nn::sigmoid(d[cell]),
                });
            }
        }
        let boxes: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
        let scores: Vec<f64> = props.iter().map(|p| p.objectness).collect();
        nms(&boxes, &scores, self.cfg.rpn_nms_iou)
            .into_iter()
            .take(self.cfg.rpn_top_n)
            .map(|i| props[i])
            .collect()
    }

    /// Proposals for one image. `GtJitter` needs ground truth.
    #[allow(clippy::too_many_arguments)]
    pub fn propose<R: Rng>(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        fm: &FeatureMap,
        mode: ProposalMode,
        gt: Option<&[BBox]>,
        jitter: &JitterConfig,
        rng: &mut R,
    ) -> Result<Vec<Proposal>> {
        if fm.height == 0 || fm.width == 0 {
            return Err(Error::Shape("empty feature map".into()));
        }
        match mode {
            ProposalMode::GtJitter => {
                let gt = gt.ok_or_else(|| {
                    Error::InvalidInput("gt_jitter proposals need ground-truth boxes".into())
                })?;
                Ok(gt_jitter(
                    gt,
                    jitter,
                    self.cfg.width as f64,
                    self.cfg.height as f64,
                    rng,
                ))
            }
            ProposalMode::Learned => {
                let out = self.rpn.forward(g, ps, fm, Mode::Frozen);
                Ok(self.decode_rpn(g.value(out)))
            }
        }
    }

    /// Frozen-parameter head evaluation on the given proposals.
    pub fn infer_on(
        &self,
        ps: &ParamStore,
        image: &Raster,
        proposals: &[BBox],
    ) -> Result<Vec<HeadOutput>> {
        let mut g = Graph::new();
        let fm = self.backbone.forward(&mut g, ps, image, Mode::Frozen)?;
        self.head_outputs(&mut g, ps, &fm, proposals)
    }

    pub fn head_outputs(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        fm: &FeatureMap,
        proposals: &[BBox],
    ) -> Result<Vec<HeadOutput>> {
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let feats = roi_features(g, fm, proposals, self.cfg.pooled)?;
        let out = self.head.forward(g, ps, feats, Mode::Frozen);
        let k = self.cfg.num_classes;
        let (w, h) = (self.cfg.width as f64, self.cfg.height as f64);
        let logits = g.value(out.cls_logits);
        let deltas = g.value(out.deltas);
        Ok(proposals
            .iter()
            .enumerate()
            .map(|(i, p)| HeadOutput {
                proposal_id: i,
                proposal: *p,
                cls: softmax(logits.row(i)),
                boxes: (0..k)
                    .map(|c| decode_deltas(p, &deltas.row(i)[4 * c..4 * c + 4]).clip(w, h))
                    .collect(),
            })
            .collect())
    }

    /// Plain inference with the detector's own proposals.
    pub fn infer(&self, ps: &ParamStore, image: &Raster) -> Result<Vec<HeadOutput>> {
        let mut g = Graph::new();
        let fm = self.backbone.forward(&mut g, ps, image, Mode::Frozen)?;
        let rpn = self.rpn.forward(&mut g, ps, &fm, Mode::Frozen);
        let boxes: Vec<BBox> = self.decode_rpn(g.value(rpn)).iter().map(|p| p.bbox).collect();
        self.head_outputs(&mut g, ps, &fm, &boxes)
    }
}

/// RPN supervision on `[5, H_f, W_f]` outputs: objectness BCE over labelled
/// anchors and smooth-L1 on positive anchors' deltas.
pub fn rpn_loss(g: &mut Graph, rpn_out: Var, anchors: &[BBox], gt: &[BBox], pos_iou: f64, neg_iou: f64) -> (Var, Var) {
    let hw = anchors.len();
    let labels = label_anchors(anchors, gt, pos_iou, neg_iou);
    let mut idx = Vec::new();
    let mut target = Vec::new();
    let mut reg_t = vec![0.0; 5 * hw];
    let mut reg_w = vec![0.0; 5 * hw];
    let mut n_pos = 0usize;
    for (cell, &(l, gi)) in labels.iter().enumerate() {
        if l < 0 {
            continue;
        }
        idx.push(cell);
        target.push(f64::from(l));
        if let Some(gi) = gi {
            n_pos += 1;
            let d = geometry::encode_deltas(&anchors[cell], &gt[gi]);
            for k in 0..4 {
                reg_t[(k + 1) * hw + cell] = d[k];
                reg_w[(k + 1) * hw + cell] = 1.0;
            }
        }
    }
    let n = idx.len();
    let obj = g.gather(rpn_out, idx, vec![n]);
    let cls = g.bce_logits(obj, target, n as f64);
    let reg = g.smooth_l1(rpn_out, reg_t, reg_w, loss::SMOOTH_L1_BETA, n_pos as f64);
    (cls, reg)
}

/// Turn head outputs into detections (best foreground class box) and apply
/// class-agnostic NMS ranked by the best foreground score.
pub fn postprocess(outputs: &[HeadOutput], nms_iou: f64) -> Vec<Detection> {
    let dets: Vec<Detection> = outputs
        .iter()
        .map(|o| {
            let (c, _) = top_foreground(&o.cls);
            Detection {
                bbox: o.boxes[c],
                cls: o.cls.clone(),
                proposal_id: o.proposal_id,
            }
        })
        .filter(|d| d.bbox.is_valid())
        .collect();
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.top_foreground().1).collect();
    nms(&boxes, &scores, nms_iou)
        .into_iter()
        .map(|i| dets[i].clone())
        .collect()
}
