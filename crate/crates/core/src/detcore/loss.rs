use serde::{Deserialize, Serialize};

use super::geometry::{best_match, encode_deltas, BBox};
use crate::nn::{smooth_l1, Graph, Var};

pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

/// Training target of one region: class in `0..=K` (K is background) and,
/// for foreground regions, regression deltas toward the matched box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiTarget {
    pub label: usize,
    pub deltas: Option<[f64; 4]>,
    pub iou: f64,
    pub gt_index: Option<usize>,
}

/// Match regions to ground truth by best IoU; IoU ≥ `fg_iou` is foreground.
pub fn assign_targets(
    boxes: &[BBox],
    gt: &[BBox],
    gt_labels: &[usize],
    fg_iou: f64,
    num_classes: usize,
) -> Vec<RoiTarget> {
    boxes
        .iter()
        .map(|b| match best_match(b, gt) {
            Some((gi, v)) if v >= fg_iou => RoiTarget {
                label: gt_labels[gi],
                deltas: Some(encode_deltas(b, &gt[gi])),
                iou: v,
                gt_index: Some(gi),
            },
            m => RoiTarget {
                label: num_classes,
                deltas: None,
                iou: m.map_or(0.0, |(_, v)| v),
                gt_index: None,
            },
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetLoss {
    pub cls: f64,
    pub reg: f64,
}

impl DetLoss {
    pub fn total(&self) -> f64 {
        self.cls + self.reg
    }
}

/// Detection loss on post-softmax scores: mean cross-entropy over regions
/// plus smooth-L1 on the labelled class's deltas of foreground regions,
/// normalised by the region count. No foreground means no regression term.
pub fn detection_loss(cls_scores: &[Vec<f64>], deltas: &[Vec<f64>], targets: &[RoiTarget]) -> DetLoss {
    let n = targets.len();
    if n == 0 {
        return DetLoss { cls: 0.0, reg: 0.0 };
    }
    let mut ce = 0.0;
    let mut reg = 0.0;
    for ((p, d), t) in cls_scores.iter().zip(deltas).zip(targets) {
        ce -= p[t.label].ln();
        if let Some(td) = t.deltas {
            for k in 0..4 {
                reg += smooth_l1(d[4 * t.label + k] - td[k], SMOOTH_L1_BETA);
            }
        }
    }
    DetLoss {
        cls: ce / n as f64,
        reg: reg / n as f64,
    }
}

/// Graph form of [`detection_loss`] on logits `[N, K+1]` and deltas `[N, 4K]`.
pub fn detection_loss_graph(
    g: &mut Graph,
    cls_logits: Var,
    deltas: Var,
    targets: &[RoiTarget],
) -> (Var, Var) {
    let n = targets.len();
    let dk = g.value(deltas).shape()[1];
    let ce = g.softmax_ce(
        cls_logits,
        targets.iter().map(|t| t.label).collect(),
        vec![1.0; n],
        n as f64,
    );
    let mut target = vec![0.0; n * dk];
    let mut weight = vec![0.0; n * dk];
    for (r, t) in targets.iter().enumerate() {
        if let Some(td) = t.deltas {
            for k in 0..4 {
                target[r * dk + 4 * t.label + k] = td[k];
                weight[r * dk + 4 * t.label + k] = 1.0;
            }
        }
    }
    let reg = g.smooth_l1(deltas, target, weight, SMOOTH_L1_BETA, n as f64);
    (ce, reg)
}
