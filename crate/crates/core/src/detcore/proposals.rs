use rand::Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{best_match, iou, BBox};

/// Region proposal with its objectness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub objectness: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalMode {
    Learned,
    GtJitter,
}

/// Settings for ground-truth-jitter proposals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JitterConfig {
    /// Maximum offset per level, as a fraction of the box side.
    pub levels: Vec<f64>,
    pub negatives: usize,
    /// Negatives overlap every ground-truth box below this IoU when possible.
    pub negative_max_iou: f64,
    pub min_size: f64,
    pub max_size: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            levels: vec![0.04, 0.1, 0.2, 0.3],
            negatives: 6,
            negative_max_iou: 0.3,
            min_size: 8.0,
            max_size: 28.0,
        }
    }
}

const MIN_SIDE: f64 = 2.0;

/// Ground-truth boxes perturbed by uniform offsets (one copy per level and
/// box, level-major) followed by random negatives. Exactly
/// `levels × gt + negatives` proposals.
pub fn gt_jitter<R: Rng>(
    gt: &[BBox],
    cfg: &JitterConfig,
    width: f64,
    height: f64,
    rng: &mut R,
) -> Vec<Proposal> {
    let mut out = Vec::with_capacity(cfg.levels.len() * gt.len() + cfg.negatives);
    for &level in &cfg.levels {
        for g in gt {
            let bbox = if level == 0.0 {
                *g
            } else {
                let (w, h) = (g.width(), g.height());
                let mut j = |side: f64| rng.random_range(-level..=level) * side;
                let b = BBox::new(g.x1 + j(w), g.y1 + j(h), g.x2 + j(w), g.y2 + j(h));
                repair(b.clip(width, height), width, height)
            };
            out.push(Proposal {
                bbox,
                objectness: 1.0,
            });
        }
    }
    for _ in 0..cfg.negatives {
        let mut cand = BBox::new(0.0, 0.0, MIN_SIDE, MIN_SIDE);
        for _attempt in 0..30 {
            let bw = rng.random_range(cfg.min_size..=cfg.max_size).min(width);
            let bh = rng.random_range(cfg.min_size..=cfg.max_size).min(height);
            let x1 = rng.random_range(0.0..=(width - bw));
            let y1 = rng.random_range(0.0..=(height - bh));
            cand = BBox::new(x1, y1, x1 + bw, y1 + bh);
            if best_match(&cand, gt).is_none_or(|(_, v)| v < cfg.negative_max_iou) {
                break;
            }
        }
        out.push(Proposal {
            bbox: cand,
            objectness: 0.0,
        });
    }
    out
}

/// Grow a clipped box back to the minimum side length inside the image.
fn repair(b: BBox, width: f64, height: f64) -> BBox {
    let fix = |lo: f64, hi: f64, limit: f64| -> (f64, f64) {
        if hi - lo >= MIN_SIDE {
            return (lo, hi);
        }
        let c = (0.5 * (lo + hi)).clamp(0.5 * MIN_SIDE, limit - 0.5 * MIN_SIDE);
        (c - 0.5 * MIN_SIDE, c + 0.5 * MIN_SIDE)
    };
    let (x1, x2) = fix(b.x1, b.x2, width);
    let (y1, y2) = fix(b.y1, b.y2, height);
    BBox::new(x1, y1, x2, y2)
}

/// One square anchor per feature cell, centred on the cell.
pub fn anchors(h_f: usize, w_f: usize, stride: usize, size: f64) -> Vec<BBox> {
    let s = stride as f64;
    let mut out = Vec::with_capacity(h_f * w_f);
    for i in 0..h_f {
        for j in 0..w_f {
            out.push(BBox::from_center((j as f64 + 0.5) * s, (i as f64 + 0.5) * s, size, size));
        }
    }
    out
}

/// Anchor labels for RPN training: 1 positive, 0 negative, -1 ignored.
/// Each ground-truth box also claims its best anchor.
pub fn label_anchors(anchors: &[BBox], gt: &[BBox], pos_iou: f64, neg_iou: f64) -> Vec<(i8, Option<usize>)> {
    let mut out: Vec<(i8, Option<usize>)> = anchors
        .iter()
        .map(|a| match best_match(a, gt) {
            Some((gi, v)) if v >= pos_iou => (1, Some(gi)),
            Some((_, v)) if v >= neg_iou => (-1, None),
            _ => (0, None),
        })
        .collect();
    for (gi, g) in gt.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (ai, a) in anchors.iter().enumerate() {
            let v = iou(a, g);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((ai, v));
            }
        }
        if let Some((ai, v)) = best {
            if v > 0.0 {
                out[ai] = (1, Some(gi));
            }
        }
    }
    out
}
