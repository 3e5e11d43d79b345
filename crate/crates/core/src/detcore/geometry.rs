use serde::{Deserialize, Serialize};

/// Axis-aligned box `(x1, y1, x2, y2)` in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn inside(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x > self.x1 && x < self.x2 && y > self.y1 && y < self.y2
    }
}

pub fn intersection(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Index and IoU of the best-overlapping box in `gts`; ties go to the lower
/// index. `None` when `gts` is empty.
pub fn best_match(b: &BBox, gts: &[BBox]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in gts.iter().enumerate() {
        let v = iou(b, g);
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((i, v));
        }
    }
    best
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; equal scores keep the lower index first.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

/// NMS over arbitrary items given box and score accessors.
pub fn nms_by<T>(
    items: &[T],
    iou_thresh: f64,
    box_of: impl Fn(&T) -> BBox,
    score_of: impl Fn(&T) -> f64,
) -> Vec<usize> {
    let boxes: Vec<BBox> = items.iter().map(&box_of).collect();
    let scores: Vec<f64> = items.iter().map(&score_of).collect();
    nms(&boxes, &scores, iou_thresh)
}

const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Center/size regression targets of `gt` relative to `proposal`.
pub fn encode_deltas(proposal: &BBox, gt: &BBox) -> [f64; 4] {
    let (pcx, pcy) = proposal.center();
    let (gcx, gcy) = gt.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    [
        (gcx - pcx) / pw,
        (gcy - pcy) / ph,
        (gt.width() / pw).ln(),
        (gt.height() / ph).ln(),
    ]
}

pub fn decode_deltas(proposal: &BBox, d: &[f64]) -> BBox {
    let (pcx, pcy) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let cx = pcx + d[0] * pw;
    let cy = pcy + d[1] * ph;
    let w = pw * d[2].min(MAX_LOG_SCALE).exp();
    let h = ph * d[3].min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        // intersection 2, union 6
        let b = BBox::new(1.0, 0.0, 3.0, 2.0);
        assert!((iou(&a, &b) - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn nms_single_and_pair() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[a], &[0.3], 0.5), vec![0]);
        let b = BBox::new(0.0, 0.0, 10.0, 9.0); // IoU 0.9 with a
        assert_eq!(nms(&[a, b], &[0.4, 0.8], 0.5), vec![1]);
        assert_eq!(nms(&[a, b], &[0.8, 0.8], 0.5), vec![0]);
    }

    /// Scalar greedy oracle: repeatedly take the best remaining box and drop
    /// everything overlapping it.
    fn nms_oracle(boxes: &[BBox], scores: &[f64], t: f64) -> Vec<usize> {
        let mut alive = vec![true; boxes.len()];
        let mut out = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for i in 0..boxes.len() {
                if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                    best = Some(i);
                }
            }
            let Some(b) = best else { break };
            out.push(b);
            alive[b] = false;
            for i in 0..boxes.len() {
                if alive[i] && iou(&boxes[b], &boxes[i]) > t {
                    alive[i] = false;
                }
            }
        }
        out
    }

    #[test]
    fn nms_six_box_case_matches_oracle() {
        let boxes = [
            BBox::new(0.0, 0.0, 10.0, 10.0),
            BBox::new(1.0, 1.0, 11.0, 11.0),
            BBox::new(20.0, 20.0, 30.0, 30.0),
            BBox::new(21.0, 19.0, 31.0, 29.0),
            BBox::new(5.0, 5.0, 15.0, 15.0),
            BBox::new(0.0, 20.0, 8.0, 28.0),
        ];
        let scores = [0.9, 0.95, 0.5, 0.7, 0.8, 0.1];
        let kept = nms(&boxes, &scores, 0.5);
        assert_eq!(kept, nms_oracle(&boxes, &scores, 0.5));
        assert_eq!(kept, vec![1, 4, 3, 5]);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..50.0f64, 0.0..50.0f64, 1.0..20.0f64, 1.0..20.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn nms_matches_oracle_and_separates(
            boxes in prop::collection::vec(arb_box(), 0..7),
            seed in any::<u64>(),
        ) {
            let scores: Vec<f64> = (0..boxes.len())
                .map(|i| ((seed.wrapping_mul(i as u64 + 7) >> 11) % 1000) as f64 / 1000.0)
                .collect();
            let kept = nms(&boxes, &scores, 0.5);
            prop_assert_eq!(&kept, &nms_oracle(&boxes, &scores, 0.5));
            for (i, &a) in kept.iter().enumerate() {
                for &b in &kept[i + 1..] {
                    prop_assert!(iou(&boxes[a], &boxes[b]) <= 0.5);
                }
            }
        }

        #[test]
        fn deltas_round_trip(p in arb_box(), g in arb_box()) {
            let d = encode_deltas(&p, &g);
            let back = decode_deltas(&p, &d);
            for (x, y) in back.to_array().iter().zip(g.to_array()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
