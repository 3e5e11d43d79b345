//! Test-time score refinement: the detector head runs on localization-aware
//! proposals and its class scores are sharpened by a domain-aware
//! localization score before NMS.

use serde::{Deserialize, Serialize};

use crate::detcore::geometry::{nms, BBox};
use crate::detcore::{top_foreground, Detection, Detector, HeadOutput};
use crate::nn::{softmax, ParamStore};
use crate::synthdomain::Raster;
use crate::troln::{LocalizedProposal, Troln};
use crate::{Error, Result};

/// `s = sqrt(4 c b tau1 tau2)`, unclamped.
pub fn localization_score(c: f64, b: f64, tau1: f64, tau2: f64) -> Result<f64> {
    for (name, v) in [("c", c), ("b", b), ("tau1", tau1), ("tau2", tau2)] {
        if v.is_nan() || v < 0.0 {
            return Err(Error::InvalidInput(format!("{name} = {v} must be non-negative")));
        }
    }
    Ok((4.0 * (c * b) * (tau1 * tau2)).sqrt())
}

/// `softmax((cls * s)^(1/4))` over every entry of `cls`.
pub fn refine_scores(cls: &[f64], s: f64) -> Vec<f64> {
    let r: Vec<f64> = cls.iter().map(|&v| (v.max(0.0) * s.max(0.0)).powf(0.25)).collect();
    softmax(&r)
}

/// The TROLN factors behind `s`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocFactors {
    pub c: f64,
    pub b: f64,
    pub tau1: f64,
    pub tau2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinedDetection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Head softmax over `K + 1` classes, background last.
    pub cls_raw: Vec<f64>,
    pub s: f64,
    pub cls_refined: Vec<f64>,
    pub kept_by_nms: bool,
    pub proposal_id: usize,
    pub factors: LocFactors,
}

impl RefinedDetection {
    /// Detection view carrying either the refined or the raw scores.
    pub fn to_detection(&self, refined: bool) -> Detection {
        Detection {
            bbox: self.bbox,
            cls: if refined { self.cls_refined.clone() } else { self.cls_raw.clone() },
            proposal_id: self.proposal_id,
        }
    }
}

/// Run the head on TROLN proposals and refine. All candidates are returned;
/// `kept_by_nms` marks survivors in input order.
pub fn dce_pipeline(image: &Raster, detector: &Detector, params: &ParamStore, troln: &Troln) -> Result<Vec<RefinedDetection>> {
    let props = troln.infer(image)?;
    dce_on(image, detector, params, &props, true)
}

/// Same as [`dce_pipeline`] for precomputed proposals; `refine = false`
/// keeps the raw scores (`cls_refined == cls_raw`).
pub fn dce_on(
    image: &Raster,
    detector: &Detector,
    params: &ParamStore,
    proposals: &[LocalizedProposal],
    refine: bool,
) -> Result<Vec<RefinedDetection>> {
    let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    let outs = detector.infer_on(params, image, &boxes)?;
    let mut dets = proposals
        .iter()
        .zip(&outs)
        .map(|(p, o)| refine_one(p, o, refine))
        .collect::<Result<Vec<_>>>()?;
    dets.retain(|d| d.bbox.is_valid());
    let bx: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let sc: Vec<f64> = dets.iter().map(|d| top_foreground(&d.cls_refined).1).collect();
    for i in nms(&bx, &sc, detector.cfg.nms_iou) {
        dets[i].kept_by_nms = true;
    }
    Ok(dets)
}

fn refine_one(p: &LocalizedProposal, o: &HeadOutput, refine: bool) -> Result<RefinedDetection> {
    let s = localization_score(p.c, p.b, p.tau1, p.tau2)?;
    let cls_refined = if refine { refine_scores(&o.cls, s) } else { o.cls.clone() };
    let (c, _) = top_foreground(&cls_refined);
    Ok(RefinedDetection {
        bbox: o.boxes[c],
        cls_raw: o.cls.clone(),
        s,
        cls_refined,
        kept_by_nms: false,
        proposal_id: o.proposal_id,
        factors: LocFactors {
            c: p.c,
            b: p.b,
            tau1: p.tau1,
            tau2: p.tau2,
        },
    })
}

/// NMS survivors as detections, ranked by score.
pub fn kept(dets: &[RefinedDetection], refined: bool) -> Vec<Detection> {
    let mut v: Vec<Detection> = dets.iter().filter(|d| d.kept_by_nms).map(|d| d.to_detection(refined)).collect();
    v.sort_by(|a, b| b.top_foreground().1.total_cmp(&a.top_foreground().1));
    v
}
