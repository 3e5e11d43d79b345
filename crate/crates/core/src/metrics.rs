//! Detection and score-consistency metrics.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::detcore::geometry::{best_match, iou, BBox};
use crate::detcore::Detection;
use crate::synthdomain::{rng_for, LabeledScene};
use crate::{Error, Result};

/// Ground truth for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageGt {
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
}

impl From<&LabeledScene> for ImageGt {
    fn from(s: &LabeledScene) -> Self {
        Self {
            boxes: s.boxes.clone(),
            labels: s.labels.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

/// Area under the all-point interpolated PR curve for scored hits
/// (`true` = TP), given the number of ground-truth boxes.
pub fn average_precision(scored: &mut [(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0.0;
    let mut prec = Vec::with_capacity(scored.len());
    let mut rec = Vec::with_capacity(scored.len());
    for (i, &(_, hit)) in scored.iter().enumerate() {
        if hit {
            tp += 1.0;
        }
        prec.push(tp / (i + 1) as f64);
        rec.push(tp / n_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        ap += (r - last_r) * p;
        last_r = *r;
    }
    ap
}

/// Per-class AP at IoU 0.5. Each detection is assigned its best foreground
/// class. Detections are processed by descending score; a detection is a
/// true positive when its highest-IoU same-class gt has IoU ≥ 0.5 and is not
/// yet taken. mAP averages the classes that have ground truth.
pub fn ap50(detections: &[Vec<Detection>], gts: &[ImageGt], num_classes: usize) -> Result<ApReport> {
    if detections.len() != gts.len() {
        return Err(Error::InvalidInput(format!(
            "{} detection lists for {} images",
            detections.len(),
            gts.len()
        )));
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let n_gt: usize = gts.iter().map(|g| g.labels.iter().filter(|&&l| l == c).count()).sum();
        if n_gt == 0 {
            per_class.push(None);
            continue;
        }
        let mut cand: Vec<(usize, f64, BBox)> = Vec::new();
        for (img, dets) in detections.iter().enumerate() {
            for d in dets {
                let (k, s) = d.top_foreground();
                if k == c {
                    cand.push((img, s, d.bbox));
                }
            }
        }
        cand.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.boxes.len()]).collect();
        let mut scored = Vec::with_capacity(cand.len());
        for (img, s, b) in cand {
            let g = &gts[img];
            let mut best: Option<(usize, f64)> = None;
            for (j, gb) in g.boxes.iter().enumerate() {
                if g.labels[j] != c {
                    continue;
                }
                let v = iou(&b, gb);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            let hit = match best {
                Some((j, v)) if v >= 0.5 && !taken[img][j] => {
                    taken[img][j] = true;
                    true
                }
                _ => false,
            };
            scored.push((s, hit));
        }
        per_class.push(Some(average_precision(&mut scored, n_gt)));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(ApReport { per_class, map })
}

/// 1-based ranks with ties given their average rank.
pub fn mid_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!("length {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Undefined("fewer than two observations".into()));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("NaN in input".into()));
    }
    Ok(())
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("zero variance".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman correlation: Pearson on mid-ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&mid_ranks(x), &mid_ranks(y))
}

/// Pair counts behind tau-b.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct PairCounts {
    pub concordant: u64,
    pub discordant: u64,
    pub n0: u64,
    /// Pairs tied in `x`.
    pub n1: u64,
    /// Pairs tied in `y`.
    pub n2: u64,
}

fn tie_pairs(v: &[f64]) -> u64 {
    let mut s: Vec<f64> = v.to_vec();
    s.sort_by(f64::total_cmp);
    let mut total = 0;
    let mut i = 0;
    while i < s.len() {
        let mut j = i;
        while j + 1 < s.len() && s[j + 1] == s[i] {
            j += 1;
        }
        let t = (j - i + 1) as u64;
        total += t * (t - 1) / 2;
        i = j + 1;
    }
    total
}

pub fn pair_counts(x: &[f64], y: &[f64]) -> PairCounts {
    let n = x.len() as u64;
    let mut c = PairCounts {
        n0: n * n.saturating_sub(1) / 2,
        n1: tie_pairs(x),
        n2: tie_pairs(y),
        ..Default::default()
    };
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let p = (x[i] - x[j]) * (y[i] - y[j]);
            if p > 0.0 {
                c.concordant += 1;
            } else if p < 0.0 {
                c.discordant += 1;
            }
        }
    }
    c
}

pub fn tau_b_from_counts(c: &PairCounts) -> Result<f64> {
    if c.n1 == c.n0 || c.n2 == c.n0 {
        return Err(Error::Undefined("a variable is fully tied".into()));
    }
    let num = c.concordant as f64 - c.discordant as f64;
    Ok(num / (((c.n0 - c.n1) as f64) * ((c.n0 - c.n2) as f64)).sqrt())
}

/// Kendall tau-b with tie corrections. Fully tied input is an error.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    tau_b_from_counts(&pair_counts(x, y))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    #[serde(rename = "AP_s")]
    pub ap_s: f64,
    #[serde(rename = "AP_t")]
    pub ap_t: f64,
    pub theta: f64,
    /// `theta` in percent, rounded to two decimals.
    pub theta_pct: f64,
}

/// `|AP_s − AP_t| / (AP_s + AP_t)`.
pub fn source_bias(ap_s: f64, ap_t: f64) -> Result<f64> {
    if ap_s < 0.0 || ap_t < 0.0 || ap_s.is_nan() || ap_t.is_nan() {
        return Err(Error::InvalidInput(format!("negative AP ({ap_s}, {ap_t})")));
    }
    if ap_s + ap_t <= 0.0 {
        return Err(Error::Undefined("AP_s + AP_t = 0".into()));
    }
    Ok((ap_s - ap_t).abs() / (ap_s + ap_t))
}

pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

impl BiasReport {
    pub fn new(ap_s: f64, ap_t: f64) -> Result<Self> {
        let theta = source_bias(ap_s, ap_t)?;
        Ok(Self {
            ap_s,
            ap_t,
            theta,
            theta_pct: round2(theta * 100.0),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub score: f64,
    pub gt_loc: f64,
    pub class: usize,
}

/// Correlations are `None` when undefined (fewer than two pairs or a fully
/// tied variable).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub pairs: Vec<ScorePair>,
    pub src: Option<f64>,
    pub tau_b: Option<f64>,
    pub n_sampled: usize,
    pub n_available: usize,
    pub seed: u64,
}

/// Eligible (score, IoU) pairs from pre-NMS outputs: background-argmax boxes
/// dropped, one box per proposal (highest foreground confidence), matched to
/// the highest-IoU gt and kept when that IoU is at least 0.5.
pub fn consistency_candidates(outputs: &[Vec<Detection>], gts: &[ImageGt]) -> Result<Vec<ScorePair>> {
    if outputs.len() != gts.len() {
        return Err(Error::InvalidInput("outputs and gts differ in length".into()));
    }
    let mut pairs = Vec::new();
    for (dets, g) in outputs.iter().zip(gts) {
        let mut best: Vec<(usize, &Detection)> = Vec::new();
        for d in dets {
            let k = d.cls.len() - 1;
            let bg = d.cls[k];
            let (_, s) = d.top_foreground();
            if bg > s {
                continue;
            }
            match best.iter_mut().find(|(id, _)| *id == d.proposal_id) {
                Some(slot) if slot.1.top_foreground().1 < s => slot.1 = d,
                Some(_) => {}
                None => best.push((d.proposal_id, d)),
            }
        }
        for (_, d) in best {
            if let Some((_, v)) = best_match(&d.bbox, &g.boxes) {
                if v >= 0.5 {
                    let (class, score) = d.top_foreground();
                    pairs.push(ScorePair { score, gt_loc: v, class });
                }
            }
        }
    }
    Ok(pairs)
}

/// Sample `min(n, available)` pairs uniformly without replacement and
/// correlate score with localization quality.
pub fn sample_consistency_pairs(outputs: &[Vec<Detection>], gts: &[ImageGt], n: usize, seed: u64) -> Result<ConsistencyReport> {
    let all = consistency_candidates(outputs, gts)?;
    Ok(consistency_report(&all, n, seed))
}

pub fn consistency_report(all: &[ScorePair], n: usize, seed: u64) -> ConsistencyReport {
    let m = n.min(all.len());
    let mut idx = sample(&mut rng_for(seed, 0xC0), all.len(), m).into_vec();
    idx.sort_unstable();
    let pairs: Vec<ScorePair> = idx.iter().map(|&i| all[i]).collect();
    let (x, y) = split(&pairs);
    ConsistencyReport {
        src: spearman(&x, &y).ok(),
        tau_b: kendall_tau_b(&x, &y).ok(),
        n_sampled: pairs.len(),
        n_available: all.len(),
        pairs,
        seed,
    }
}

fn split(pairs: &[ScorePair]) -> (Vec<f64>, Vec<f64>) {
    pairs.iter().map(|p| (p.score, p.gt_loc)).unzip()
}

/// Per-class Spearman and tau-b on the sampled pairs (same statistics as the
/// pooled report, restricted to one predicted class).
pub fn per_class_consistency(report: &ConsistencyReport, num_classes: usize) -> Vec<(Option<f64>, Option<f64>)> {
    (0..num_classes)
        .map(|c| {
            let sub: Vec<ScorePair> = report.pairs.iter().filter(|p| p.class == c).copied().collect();
            let (x, y) = split(&sub);
            (spearman(&x, &y).ok(), kendall_tau_b(&x, &y).ok())
        })
        .collect()
}

/// Score vs. IoU scatter as CSV.
pub fn write_scatter_csv(path: &Path, pairs: &[ScorePair]) -> Result<()> {
    let mut s = String::from("score,gt_loc,class\n");
    for p in pairs {
        let _ = writeln!(s, "{},{},{}", p.score, p.gt_loc, p.class);
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Score vs. IoU scatter as a small standalone SVG.
pub fn write_scatter_svg(path: &Path, pairs: &[ScorePair], title: &str) -> Result<()> {
    const W: f64 = 360.0;
    const PAD: f64 = 40.0;
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{0}" height="{0}" viewBox="0 0 {0} {0}">"#,
        W + 2.0 * PAD
    );
    let _ = writeln!(s, r#"<rect x="{PAD}" y="{PAD}" width="{W}" height="{W}" fill="none" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{PAD}" y="24" font-size="13">{}</text>"#, escape(title));
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="11">IoU with matched gt</text>"#,
        PAD + W / 2.0 - 50.0,
        W + PAD + 28.0
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" font-size="11" transform="rotate(-90 12 {})">score</text>"#,
        PAD + W / 2.0,
        PAD + W / 2.0
    );
    for p in pairs {
        // x axis spans IoU 0.5..1
        let x = PAD + (p.gt_loc - 0.5).clamp(0.0, 0.5) * 2.0 * W;
        let y = PAD + (1.0 - p.score.clamp(0.0, 1.0)) * W;
        let _ = writeln!(
            s,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="2" fill="{}" fill-opacity="0.6"/>"#,
            colors[p.class % colors.len()]
        );
    }
    s.push_str("</svg>\n");
    std::fs::write(path, s)?;
    Ok(())
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
