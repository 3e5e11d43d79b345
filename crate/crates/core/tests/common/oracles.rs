//! Brute-force reference implementations used to check the library.

use dua_core::detcore::geometry::{iou, BBox};

/// Mid-ranks by enumerating every permutation that sorts `x` and averaging
/// each element's (1-based) position over them.
pub fn ranks_by_permutation(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut pos_sum = vec![0u64; n];
    let mut count = 0u64;
    permute(&mut perm, 0, &mut |p| {
        if p.windows(2).all(|w| x[w[0]] <= x[w[1]]) {
            count += 1;
            for (pos, &i) in p.iter().enumerate() {
                pos_sum[i] += pos as u64 + 1;
            }
        }
    });
    pos_sum.iter().map(|&s| s as f64 / count as f64).collect()
}

fn permute(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        f(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, f);
        p.swap(k, i);
    }
}

/// Textbook Pearson correlation; `None` for zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks_by_permutation(x), &ranks_by_permutation(y))
}

/// (concordant, discordant, n0, x-tied pairs, y-tied pairs) over all pairs.
pub fn pair_table(x: &[f64], y: &[f64]) -> (u64, u64, u64, u64, u64) {
    let (mut c, mut d, mut n0, mut tx, mut ty) = (0, 0, 0, 0, 0);
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i >= j {
                continue;
            }
            n0 += 1;
            let sx = (x[i] - x[j]).signum() * if x[i] == x[j] { 0.0 } else { 1.0 };
            let sy = (y[i] - y[j]).signum() * if y[i] == y[j] { 0.0 } else { 1.0 };
            if sx == 0.0 {
                tx += 1;
            }
            if sy == 0.0 {
                ty += 1;
            }
            if sx * sy > 0.0 {
                c += 1;
            } else if sx * sy < 0.0 {
                d += 1;
            }
        }
    }
    (c, d, n0, tx, ty)
}

pub fn tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    let (c, d, n0, tx, ty) = pair_table(x, y);
    if tx == n0 || ty == n0 {
        return None;
    }
    Some((c as f64 - d as f64) / (((n0 - tx) as f64) * ((n0 - ty) as f64)).sqrt())
}

/// One scored detection of a single class.
#[derive(Clone, Copy, Debug)]
pub struct Scored {
    pub image: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// AP for one class: for every cutoff k the top-k detections are matched
/// from scratch, then precision is made monotone and summed over recall
/// steps.
pub fn ap_by_cutoffs(dets: &[Scored], gts: &[Vec<BBox>]) -> f64 {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut prec = Vec::new();
    let mut rec = Vec::new();
    for k in 1..=order.len() {
        let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0;
        for &i in &order[..k] {
            let d = dets[i];
            let g = &gts[d.image];
            let best = (0..g.len()).fold(None, |acc: Option<(usize, f64)>, j| {
                let v = iou(&d.bbox, &g[j]);
                match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((j, v)),
                }
            });
            if let Some((j, v)) = best {
                if v >= 0.5 && !taken[d.image][j] {
                    taken[d.image][j] = true;
                    tp += 1;
                }
            }
        }
        prec.push(tp as f64 / k as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 0..prec.len() {
        let p = prec[k..].iter().copied().fold(0.0, f64::max);
        ap += (rec[k] - prev) * p;
        prev = rec[k];
    }
    ap
}
