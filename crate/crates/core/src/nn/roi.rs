//! Region pooling weights.
//!
//! Each output bin holds the exact average of the bilinear interpolant of the
//! feature grid over the bin's area. Feature cell `j` is centred at image
//! coordinate `(j + 0.5) * stride`, and the interpolant is held constant
//! beyond the outermost cell centres. Because the interpolant is bilinear
//! within each patch, a bin lying inside one patch pools to the bilinear
//! sample at the bin centre.

/// Sparse per-axis weights for one region, `pooled × pooled` bins.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiWeights {
    h: usize,
    w: usize,
    pooled: usize,
    wy: Vec<Vec<(usize, f64)>>,
    wx: Vec<Vec<(usize, f64)>>,
}

/// Interpolation weights of the clamped linear interpolant at `u`.
fn point_weights(u: f64, n: usize) -> [(usize, f64); 2] {
    if n == 1 {
        return [(0, 1.0), (0, 0.0)];
    }
    let u = u.clamp(0.0, (n - 1) as f64);
    let i0 = (u.floor() as usize).min(n - 2);
    let f = u - i0 as f64;
    [(i0, 1.0 - f), (i0 + 1, f)]
}

/// Weights of the interpolant averaged over `[a, b]` along one axis.
pub(crate) fn axis_weights(a: f64, b: f64, n: usize) -> Vec<(usize, f64)> {
    let mut dense = vec![0.0; n];
    if b - a <= 1e-12 {
        for (i, wt) in point_weights(0.5 * (a + b), n) {
            dense[i] += wt;
        }
    } else {
        // the interpolant is linear between consecutive breakpoints, so the
        // midpoint rule is exact on each piece
        let mut cuts = vec![a];
        let lo = a.ceil().max(0.0) as i64;
        let hi = b.floor().min((n - 1) as f64) as i64;
        for k in lo..=hi {
            let kf = k as f64;
            if kf > a && kf < b {
                cuts.push(kf);
            }
        }
        cuts.push(b);
        let len = b - a;
        for pair in cuts.windows(2) {
            let (p, q) = (pair[0], pair[1]);
            for (i, wt) in point_weights(0.5 * (p + q), n) {
                dense[i] += wt * (q - p) / len;
            }
        }
    }
    dense
        .into_iter()
        .enumerate()
        .filter(|(_, wt)| *wt != 0.0)
        .collect()
}

impl RoiWeights {
    /// Region given in continuous feature coordinates (cell centres at
    /// integers), `u` horizontal and `v` vertical.
    pub fn from_feature_box(
        u1: f64,
        v1: f64,
        u2: f64,
        v2: f64,
        h: usize,
        w: usize,
        pooled: usize,
    ) -> Self {
        assert!(pooled > 0 && h > 0 && w > 0);
        let bins = |a: f64, b: f64, n: usize| -> Vec<Vec<(usize, f64)>> {
            let step = (b - a) / pooled as f64;
            (0..pooled)
                .map(|k| axis_weights(a + k as f64 * step, a + (k + 1) as f64 * step, n))
                .collect()
        };
        Self {
            h,
            w,
            pooled,
            wy: bins(v1, v2, h),
            wx: bins(u1, u2, w),
        }
    }

    /// Region given as an image-space box `(x1, y1, x2, y2)`.
    pub fn from_image_box(
        b: [f64; 4],
        stride: usize,
        h: usize,
        w: usize,
        pooled: usize,
    ) -> Self {
        let s = stride as f64;
        Self::from_feature_box(
            b[0] / s - 0.5,
            b[1] / s - 0.5,
            b[2] / s - 0.5,
            b[3] / s - 0.5,
            h,
            w,
            pooled,
        )
    }

    pub fn pooled(&self) -> usize {
        self.pooled
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.h == h && self.w == w
    }

    /// Pool a `[C, H, W]` buffer into `C * P * P` values (channel-major).
    pub fn pool(&self, x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
        let p = self.pooled;
        let mut out = vec![0.0; c * p * p];
        let mut tmp = vec![0.0; w];
        for ch in 0..c {
            let xc = &x[ch * h * w..(ch + 1) * h * w];
            for (py, wy) in self.wy.iter().enumerate() {
                tmp.fill(0.0);
                for &(i, a) in wy {
                    for (t, v) in tmp.iter_mut().zip(&xc[i * w..(i + 1) * w]) {
                        *t += a * v;
                    }
                }
                for (px, wx) in self.wx.iter().enumerate() {
                    out[(ch * p + py) * p + px] = wx.iter().map(|&(j, b)| b * tmp[j]).sum();
                }
            }
        }
        out
    }

    /// Scatter pooled gradients `g` (length `C * P * P`) back onto `gx`.
    pub fn unpool(&self, g: &[f64], gx: &mut [f64], c: usize, h: usize, w: usize) {
        let p = self.pooled;
        for ch in 0..c {
            let gxc = &mut gx[ch * h * w..(ch + 1) * h * w];
            for (py, wy) in self.wy.iter().enumerate() {
                for (px, wx) in self.wx.iter().enumerate() {
                    let gv = g[(ch * p + py) * p + px];
                    if gv == 0.0 {
                        continue;
                    }
                    for &(i, a) in wy {
                        for &(j, b) in wx {
                            gxc[i * w + j] += a * b * gv;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_weights_partition_unity() {
        for &(a, b) in &[(-0.5, 7.5), (0.3, 0.4), (2.2, 5.9), (6.8, 7.4), (-0.5, -0.2)] {
            let total: f64 = axis_weights(a, b, 8).iter().map(|(_, w)| w).sum();
            assert!((total - 1.0).abs() < 1e-12, "({a}, {b}) sums to {total}");
        }
    }

    #[test]
    fn full_span_weights_are_uniform() {
        let w = axis_weights(-0.5, 7.5, 8);
        assert_eq!(w.len(), 8);
        for (_, wt) in w {
            assert!((wt - 0.125).abs() < 1e-12);
        }
    }

    #[test]
    fn interval_inside_one_patch_is_midpoint_sample() {
        // [2.2, 2.6] lies between centres 2 and 3; the average equals the
        // interpolant at 2.4
        let w = axis_weights(2.2, 2.6, 8);
        assert_eq!(w.len(), 2);
        assert!((w[0].1 - 0.6).abs() < 1e-12);
        assert!((w[1].1 - 0.4).abs() < 1e-12);
    }
}
