//! Reverse-mode automatic differentiation over a per-sample tape.
//!
//! A [`Graph`] is built for one forward pass, consumed by
//! [`Graph::backward`], and discarded. Parameters are copied in from a
//! [`ParamStore`]; their gradients come back as [`Gradients`].

use super::roi::RoiWeights;
use super::{Gradients, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    /// `x` viewed as `[N, C, S]`; mixes channels with `w: [O, C]`.
    ChannelMix {
        x: Var,
        w: Var,
        b: Var,
        channels: usize,
    },
    RoiPool {
        x: Var,
        rois: Vec<RoiWeights>,
    },
    GlobalAvgPool(Var),
    Grl {
        x: Var,
        lambda: f64,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        norm: f64,
    },
    WeightedL1 {
        pred: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
        norm: f64,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
        beta: f64,
        norm: f64,
    },
    BceLogits {
        logits: Var,
        target: Vec<f64>,
        norm: f64,
    },
    BceProb {
        p: Var,
        target: Vec<f64>,
        eps: f64,
        norm: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    /// Parameter entering the graph as a constant (no gradient recorded).
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Input)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad);
        self.push(out, Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = sigmoid(*v);
        }
        self.push(out, Op::Sigmoid(x))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, i) = (xv.shape()[0], xv.shape()[1]);
        let o = wv.shape()[0];
        assert_eq!(wv.shape()[1], i, "linear: input width mismatch");
        let mut out = vec![0.0; n * o];
        for r in 0..n {
            let xr = &xv.data()[r * i..(r + 1) * i];
            for c in 0..o {
                let wr = &wv.data()[c * i..(c + 1) * i];
                out[r * o + c] = bv.data()[c] + dot(xr, wr);
            }
        }
        self.push(Tensor::new(vec![n, o], out), Op::Linear { x, w, b })
    }

    pub fn channel_mix(&mut self, x: Var, w: Var, b: Var, channels: usize) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let n = xv.shape()[0];
        let row = xv.len() / n.max(1);
        assert_eq!(row % channels, 0);
        let s = row / channels;
        let o = wv.shape()[0];
        assert_eq!(wv.shape()[1], channels);
        let mut out = vec![0.0; n * o * s];
        for r in 0..n {
            let xr = &xv.data()[r * row..(r + 1) * row];
            let or = &mut out[r * o * s..(r + 1) * o * s];
            for oc in 0..o {
                let dst = &mut or[oc * s..(oc + 1) * s];
                dst.fill(bv.data()[oc]);
                for c in 0..channels {
                    let wv = wv.data()[oc * channels + c];
                    for (d, xv) in dst.iter_mut().zip(&xr[c * s..(c + 1) * s]) {
                        *d += wv * xv;
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![n, o * s], out),
            Op::ChannelMix { x, w, b, channels },
        )
    }

    /// Pool `x: [C, H, W]` into `[N, C * P * P]` using precomputed
    /// separable bin weights, one entry per region.
    pub fn roi_pool(&mut self, x: Var, rois: Vec<RoiWeights>) -> Var {
        let xv = self.value(x);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let n = rois.len();
        let mut row_len = 0;
        let mut out = Vec::new();
        for roi in &rois {
            assert!(roi.fits(h, w), "roi weights do not match feature map");
            let pooled = roi.pool(xv.data(), c, h, w);
            row_len = pooled.len();
            out.extend(pooled);
        }
        if n == 0 {
            row_len = 0;
        }
        self.push(Tensor::new(vec![n, row_len], out), Op::RoiPool { x, rois })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.shape()[0];
        let hw = xv.len() / c;
        let out = (0..c)
            .map(|ch| xv.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(Tensor::new(vec![1, c], out), Op::GlobalAvgPool(x))
    }

    /// Identity forward; gradients are multiplied by `-lambda` on the way back.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::Grl { x, lambda })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale(s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: Vec<usize>) -> Var {
        let xv = self.value(x);
        let out = idx.iter().map(|&i| xv.data()[i]).collect();
        self.push(Tensor::new(shape, out), Op::Gather { x, idx })
    }

    /// Columns `cols` of every row of a rank-2 tensor.
    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Var {
        let shape = self.value(x).shape().to_vec();
        let (n, k) = (shape[0], shape[1]);
        let idx = (0..n)
            .flat_map(|r| cols.iter().map(move |&c| r * k + c))
            .collect();
        self.gather(x, idx, vec![n, cols.len()])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        self.push(out, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `sum_i weights[i] * CE(softmax(logits[i]), labels[i]) / norm`.
    pub fn softmax_ce(&mut self, logits: Var, labels: Vec<usize>, weights: Vec<f64>, norm: f64) -> Var {
        let lv = self.value(logits);
        let k = lv.shape()[1];
        assert_eq!(lv.shape()[0], labels.len());
        assert_eq!(labels.len(), weights.len());
        let mut total = 0.0;
        for (r, (&y, &wt)) in labels.iter().zip(&weights).enumerate() {
            assert!(y < k, "label {y} out of range for {k} classes");
            let row = &lv.data()[r * k..(r + 1) * k];
            total += wt * (log_sum_exp(row) - row[y]);
        }
        let value = if norm > 0.0 { total / norm } else { 0.0 };
        self.push(
            Tensor::scalar(value),
            Op::SoftmaxCe {
                logits,
                labels,
                weights,
                norm,
            },
        )
    }

    /// `sum_i weights[i] * |pred[i] - target[i]| / norm`.
    pub fn weighted_l1(&mut self, pred: Var, target: Vec<f64>, weights: Vec<f64>, norm: f64) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.len(), target.len());
        assert_eq!(pv.len(), weights.len());
        let total: f64 = pv
            .data()
            .iter()
            .zip(&target)
            .zip(&weights)
            .map(|((p, t), w)| w * (p - t).abs())
            .sum();
        let value = if norm > 0.0 { total / norm } else { 0.0 };
        self.push(
            Tensor::scalar(value),
            Op::WeightedL1 {
                pred,
                target,
                weights,
                norm,
            },
        )
    }

    pub fn smooth_l1(
        &mut self,
        pred: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
        beta: f64,
        norm: f64,
    ) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.len(), target.len());
        assert_eq!(pv.len(), weights.len());
        let total: f64 = pv
            .data()
            .iter()
            .zip(&target)
            .zip(&weights)
            .map(|((p, t), w)| w * smooth_l1(p - t, beta))
            .sum();
        let value = if norm > 0.0 { total / norm } else { 0.0 };
        self.push(
            Tensor::scalar(value),
            Op::SmoothL1 {
                pred,
                target,
                weights,
                beta,
                norm,
            },
        )
    }

    /// Binary cross-entropy on logits, summed and divided by `norm`.
    pub fn bce_logits(&mut self, logits: Var, target: Vec<f64>, norm: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), target.len());
        let total: f64 = lv
            .data()
            .iter()
            .zip(&target)
            .map(|(&z, &t)| bce_with_logits(z, t))
            .sum();
        let value = if norm > 0.0 { total / norm } else { 0.0 };
        self.push(Tensor::scalar(value), Op::BceLogits { logits, target, norm })
    }

    /// Binary cross-entropy on probabilities clamped to `[eps, 1 - eps]`.
    pub fn bce_prob(&mut self, p: Var, target: Vec<f64>, eps: f64, norm: f64) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.len(), target.len());
        let total: f64 = pv
            .data()
            .iter()
            .zip(&target)
            .map(|(&p, &t)| {
                let q = p.clamp(eps, 1.0 - eps);
                -t * q.ln() - (1.0 - t) * (1.0 - q).ln()
            })
            .sum();
        let value = if norm > 0.0 { total / norm } else { 0.0 };
        self.push(
            Tensor::scalar(value),
            Op::BceProb {
                p,
                target,
                eps,
                norm,
            },
        )
    }

    /// Backpropagate from the scalar `root`, returning parameter gradients
    /// and the gradient of every node (indexed by [`Var`]).
    pub fn backward(&self, root: Var, num_params: usize) -> (Gradients, NodeGrads) {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::new(
            self.value(root).shape().to_vec(),
            vec![1.0],
        ));
        let mut param_grads = Gradients::new(num_params);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Param(id) => param_grads.accumulate(*id, &g),
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (gx, gw, gb) = conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *stride,
                        *pad,
                    );
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *b, gb);
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    for (gv, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let mut gx = g;
                    for (gv, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *gv *= y * (1.0 - y);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, i) = (xv.shape()[0], xv.shape()[1]);
                    let o = wv.shape()[0];
                    let mut gx = vec![0.0; n * i];
                    let mut gw = vec![0.0; o * i];
                    let mut gb = vec![0.0; o];
                    for r in 0..n {
                        let xr = &xv.data()[r * i..(r + 1) * i];
                        let gxr = &mut gx[r * i..(r + 1) * i];
                        for c in 0..o {
                            let go = g.data()[r * o + c];
                            if go == 0.0 {
                                continue;
                            }
                            gb[c] += go;
                            let wr = &wv.data()[c * i..(c + 1) * i];
                            let gwr = &mut gw[c * i..(c + 1) * i];
                            for k in 0..i {
                                gxr[k] += go * wr[k];
                                gwr[k] += go * xr[k];
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(vec![n, i], gx));
                    acc(&mut grads, *w, Tensor::new(vec![o, i], gw));
                    acc(&mut grads, *b, Tensor::new(vec![o], gb));
                }
                Op::ChannelMix { x, w, b, channels } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let n = xv.shape()[0];
                    let row = xv.len() / n.max(1);
                    let s = row / channels;
                    let o = wv.shape()[0];
                    let mut gx = vec![0.0; xv.len()];
                    let mut gw = vec![0.0; wv.len()];
                    let mut gb = vec![0.0; o];
                    for r in 0..n {
                        let xr = &xv.data()[r * row..(r + 1) * row];
                        let gr = &g.data()[r * o * s..(r + 1) * o * s];
                        let gxr = &mut gx[r * row..(r + 1) * row];
                        for oc in 0..o {
                            let go = &gr[oc * s..(oc + 1) * s];
                            gb[oc] += go.iter().sum::<f64>();
                            for c in 0..*channels {
                                let wv = wv.data()[oc * channels + c];
                                let xs = &xr[c * s..(c + 1) * s];
                                gw[oc * channels + c] += dot(go, xs);
                                for (gxv, gov) in gxr[c * s..(c + 1) * s].iter_mut().zip(go) {
                                    *gxv += wv * gov;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), gx));
                    acc(&mut grads, *w, Tensor::new(wv.shape().to_vec(), gw));
                    acc(&mut grads, *b, Tensor::new(vec![o], gb));
                }
                Op::RoiPool { x, rois } => {
                    let xv = self.value(*x);
                    let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let mut gx = vec![0.0; xv.len()];
                    let row = if rois.is_empty() { 0 } else { g.len() / rois.len() };
                    for (r, roi) in rois.iter().enumerate() {
                        roi.unpool(&g.data()[r * row..(r + 1) * row], &mut gx, c, h, w);
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), gx));
                }
                Op::GlobalAvgPool(x) => {
                    let xv = self.value(*x);
                    let c = xv.shape()[0];
                    let hw = xv.len() / c;
                    let mut gx = vec![0.0; xv.len()];
                    for ch in 0..c {
                        let v = g.data()[ch] / hw as f64;
                        gx[ch * hw..(ch + 1) * hw].fill(v);
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), gx));
                }
                Op::Grl { x, lambda } => {
                    let mut gx = g;
                    gx.scale(-lambda);
                    acc(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Scale(x, s) => {
                    let mut gx = g;
                    gx.scale(*s);
                    acc(&mut grads, *x, gx);
                }
                Op::Gather { x, idx } => {
                    let xv = self.value(*x);
                    let mut gx = vec![0.0; xv.len()];
                    for (&i, &gv) in idx.iter().zip(g.data()) {
                        gx[i] += gv;
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), gx));
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(&mut grads, *x, g.reshaped(shape));
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    acc(&mut grads, *x, Tensor::full(xv.shape(), g.item()));
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    weights,
                    norm,
                } => {
                    if *norm <= 0.0 {
                        continue;
                    }
                    let lv = self.value(*logits);
                    let k = lv.shape()[1];
                    let scale = g.item() / norm;
                    let mut gl = vec![0.0; lv.len()];
                    for (r, (&y, &wt)) in labels.iter().zip(weights).enumerate() {
                        let row = &lv.data()[r * k..(r + 1) * k];
                        let p = softmax(row);
                        for j in 0..k {
                            let ind = if j == y { 1.0 } else { 0.0 };
                            gl[r * k + j] = scale * wt * (p[j] - ind);
                        }
                    }
                    acc(&mut grads, *logits, Tensor::new(lv.shape().to_vec(), gl));
                }
                Op::WeightedL1 {
                    pred,
                    target,
                    weights,
                    norm,
                } => {
                    if *norm <= 0.0 {
                        continue;
                    }
                    let pv = self.value(*pred);
                    let scale = g.item() / norm;
                    let gp = pv
                        .data()
                        .iter()
                        .zip(target)
                        .zip(weights)
                        .map(|((p, t), w)| scale * w * sign(p - t))
                        .collect();
                    acc(&mut grads, *pred, Tensor::new(pv.shape().to_vec(), gp));
                }
                Op::SmoothL1 {
                    pred,
                    target,
                    weights,
                    beta,
                    norm,
                } => {
                    if *norm <= 0.0 {
                        continue;
                    }
                    let pv = self.value(*pred);
                    let scale = g.item() / norm;
                    let gp = pv
                        .data()
                        .iter()
                        .zip(target)
                        .zip(weights)
                        .map(|((p, t), w)| scale * w * smooth_l1_grad(p - t, *beta))
                        .collect();
                    acc(&mut grads, *pred, Tensor::new(pv.shape().to_vec(), gp));
                }
                Op::BceLogits {
                    logits,
                    target,
                    norm,
                } => {
                    if *norm <= 0.0 {
                        continue;
                    }
                    let lv = self.value(*logits);
                    let scale = g.item() / norm;
                    let gl = lv
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(&z, &t)| scale * (sigmoid(z) - t))
                        .collect();
                    acc(&mut grads, *logits, Tensor::new(lv.shape().to_vec(), gl));
                }
                Op::BceProb {
                    p,
                    target,
                    eps,
                    norm,
                } => {
                    if *norm <= 0.0 {
                        continue;
                    }
                    let pv = self.value(*p);
                    let scale = g.item() / norm;
                    let gp = pv
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(&p, &t)| {
                            if p < *eps || p > 1.0 - eps {
                                0.0
                            } else {
                                scale * (-t / p + (1.0 - t) / (1.0 - p))
                            }
                        })
                        .collect();
                    acc(&mut grads, *p, Tensor::new(pv.shape().to_vec(), gp));
                }
            }
        }
        (param_grads, NodeGrads { grads })
    }
}

/// Gradients that reached input nodes during backward.
pub struct NodeGrads {
    grads: Vec<Option<Tensor>>,
}

impl NodeGrads {
    /// Gradient with respect to an input node, if any flowed into it.
    pub fn input_grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn bce_with_logits(z: f64, t: f64) -> f64 {
    // log(1 + e^z) - t z, evaluated stably
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

pub fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        sign(d)
    }
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn conv_out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, wc, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(c, wc, "conv2d: channel mismatch {c} vs {wc}");
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(wd, k, stride, pad);
    let mut out = vec![0.0; o * ho * wo];
    let xd = x.data();
    let wdat = w.data();
    for oc in 0..o {
        let dst = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
        dst.fill(b.data()[oc]);
        for ic in 0..c {
            let xc = &xd[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wdat[((oc * c + ic) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xc[iy as usize * wd..(iy as usize + 1) * wd];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                *d += wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![o, ho, wo], out)
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, _, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let (ho, wo) = (g.shape()[1], g.shape()[2]);
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; o];
    let xd = x.data();
    let wdat = w.data();
    for oc in 0..o {
        let go = &g.data()[oc * ho * wo..(oc + 1) * ho * wo];
        gb[oc] = go.iter().sum();
        for ic in 0..c {
            let xc = &xd[ic * h * wd..(ic + 1) * h * wd];
            let gxc = &mut gx[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((oc * c + ic) * k + ky) * k + kx;
                    let wv = wdat[widx];
                    let mut gwv = 0.0;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = iy as usize * wd;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let gv = go[oy * wo + ox];
                            gwv += gv * xc[base + ix as usize];
                            gxc[base + ix as usize] += gv * wv;
                        }
                    }
                    gw[widx] += gwv;
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx),
        Tensor::new(w.shape().to_vec(), gw),
        Tensor::new(vec![o], gb),
    )
}
