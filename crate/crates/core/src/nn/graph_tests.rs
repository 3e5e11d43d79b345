use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{numeric_grad, relative_error};
use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Checks d/dx of `sum_i r_i * build(x)_i` for a fixed random projection `r`.
fn check_input_grad(shape: &[usize], seed: u64, build: impl Fn(&mut Graph, Var) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = rand_tensor(&mut rng, shape);
    let eval = |x: &Tensor, want_grad: bool| -> (f64, Option<Vec<f64>>) {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = build(&mut g, xv);
        let n = g.value(out).len();
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let r = rand_tensor(&mut prng, &[1, n]);
        let flat = g.reshape(out, vec![1, n]);
        let w = g.input(r);
        let b = g.input(Tensor::zeros(&[1]));
        let proj = g.linear(flat, w, b);
        let root = g.sum(proj);
        let value = g.value(root).item();
        let grad = want_grad.then(|| {
            let (_, ng) = g.backward(root, 0);
            ng.input_grad(xv)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; x.len()])
        });
        (value, grad)
    };
    let (_, analytic) = eval(&x0, true);
    let numeric = numeric_grad(
        |d| eval(&Tensor::new(shape.to_vec(), d.to_vec()), false).0,
        x0.data(),
        1e-5,
    );
    relative_error(&analytic.unwrap(), &numeric)
}

#[test]
fn conv2d_input_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    let b = rand_tensor(&mut rng, &[4]);
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        let err = check_input_grad(&[3, 7, 6], 2, |g, x| {
            let wv = g.input(w.clone());
            let bv = g.input(b.clone());
            g.conv2d(x, wv, bv, stride, pad)
        });
        assert!(err < 1e-7, "stride {stride} pad {pad}: {err}");
    }
}

#[test]
fn conv2d_param_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamStore::new();
    let conv = Conv2d::new(&mut ps, "c", 2, 3, 3, 2, 1, &mut rng);
    let x = rand_tensor(&mut rng, &[2, 5, 5]);
    let loss = |ps: &ParamStore| -> (f64, Gradients) {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = conv.forward(&mut g, ps, xv, Mode::Train);
        let y = g.relu(y);
        let n = g.value(y).len();
        let y = g.reshape(y, vec![1, n]);
        let l = g.bce_logits(y, vec![0.3; n], n as f64);
        let v = g.value(l).item();
        (v, g.backward(l, ps.len()).0)
    };
    let (_, grads) = loss(&ps);
    let analytic = grads.get(conv.w).unwrap().data().to_vec();
    let w0 = ps.get(conv.w).data().to_vec();
    let numeric = numeric_grad(
        |d| {
            let mut p = ps.clone();
            p.get_mut(conv.w).data_mut().copy_from_slice(d);
            loss(&p).0
        },
        &w0,
        1e-6,
    );
    assert!(relative_error(&analytic, &numeric) < 1e-6);
}

#[test]
fn linear_and_activations_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = rand_tensor(&mut rng, &[5, 6]);
    let b = rand_tensor(&mut rng, &[5]);
    let err = check_input_grad(&[3, 6], 5, |g, x| {
        let wv = g.input(w.clone());
        let bv = g.input(b.clone());
        let y = g.linear(x, wv, bv);
        let y = g.sigmoid(y);
        g.scale(y, 1.7)
    });
    assert!(err < 1e-8, "{err}");
}

#[test]
fn channel_mix_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = rand_tensor(&mut rng, &[3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let err = check_input_grad(&[2, 12], 7, |g, x| {
        let wv = g.input(w.clone());
        let bv = g.input(b.clone());
        g.channel_mix(x, wv, bv, 3)
    });
    assert!(err < 1e-8, "{err}");
}

#[test]
fn roi_pool_gradient() {
    let rois = vec![
        RoiWeights::from_image_box([3.0, 5.0, 30.0, 21.0], 8, 4, 5, 3),
        RoiWeights::from_image_box([0.0, 0.0, 40.0, 32.0], 8, 4, 5, 3),
    ];
    let err = check_input_grad(&[2, 4, 5], 8, |g, x| g.roi_pool(x, rois.clone()));
    assert!(err < 1e-8, "{err}");
}

#[test]
fn gather_reshape_pool_gradient() {
    let err = check_input_grad(&[3, 2, 2], 9, |g, x| {
        let p = g.global_avg_pool(x);
        let q = g.reshape(x, vec![3, 4]);
        let s = g.select_cols(q, &[0, 3]);
        let s = g.reshape(s, vec![1, 6]);
        let p2 = g.gather(p, vec![0, 1, 2, 0, 1, 2], vec![1, 6]);
        g.add(s, p2)
    });
    assert!(err < 1e-8, "{err}");
}

#[test]
fn losses_gradient() {
    let err = check_input_grad(&[4, 3], 10, |g, x| {
        let a = g.softmax_ce(x, vec![0, 2, 1, 1], vec![1.0, 0.5, 2.0, 1.0], 3.0);
        let b = g.smooth_l1(x, vec![0.9; 12], vec![1.0; 12], 1.0 / 9.0, 4.0);
        let c = g.bce_logits(x, vec![1.0, 0.0, 0.5, 1.0, 0.0, 0.2, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0], 12.0);
        let s = g.sigmoid(x);
        let d = g.bce_prob(s, vec![1.0; 12], 1e-6, 12.0);
        let ab = g.add(a, b);
        let cd = g.add(c, d);
        g.add(ab, cd)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grl_reverses_and_scales() {
    for lambda in [0.0, 0.5, 1.0, 2.0] {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![0.2, -0.7]).reshaped(vec![1, 2]));
        let y = g.grl(x, lambda);
        assert_eq!(g.value(y), g.value(x));
        let w = g.input(Tensor::new(vec![1, 2], vec![3.0, -2.0]));
        let b = g.input(Tensor::zeros(&[1]));
        let z = g.linear(y, w, b);
        let root = g.sum(z);
        let (_, ng) = g.backward(root, 0);
        let gx = ng.input_grad(x).unwrap().data().to_vec();
        assert_eq!(gx, vec![-3.0 * lambda, 2.0 * lambda]);
    }
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ps = ParamStore::new();
    let lin = Linear::new(&mut ps, "l", 3, 2, &mut rng);
    let mut g = Graph::new();
    let x = g.input(rand_tensor(&mut rng, &[1, 3]));
    let y = lin.forward(&mut g, &ps, x, Mode::Frozen);
    let root = g.sum(y);
    let (grads, _) = g.backward(root, ps.len());
    assert!(grads.get(lin.w).is_none());
    assert!(grads.get(lin.b).is_none());
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut ps = ParamStore::new();
    Conv2d::new(&mut ps, "c", 2, 3, 3, 1, 1, &mut rng);
    let back = ParamStore::from_json(&ps.to_json().unwrap()).unwrap();
    assert_eq!(back, ps);
    assert_eq!(back.fingerprint(), ps.fingerprint());
}
