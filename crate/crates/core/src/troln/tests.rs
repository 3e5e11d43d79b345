use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::gradcheck::{numeric_grad, relative_error};
use crate::nn::Tensor;

#[test]
fn centerness_examples() {
    let b = BBox::new(0.0, 0.0, 4.0, 4.0);
    assert_eq!(centerness_target(2.0, 2.0, &b), Some(1.0));
    assert_eq!(centerness_target(0.0, 2.0, &b), Some(0.0));
    let v = centerness_target(1.0, 2.0, &b).unwrap();
    assert!((v - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert!((v - 0.5774).abs() < 1e-4);
    assert_eq!(centerness_target(5.0, 2.0, &b), None);
}

#[test]
#[allow(clippy::approx_constant)]
fn discriminator_loss_examples() {
    let half = AffinityMap::constant(4, 4, 8, 0.5).unwrap();
    assert!((discriminator_loss(&half, 1.0) - 2f64.ln()).abs() < 1e-12);
    assert!((discriminator_loss(&half, 0.0) - 0.6931).abs() < 1e-4);
    let one = AffinityMap::constant(4, 4, 8, 1.0).unwrap();
    // -ln(1 - eps) = eps + eps^2 / 2 + ...
    let floor = -(1.0 - PROB_EPS).ln();
    assert_eq!(discriminator_loss(&one, 1.0), floor);
    assert!(floor < 1.000_001e-6);
    let zero = AffinityMap::constant(4, 4, 8, 0.0).unwrap();
    assert_eq!(discriminator_loss(&zero, 0.0), floor);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let data: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
        let d = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        let m = AffinityMap::new(3, 4, 8, data.clone()).unwrap();
        let mut oracle = 0.0;
        for p in &data {
            let q: f64 = p.clamp(1e-6, 1.0 - 1e-6);
            oracle += if d == 1.0 { -q.ln() } else { -(1.0 - q).ln() };
        }
        assert!((discriminator_loss(&m, d) - oracle / 12.0).abs() < 1e-12);
    }
}

#[test]
fn affinity_examples() {
    let m = AffinityMap::constant(8, 8, 8, 0.7).unwrap();
    let (t1, t2) = affinity_weights(&m, (20.0, 30.0), &BBox::new(3.0, 4.0, 50.0, 41.0), 7).unwrap();
    assert!((t1 - 0.7).abs() < 1e-12 && (t2 - 0.7).abs() < 1e-12);

    let mut data = vec![0.0; 64];
    data[27] = 1.0;
    let m = AffinityMap::new(8, 8, 8, data).unwrap();
    let t2 = tau2(&m, &BBox::new(0.0, 0.0, 64.0, 64.0), 7).unwrap();
    assert!((t2 - 1.0 / 64.0).abs() < 1e-12, "{t2}");
    assert!(tau2(&m, &BBox::new(3.0, 3.0, 3.0, 9.0), 7).is_err());
    assert!(AffinityMap::new(1, 2, 8, vec![0.2, 1.2]).is_err());
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> AffinityMap {
    AffinityMap::new(h, w, 8, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

proptest! {
    #[test]
    fn one_cell_proposal_matches_pixel_weight(seed in any::<u64>(), i in 0usize..6, j in 0usize..5, fx in 0.0..1.0f64, fy in 0.0..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_map(&mut rng, 6, 5);
        let cell = BBox::new(8.0 * j as f64, 8.0 * i as f64, 8.0 * (j + 1) as f64, 8.0 * (i + 1) as f64);
        let px = (8.0 * (j as f64 + fx), 8.0 * (i as f64 + fy));
        let (t1, t2) = affinity_weights(&m, px, &cell, 7).unwrap();
        prop_assert_eq!(t1, t2);
    }

    #[test]
    fn weights_stay_in_unit_interval(seed in any::<u64>(), x in 0.0..30.0f64, y in 0.0..30.0f64, w in 1.0..34.0f64, h in 1.0..34.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_map(&mut rng, 8, 8);
        let b = BBox::new(x, y, x + w, y + h);
        let (t1, t2) = affinity_weights(&m, b.center(), &b, 7).unwrap();
        prop_assert!((0.0..=1.0).contains(&t1));
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&t2));
    }
}

struct Instance {
    preds: TrolnPreds,
    pix: PixelTargets,
    props: ProposalTargets,
    tau1: Vec<f64>,
    tau2: Vec<f64>,
    d: f64,
    shape: (usize, usize),
}

fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (3, 4);
    let hw = h * w;
    let mut pix = PixelTargets::default();
    for cell in 0..hw {
        if rng.random_bool(0.5) {
            pix.cells.push(cell);
            pix.centers.push((0.0, 0.0));
            pix.cent.push(rng.random_range(0.0..1.0));
            pix.ltrb.push(std::array::from_fn(|_| rng.random_range(-1.0..1.5)));
        }
    }
    let n = 5;
    let mut props = ProposalTargets::default();
    for _ in 0..n {
        let v = rng.random_range(0.0..1.0);
        props.boxes.push(BBox::new(0.0, 0.0, 1.0, 1.0));
        props.iou.push(v);
        props.positive.push(v >= 0.3);
        props.deltas.push(std::array::from_fn(|_| rng.random_range(-0.5..0.5)));
    }
    // predictions kept away from the L1 kinks so finite differences are valid
    let mut away = |t: f64| loop {
        let v = rng.random_range(-0.2..1.2);
        if (v - t).abs() > 0.01 {
            return v;
        }
    };
    let mut cent_t = vec![0.5; hw];
    for (k, &c) in pix.cells.iter().enumerate() {
        cent_t[c] = pix.cent[k];
    }
    let cent: Vec<f64> = cent_t.iter().map(|&t| away(t)).collect();
    let iou: Vec<f64> = props.iou.iter().map(|&t| away(t)).collect();
    let preds = TrolnPreds {
        cent,
        ltrb: (0..4 * hw).map(|_| rng.random_range(-1.0..1.5)).collect(),
        iou,
        deltas: (0..4 * n).map(|_| rng.random_range(-0.6..0.6)).collect(),
        m: (0..hw).map(|_| rng.random_range(0.01..0.99)).collect(),
    };
    Instance {
        tau1: (0..pix.cells.len()).map(|_| rng.random_range(0.0..1.0)).collect(),
        tau2: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
        d: if rng.random_bool(0.5) { 1.0 } else { 0.0 },
        preds,
        pix,
        props,
        shape: (h, w),
    }
}

/// Independent scalar loop over pixels and proposals.
fn scalar_oracle(x: &Instance) -> (f64, f64, f64, f64, f64) {
    let hw = x.preds.cent.len();
    let np = x.pix.cells.len() as f64;
    let (mut c, mut r) = (0.0, 0.0);
    for k in 0..x.pix.cells.len() {
        let cell = x.pix.cells[k];
        c += (1.0 + x.tau1[k]) * (x.preds.cent[cell] - x.pix.cent[k]).abs();
        for s in 0..4 {
            let d: f64 = x.preds.ltrb[s * hw + cell] - x.pix.ltrb[k][s];
            let beta = 1.0 / 9.0;
            r += if d.abs() < beta { 0.5 * d * d / beta } else { d.abs() - 0.5 * beta };
        }
    }
    let npos = x.props.positive.iter().filter(|b| **b).count() as f64;
    let (mut i, mut rr) = (0.0, 0.0);
    for k in 0..x.props.boxes.len() {
        if x.props.iou[k] < 0.3 {
            continue;
        }
        i += (1.0 + x.tau2[k]) * (x.preds.iou[k] - x.props.iou[k]).abs();
        for s in 0..4 {
            let d: f64 = x.preds.deltas[4 * k + s] - x.props.deltas[k][s];
            let beta = 1.0 / 9.0;
            rr += if d.abs() < beta { 0.5 * d * d / beta } else { d.abs() - 0.5 * beta };
        }
    }
    let mut dis = 0.0;
    for &p in &x.preds.m {
        dis += -x.d * p.ln() - (1.0 - x.d) * (1.0 - p).ln();
    }
    let g = |a: f64, n: f64| if n > 0.0 { a / n } else { 0.0 };
    (g(c, np), g(r, np), g(i, npos), g(rr, npos), dis / hw as f64)
}

#[test]
fn loss_matches_scalar_oracle_and_graph() {
    for seed in 0..30 {
        let x = random_instance(seed);
        let l = troln_loss(&x.preds, &x.pix, &x.props, &x.tau1, &x.tau2, x.d);
        let o = scalar_oracle(&x);
        for (a, b) in [(l.cent, o.0), (l.rpn_reg, o.1), (l.iou, o.2), (l.rcnn_reg, o.3), (l.dis, o.4)] {
            assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
        }
        let (h, w) = x.shape;
        let n = x.props.boxes.len();
        let mut g = Graph::new();
        let c = g.input(Tensor::new(vec![1, h, w], x.preds.cent.clone()));
        let r = g.input(Tensor::new(vec![4, h, w], x.preds.ltrb.clone()));
        let b = g.input(Tensor::new(vec![n, 1], x.preds.iou.clone()));
        let d = g.input(Tensor::new(vec![n, 4], x.preds.deltas.clone()));
        let m = g.input(Tensor::new(vec![1, h, w], x.preds.m.clone()));
        let lv = troln_loss_graph(&mut g, c, r, b, d, m, &x.pix, &x.props, &x.tau1, &x.tau2, x.d);
        assert!((g.value(lv.total).item() - l.total()).abs() < 1e-12);
    }
}

#[test]
fn tau_zero_and_one_identities() {
    for seed in 0..20 {
        let x = random_instance(100 + seed);
        let z1 = vec![0.0; x.tau1.len()];
        let z2 = vec![0.0; x.tau2.len()];
        let l0 = troln_loss(&x.preds, &x.pix, &x.props, &z1, &z2, x.d);
        assert_eq!(l0.localization(), oln_loss(&x.preds, &x.pix, &x.props));
        let o1 = vec![1.0; x.tau1.len()];
        let o2 = vec![1.0; x.tau2.len()];
        let l1 = troln_loss(&x.preds, &x.pix, &x.props, &o1, &o2, x.d);
        assert_eq!(l1.cent, 2.0 * l0.cent);
        assert_eq!(l1.iou, 2.0 * l0.iou);
        assert_eq!(l1.rpn_reg, l0.rpn_reg);
        let lt = troln_loss(&x.preds, &x.pix, &x.props, &x.tau1, &x.tau2, x.d);
        assert!(lt.localization() >= l0.localization());
    }
}

#[test]
fn empty_positive_sets_contribute_zero() {
    let mut x = random_instance(7);
    x.pix = PixelTargets::default();
    x.tau1.clear();
    for p in x.props.positive.iter_mut() {
        *p = false;
    }
    let l = troln_loss(&x.preds, &x.pix, &x.props, &x.tau1, &x.tau2, x.d);
    assert_eq!(l.localization(), 0.0);
    assert!(l.dis > 0.0);
}

#[test]
fn weighted_terms_pass_gradient_check() {
    for seed in 0..20 {
        let x = random_instance(200 + seed);
        let (h, w) = x.shape;
        let n = x.props.boxes.len();
        // central differences over the centerness and IoU predictions
        let eval = |cent: &[f64], iou_p: &[f64]| {
            let mut g = Graph::new();
            let c = g.input(Tensor::new(vec![1, h, w], cent.to_vec()));
            let r = g.input(Tensor::new(vec![4, h, w], x.preds.ltrb.clone()));
            let b = g.input(Tensor::new(vec![n, 1], iou_p.to_vec()));
            let d = g.input(Tensor::new(vec![n, 4], x.preds.deltas.clone()));
            let m = g.input(Tensor::new(vec![1, h, w], x.preds.m.clone()));
            let lv = troln_loss_graph(&mut g, c, r, b, d, m, &x.pix, &x.props, &x.tau1, &x.tau2, x.d);
            let root = g.add(lv.cent, lv.iou);
            let (_, ng) = g.backward(root, 0);
            let gc = ng.input_grad(c).map_or(vec![0.0; h * w], |t| t.data().to_vec());
            let gb = ng.input_grad(b).map_or(vec![0.0; n], |t| t.data().to_vec());
            (g.value(root).item(), gc, gb)
        };
        let (_, gc, gb) = eval(&x.preds.cent, &x.preds.iou);
        let nc = numeric_grad(|v| eval(v, &x.preds.iou).0, &x.preds.cent, 1e-3);
        let nb = numeric_grad(|v| eval(&x.preds.cent, v).0, &x.preds.iou, 1e-3);
        let mut a = gc.clone();
        a.extend(&gb);
        let mut nn = nc.clone();
        nn.extend(&nb);
        let err = relative_error(&a, &nn);
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

fn tiny_cfg() -> TrolnConfig {
    TrolnConfig {
        channels: [4, 6, 8],
        hidden: 8,
        disc_hidden: 4,
        ..Default::default()
    }
}

#[test]
fn discriminator_only_training_separates_fixed_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamStore::new();
    let d1 = Conv2d::new(&mut ps, "d1", 4, 4, 1, 1, 0, &mut rng);
    let d2 = Conv2d::new(&mut ps, "d2", 4, 1, 1, 1, 0, &mut rng);
    let feats: Vec<(Tensor, f64)> = (0..2)
        .map(|d| {
            let shift = if d == 0 { -0.3 } else { 0.3 };
            let data = (0..4 * 9).map(|_| rng.random_range(0.0..1.0) + shift).collect();
            (Tensor::new(vec![4, 3, 3], data), d as f64)
        })
        .collect();
    let mut opt = Sgd::new(0.2, 0.5, 0.0);
    let mut history = Vec::new();
    for epoch in 0..60 {
        let mut grads = Gradients::new(ps.len());
        let (mut loss, mut hit) = (0.0, 0);
        for (f, d) in &feats {
            let mut g = Graph::new();
            let x = g.input(f.clone());
            let h = d1.forward(&mut g, &ps, x, Mode::Train);
            let h = g.relu(h);
            let z = d2.forward(&mut g, &ps, h, Mode::Train);
            let m = g.sigmoid(z);
            let l = g.bce_prob(m, vec![*d; 9], PROB_EPS, 9.0);
            loss += g.value(l).item();
            hit += g.value(m).data().iter().filter(|&&p| (p > 0.5) == (*d > 0.5)).count();
            grads.merge(&g.backward(l, ps.len()).0);
        }
        opt.step(&mut ps, &grads);
        if epoch % 20 == 0 || epoch == 59 {
            history.push((loss, hit));
        }
    }
    let (first, last) = (history[0], history[history.len() - 1]);
    assert!(last.0 < first.0);
    assert!(last.1 >= first.1);
    assert_eq!(last.1, 18);
}

fn scene_pair(seed: u64) -> Vec<LabeledScene> {
    use crate::synthdomain::{gen_scene, stylize_to_target, SceneConfig};
    let cfg = SceneConfig::default();
    let s = gen_scene(seed, Domain::Source, &cfg).unwrap();
    let t = stylize_to_target(&s, &cfg.target_style).unwrap();
    vec![s, t]
}

#[test]
fn inference_contract_and_determinism() {
    let mut scenes = scene_pair(1);
    scenes.extend(scene_pair(2));
    let train = TrolnTrainConfig {
        iterations: 3,
        per_domain: 1,
        ..Default::default()
    };
    let (model, log) = train_troln(&scenes, &tiny_cfg(), &train, 4).unwrap();
    assert_eq!(log.len(), 3);
    let out = troln_infer(&scenes[1].image, &model).unwrap();
    assert!(out.len() <= model.config.num_proposals);
    for p in &out {
        for v in [p.c, p.b, p.tau1, p.tau2] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(p.bbox.is_valid() && p.bbox.inside(64.0, 64.0));
    }
    assert_eq!(out, troln_infer(&scenes[1].image, &model).unwrap());
    let (again, _) = train_troln(&scenes, &tiny_cfg(), &train, 4).unwrap();
    assert_eq!(model.fingerprint(), again.fingerprint());

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("troln.json");
    model.save(&p).unwrap();
    let loaded = Troln::load(&p).unwrap();
    assert_eq!(out, troln_infer(&scenes[1].image, &loaded).unwrap());
    let json = serde_json::to_string(&out).unwrap();
    assert!(out.is_empty() || json.contains("\"tau2\""));
}

#[test]
fn training_rejects_unlabelled_or_single_domain_input() {
    let scenes = scene_pair(3);
    let train = TrolnTrainConfig {
        iterations: 1,
        per_domain: 1,
        ..Default::default()
    };
    assert!(train_troln(&scenes[..1], &tiny_cfg(), &train, 0).is_err());
    let mut t = scenes[0].clone();
    t.domain = Domain::Target;
    assert!(train_troln(&[scenes[0].clone(), scenes[1].clone(), t], &tiny_cfg(), &train, 0).is_err());
}

#[test]
fn pixel_targets_are_inside_boxes() {
    let gt = [BBox::new(4.0, 4.0, 30.0, 20.0), BBox::new(30.0, 30.0, 60.0, 62.0)];
    let p = pixel_targets(&gt, 8, 8, 8);
    assert!(!p.cells.is_empty());
    for (k, &(x, y)) in p.centers.iter().enumerate() {
        assert!(gt.iter().any(|b| b.contains_point(x, y)));
        assert!((0.0..=1.0).contains(&p.cent[k]));
    }
}
