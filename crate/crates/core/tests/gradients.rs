//! Analytic gradients against central finite differences and loop oracles.

use ndarray::Array2;
use otseg_core::data::Rng;
use otseg_core::jdot::{
    joint_cost_matrix, ot_loss, ot_loss_gradient, DistGrid, JointCostConfig, LabelBatch, LabelGrid, OutputBatch,
};
use otseg_core::nn::{softmax, MultiLevelWeights, ObjectiveConfig, ObjectiveForward, SegNet, SegNetConfig, Tape, Tensor};
use otseg_core::ot::{sinkhorn, squared_euclidean_cost, DiscreteMeasure, SinkhornConfig, TransportPlan};

fn random_grid(rng: &mut Rng, h: usize, w: usize, k: usize) -> DistGrid {
    let mut v = Vec::with_capacity(h * w * k);
    for _ in 0..h * w {
        let raw: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.05, 1.0)).collect();
        let s: f64 = raw.iter().sum();
        v.extend(raw.iter().map(|x| x / s));
    }
    DistGrid::new(h, w, k, v).unwrap()
}

fn random_labels(rng: &mut Rng, h: usize, w: usize, k: usize) -> LabelGrid {
    let labels = (0..h * w).map(|_| rng.below(k)).collect();
    let ignore = (0..h * w).map(|_| rng.uniform() < 0.2).collect::<Vec<bool>>();
    let ignore = if ignore.iter().all(|&x| x) { vec![false; h * w] } else { ignore };
    LabelGrid::new(h, w, k, labels, ignore).unwrap()
}

fn uniform_plan(ns: usize, nt: usize, rng: &mut Rng) -> TransportPlan {
    let c = Array2::from_shape_fn((ns, nt), |_| rng.uniform());
    let cost = otseg_core::ot::CostMatrix::new(c).unwrap();
    sinkhorn(
        &DiscreteMeasure::uniform_weights(ns).unwrap(),
        &DiscreteMeasure::uniform_weights(nt).unwrap(),
        &cost,
        &SinkhornConfig::with_lambda(3.0).unwrap(),
    )
    .unwrap()
}

/// Direct per-pixel loops over the definitions.
fn joint_cost_oracle(ps: &[DistGrid], ys: &[LabelGrid], pt: &[DistGrid], alpha: f64, beta: f64) -> Array2<f64> {
    Array2::from_shape_fn((ps.len(), pt.len()), |(i, j)| {
        let (p, q, y) = (&ps[i], &pt[j], &ys[i]);
        let (_, _, k) = p.shape();
        let mut kl = 0.0;
        for px in 0..p.pixels() {
            for c in 0..k {
                let a = p.pixel(px)[c];
                if a > 0.0 {
                    kl += a * (a / q.pixel(px)[c].max(1e-12)).ln();
                }
            }
        }
        kl /= p.pixels() as f64;
        let mut ce = 0.0;
        let mut n = 0;
        for px in 0..p.pixels() {
            if !y.ignore_mask()[px] {
                ce -= q.pixel(px)[y.labels()[px]].max(1e-12).ln();
                n += 1;
            }
        }
        alpha * kl + beta * ce / n as f64
    })
}

#[test]
fn joint_cost_matches_loop_oracle() {
    let mut rng = Rng::new(5);
    for &(alpha, beta) in &[(1.0, 0.0), (0.0, 1.0), (0.3, 0.7)] {
        let ps: Vec<_> = (0..3).map(|_| random_grid(&mut rng, 3, 4, 3)).collect();
        let pt: Vec<_> = (0..2).map(|_| random_grid(&mut rng, 3, 4, 3)).collect();
        let ys: Vec<_> = (0..3).map(|_| random_labels(&mut rng, 3, 4, 3)).collect();
        let d = joint_cost_matrix(
            &OutputBatch::new(ps.clone()).unwrap(),
            &LabelBatch::new(ys.clone()).unwrap(),
            &OutputBatch::new(pt.clone()).unwrap(),
            &JointCostConfig { alpha, beta },
        )
        .unwrap();
        let oracle = joint_cost_oracle(&ps, &ys, &pt, alpha, beta);
        for (x, y) in d.entries().iter().zip(oracle.iter()) {
            assert!((x - y).abs() < 1e-13, "{x} vs {y}");
        }
    }
}

#[test]
fn ot_loss_gradient_matches_finite_differences() {
    let mut rng = Rng::new(11);
    let h = 1e-7;
    for &(alpha, beta) in &[(1.0, 0.0), (0.0, 1.0), (0.3, 0.7)] {
        let cfg = JointCostConfig { alpha, beta };
        let ps: Vec<_> = (0..2).map(|_| random_grid(&mut rng, 2, 2, 3)).collect();
        let pt: Vec<_> = (0..3).map(|_| random_grid(&mut rng, 2, 2, 3)).collect();
        let ys = LabelBatch::new((0..2).map(|_| random_labels(&mut rng, 2, 2, 3)).collect()).unwrap();
        let gamma = uniform_plan(2, 3, &mut rng);
        let loss = |ps: &[DistGrid], pt: &[DistGrid]| {
            let d = joint_cost_matrix(
                &OutputBatch::new(ps.to_vec()).unwrap(),
                &ys,
                &OutputBatch::new(pt.to_vec()).unwrap(),
                &cfg,
            )
            .unwrap();
            ot_loss(&gamma, &d).unwrap()
        };
        let grad = ot_loss_gradient(
            &gamma,
            &OutputBatch::new(ps.clone()).unwrap(),
            &ys,
            &OutputBatch::new(pt.clone()).unwrap(),
            &cfg,
        )
        .unwrap();
        for side in 0..2 {
            let n = if side == 0 { ps.len() } else { pt.len() };
            for s in 0..n {
                for e in 0..12 {
                    let (mut a, mut b) = (ps.clone(), pt.clone());
                    let (mut c, mut d) = (ps.clone(), pt.clone());
                    let (up, down) = if side == 0 { (&mut a[s], &mut c[s]) } else { (&mut b[s], &mut d[s]) };
                    up.values_mut()[e] += h;
                    down.values_mut()[e] -= h;
                    let fd = (loss(&a, &b) - loss(&c, &d)) / (2.0 * h);
                    let an = if side == 0 { grad.source[s].values()[e] } else { grad.target[s].values()[e] };
                    let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                    assert!(err < 1e-5, "α={alpha} β={beta} side {side} sample {s} entry {e}: {an} vs {fd}");
                }
            }
        }
    }
}

#[test]
fn kl_gradient_vanishes_in_logit_space_for_identical_outputs() {
    let mut rng = Rng::new(2);
    let logits = Tensor::new(vec![1, 2, 2, 3], (0..12).map(|_| rng.uniform_range(-2.0, 2.0)).collect()).unwrap();
    let probs = softmax(&logits).unwrap();
    let grid = DistGrid::new(2, 2, 3, probs.data().to_vec()).unwrap();
    let ys = LabelBatch::new(vec![random_labels(&mut rng, 2, 2, 3)]).unwrap();
    let batch = OutputBatch::new(vec![grid]).unwrap();
    let gamma = uniform_plan(1, 1, &mut rng);
    let g = ot_loss_gradient(&gamma, &batch, &ys, &batch, &JointCostConfig { alpha: 1.0, beta: 0.0 }).unwrap();
    for raw in [&g.source[0], &g.target[0]] {
        let mut tape = Tape::new();
        let x = tape.leaf(logits.clone());
        let p = tape.softmax(x).unwrap();
        let seed = Tensor::new(vec![1, 2, 2, 3], raw.values().to_vec()).unwrap();
        let grads = tape.backward(&[(p, &seed)]).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let net = SegNet::new(SegNetConfig { in_channels: 3, num_classes: 3, widths: [2, 3, 3] }, 9).unwrap();
    let mut rng = Rng::new(4);
    let (b, side) = (2, 8);
    let image = |rng: &mut Rng| (0..side * side * 3).map(|_| rng.uniform()).collect::<Vec<f64>>();
    let xs_raw: Vec<Vec<f64>> = (0..b).map(|_| image(&mut rng)).collect();
    let xt_raw: Vec<Vec<f64>> = (0..b).map(|_| image(&mut rng)).collect();
    let xs = Tensor::new(vec![b, side, side, 3], xs_raw.concat()).unwrap();
    let xt = Tensor::new(vec![b, side, side, 3], xt_raw.concat()).unwrap();
    let ys = LabelBatch::new((0..b).map(|_| random_labels(&mut rng, side, side, 3)).collect()).unwrap();
    let cost = squared_euclidean_cost(&xs_raw, &xt_raw).unwrap();
    let gamma = sinkhorn(
        &DiscreteMeasure::uniform_weights(b).unwrap(),
        &DiscreteMeasure::uniform_weights(b).unwrap(),
        &cost,
        &SinkhornConfig::with_lambda(0.1).unwrap(),
    )
    .unwrap();
    let config = ObjectiveConfig {
        weights: MultiLevelWeights::new(vec![0.4, 1.0], vec![0.3, 0.8]).unwrap(),
        joint: JointCostConfig { alpha: 0.3, beta: 0.7 },
    };
    let eval = |net: &SegNet| {
        let f = ObjectiveForward::run(net, &config, &xs, &ys, Some(&xt)).unwrap();
        f.finish(&[Some(&gamma), Some(&gamma)]).unwrap()
    };
    let (_, grads) = eval(&net);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (t, g) in grads.iter().enumerate() {
        for e in 0..g.len() {
            let mut up = net.clone();
            up.params_mut()[t].data_mut()[e] += h;
            let mut down = net.clone();
            down.params_mut()[t].data_mut()[e] -= h;
            let fd = (eval(&up).0.total - eval(&down).0.total) / (2.0 * h);
            let an = g.data()[e];
            worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-6));
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}
