use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::grad_check;

fn cloud(n: usize, seed: u64, spread: f64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new(
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-spread..spread),
                    rng.gen_range(-spread..spread),
                    rng.gen_range(-spread..spread),
                )
            })
            .collect(),
    )
    .unwrap()
}

fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn singletons(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|i| vec![i]).collect()
}

#[test]
fn identical_clouds_are_fully_overlapping() {
    let pc = cloud(50, 1, 1.0);
    let l = overlap_labels(&pc, &pc, &RigidTransform::identity(), &singletons(50), 0.01).unwrap();
    assert!(l.dense.iter().chain(&l.keypoint).all(|v| *v == 1.0));
}

#[test]
fn distant_clouds_do_not_overlap() {
    let a = cloud(50, 2, 1.0);
    let b = a.translated(&Point3::new(100.0, 0.0, 0.0));
    let l = overlap_labels(&a, &b, &RigidTransform::identity(), &singletons(50), 0.5).unwrap();
    assert!(l.dense.iter().chain(&l.keypoint).all(|v| *v == 0.0));
    assert!(overlap_labels(&a, &b, &RigidTransform::identity(), &singletons(50), 0.0).is_err());
}

#[test]
fn keypoint_label_is_pooled_mean() {
    let a = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.2, 0.0, 0.0], [5.0, 0.0, 0.0]]).unwrap();
    let b = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.2, 0.0, 0.0]]).unwrap();
    let l = overlap_labels(&a, &b, &RigidTransform::identity(), &[vec![0, 1, 2, 3]], 0.05).unwrap();
    assert_eq!(l.dense, vec![1.0, 1.0, 1.0, 0.0]);
    assert_eq!(l.keypoint, vec![0.75]);
}

#[test]
fn bce_at_clamp_bounds_is_near_zero() {
    let mut g = Graph::<f64>::new();
    let pred = g.constant(Tensor::from_rows(&[vec![1.0], vec![0.0], vec![1.0]]).unwrap());
    let loss = overlap_loss(&mut g, pred, &[1.0, 0.0, 1.0]).unwrap();
    assert!(g.value(loss).item().abs() < 1e-5);
}

#[test]
fn bce_at_one_half_is_ln2() {
    let mut g = Graph::<f64>::new();
    let pred = g.constant(Tensor::full(7, 1, 0.5));
    let loss = overlap_loss(&mut g, pred, &[0.0, 1.0, 0.3, 0.7, 1.0, 0.0, 0.5]).unwrap();
    assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-6);
}

#[test]
fn bce_matches_elementwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p: Vec<f64> = (0..20).map(|_| rng.gen_range(0.01..0.99)).collect();
    let o: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut g = Graph::<f64>::new();
    let pred = g.constant(column(&p));
    let loss = overlap_loss(&mut g, pred, &o).unwrap();
    let expect = -p
        .iter()
        .zip(&o)
        .map(|(p, o)| o * p.ln() + (1.0 - o) * (1.0 - p).ln())
        .sum::<f64>()
        / 20.0;
    assert!((g.value(loss).item() - expect).abs() < 1e-12);
}

#[test]
fn correspondence_loss_cases() {
    let kp = cloud(6, 4, 1.0);
    let gt = RigidTransform::from_axis_angle(&Point3::new(0.0, 0.0, 1.0), 0.3, Point3::new(0.5, 0.0, -0.2));
    let exact = Tensor::from_fn(6, 3, |r, c| gt.apply_point(&kp.get(r))[c]);
    let labels = [1.0, 0.5, 0.0, 1.0, 0.25, 1.0];
    let mut g = Graph::<f64>::new();
    let pred = g.constant(exact.clone());
    let l = correspondence_loss(&mut g, pred, &kp, &gt, &labels).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    // Brute-force weighted mean of per-keypoint L1 errors.
    let mut noisy = exact.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    noisy.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
    let pred = g.constant(noisy.clone());
    let l = correspondence_loss(&mut g, pred, &kp, &gt, &labels).unwrap();
    let mut num = 0.0;
    for r in 0..6 {
        let e: f64 = (0..3).map(|c| (noisy.get(r, c) - exact.get(r, c)).abs()).sum();
        num += labels[r] * e;
    }
    let expect = num / labels.iter().sum::<f64>();
    assert!((g.value(l).item() - expect).abs() < 1e-12);

    let zero = correspondence_loss(&mut g, pred, &kp, &gt, &[0.0; 6]).unwrap();
    assert_eq!(g.value(zero).item(), 0.0);
}

#[test]
fn correspondence_loss_single_offset() {
    let kp = PointCloud::from_arrays(&[[0.2, 0.3, 0.4]]).unwrap();
    let mut g = Graph::<f64>::new();
    let pred = g.constant(Tensor::from_rows(&[vec![0.3, 0.3, 0.4]]).unwrap());
    let l = correspondence_loss(&mut g, pred, &kp, &RigidTransform::identity(), &[1.0]).unwrap();
    assert!((g.value(l).item() - 0.1).abs() < 1e-12);
}

/// Exhaustive pairwise evaluation of one InfoNCE direction.
fn infonce_oracle(
    fa: &Tensor<f64>,
    fb: &Tensor<f64>,
    w: &Tensor<f64>,
    ka: &PointCloud,
    kb: &PointCloud,
    t: &RigidTransform,
    r_p: f64,
    r_n: f64,
) -> Option<f64> {
    let score = |i: usize, j: usize| {
        let mut s = 0.0;
        for a in 0..w.rows() {
            for b in 0..w.cols() {
                s += fa.get(i, a) * w.get(a, b) * fb.get(j, b);
            }
        }
        s
    };
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..ka.len() {
        let q = t.apply_point(&ka.get(i));
        let dists: Vec<f64> = (0..kb.len()).map(|j| (kb.get(j) - q).norm()).collect();
        let (p, dp) = dists
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (j, &d)| if d < best.1 { (j, d) } else { best });
        if dp > r_p {
            continue;
        }
        let fp = score(i, p).exp();
        let fneg: f64 = (0..kb.len()).filter(|&j| dists[j] > r_n).map(|j| score(i, j).exp()).sum();
        total += -(fp / (fp + fneg)).ln();
        count += 1;
    }
    (count > 0).then(|| total / count as f64)
}

fn toy_infonce() -> (PointCloud, PointCloud, RigidTransform, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let kx = cloud(6, 10, 1.0);
    let gt = RigidTransform::from_axis_angle(&Point3::new(1.0, 1.0, 0.0), 0.5, Point3::new(0.1, 0.2, 0.3));
    let mut pts: Vec<Point3> = kx.points().iter().take(4).map(|p| gt.apply_point(p)).collect();
    pts.push(Point3::new(3.0, 0.0, 0.0));
    let ky = PointCloud::new(pts).unwrap();
    let fx = rand_tensor(6, 8, 11);
    let fy = rand_tensor(5, 8, 12);
    let u = rand_tensor(8, 8, 13).map(|v| 0.3 * v);
    (kx, ky, gt, fx, fy, u)
}

#[test]
fn infonce_matches_exhaustive_oracle() {
    let (kx, ky, gt, fx, fy, u) = toy_infonce();
    let mut g = Graph::<f64>::new();
    let (a, b, uv) = (g.constant(fx.clone()), g.constant(fy.clone()), g.constant(u));
    let w = symmetric_weight(&mut g, uv).unwrap();
    let wt = g.value(w).clone();
    assert_eq!(wt, wt.transpose());
    let l = infonce_loss(&mut g, a, b, &kx, &ky, &gt, w, 0.05, 0.1).unwrap();
    let expect = infonce_oracle(&fx, &fy, &wt, &kx, &ky, &gt, 0.05, 0.1).unwrap()
        + infonce_oracle(&fy, &fx, &wt, &ky, &kx, &gt.inverse(), 0.05, 0.1).unwrap();
    assert!((g.value(l).item() - expect).abs() < 1e-10);
}

#[test]
fn infonce_with_zero_weight_counts_negatives() {
    let (kx, ky, gt, fx, fy, _) = toy_infonce();
    let mut g = Graph::<f64>::new();
    let (a, b) = (g.constant(fx), g.constant(fy));
    let w = g.constant(Tensor::zeros(8, 8));
    let sets = contrast_sets(&kx, &ky, &gt, 0.05, 0.1);
    let l = infonce_direction(&mut g, a, b, w, &sets).unwrap().unwrap();
    let expect: f64 = sets
        .anchors
        .iter()
        .enumerate()
        .map(|(r, _)| {
            let row = &sets.mask[r * ky.len()..(r + 1) * ky.len()];
            (row.iter().filter(|&&m| m).count() as f64).ln()
        })
        .sum::<f64>()
        / sets.anchors.len() as f64;
    assert_eq!(sets.anchors.len(), 4);
    assert!((g.value(l).item() - expect).abs() < 1e-12);
}

#[test]
fn infonce_single_negative_equal_scores_is_ln2() {
    let ka = PointCloud::from_arrays(&[[0.0, 0.0, 0.0]]).unwrap();
    let kb = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
    let mut g = Graph::<f64>::new();
    let fa = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let fb = g.constant(Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap());
    let w = g.constant(Tensor::identity(2));
    let sets = contrast_sets(&ka, &kb, &RigidTransform::identity(), 0.1, 0.2);
    let l = infonce_direction(&mut g, fa, fb, w, &sets).unwrap().unwrap();
    assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn bilinear_score_is_symmetric_in_roles() {
    let (_, _, _, fx, fy, u) = toy_infonce();
    let mut g = Graph::<f64>::new();
    let uv = g.constant(u);
    let w = symmetric_weight(&mut g, uv).unwrap();
    let (a, b) = (g.constant(fx), g.constant(fy));
    let aw = g.matmul(a, w).unwrap();
    let s_ab = g.matmul_nt(aw, b).unwrap();
    let bw = g.matmul(b, w).unwrap();
    let s_ba = g.matmul_nt(bw, a).unwrap();
    let lhs = g.value(s_ab).clone();
    let rhs = g.value(s_ba).transpose();
    assert!(lhs.max_abs_diff(&rhs) < 1e-12);
}

#[test]
fn total_loss_weights_components() {
    let mut g = Graph::<f64>::new();
    let one = g.constant(Tensor::scalar(1.0));
    let zero = g.constant(Tensor::scalar(0.0));
    let c = LossComponents {
        correspondence: one,
        overlap: one,
        feature: one,
    };
    let t = total_loss(&mut g, &c, 1.0, 0.1).unwrap();
    assert!((g.value(t).item() - 2.1).abs() < 1e-15);
    let z = LossComponents {
        correspondence: zero,
        overlap: zero,
        feature: zero,
    };
    let t = total_loss(&mut g, &z, 1.0, 0.1).unwrap();
    assert_eq!(g.value(t).item(), 0.0);
    let mut g2 = Graph::<f64>::new();
    g2.set_check_finite(false);
    let nan = g2.constant(Tensor::scalar(f64::NAN));
    let one = g2.constant(Tensor::scalar(1.0));
    let bad = LossComponents {
        correspondence: one,
        overlap: nan,
        feature: one,
    };
    match total_loss(&mut g2, &bad, 1.0, 0.1) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("overlap")),
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let (kx, ky, gt, fx, fy, u) = toy_infonce();
    let labels = [1.0, 0.5, 0.0, 1.0, 0.25, 0.75];
    let coords = rand_tensor(6, 3, 20);
    let probs = rand_tensor(6, 1, 21).map(|v| 0.5 + 0.4 * v);
    let report = grad_check(
        |g, v| {
            let c = correspondence_loss(g, v[0], &kx, &gt, &labels)?;
            let o = overlap_loss(g, v[1], &labels)?;
            let w = symmetric_weight(g, v[4])?;
            let f = infonce_loss(g, v[2], v[3], &kx, &ky, &gt, w, 0.05, 0.1)?;
            total_loss(
                g,
                &LossComponents {
                    correspondence: c,
                    overlap: o,
                    feature: f,
                },
                1.0,
                0.1,
            )
        },
        &[coords, probs, fx.clone(), fy.clone(), u],
        1e-6,
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");

    // Adaptive weights stay in the graph so finite differences see the same function.
    let cp = CircleParams {
        detach_weights: false,
        ..CircleParams::default()
    };
    let circle = grad_check(
        |g, v| circle_loss(g, v[0], v[1], &kx, &ky, &gt, 0.05, 0.6, &cp),
        &[fx, fy],
        1e-6,
    )
    .unwrap();
    assert!(circle.passes(1e-4), "{circle:?}");
}

#[test]
fn ablation_names_round_trip() {
    for a in [LossAblation::Full, LossAblation::NoFeat, LossAblation::Circle, LossAblation::AllLayers] {
        assert_eq!(a.to_string().parse::<LossAblation>().unwrap(), a);
    }
    assert!("none".parse::<LossAblation>().is_err());
}
