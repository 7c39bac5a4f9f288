use super::*;
use crate::geom::brute;
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_points(n: usize, r: &mut ChaCha8Rng) -> Vec<Point3> {
    (0..n)
        .map(|_| Point3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)))
        .collect()
}

fn random_transform(r: &mut ChaCha8Rng) -> RigidTransform {
    let axis = Vector3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
    let t = Vector3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
    RigidTransform::from_axis_angle(&axis, r.gen_range(0.0..3.0), t)
}

fn row(id: &str, rmse: f64, rre: f64, rte: f64) -> PairResult {
    PairResult {
        pair_id: id.into(),
        rre_deg: rre,
        rte,
        chamfer: 0.0,
        corr_rmse: rmse,
        success: rmse < 0.2,
        t_pre_ms: 0.0,
        t_feat_ms: 0.0,
        t_pose_ms: 0.0,
    }
}

#[test]
fn rmse_of_exact_pose_is_zero() {
    let mut r = rng(1);
    let gt = random_transform(&mut r);
    let pairs: Vec<_> = random_points(20, &mut r).into_iter().map(|x| (x, gt.apply_point(&x))).collect();
    assert!(correspondence_rmse(&gt, &pairs).unwrap() < 1e-12);
}

#[test]
fn rmse_of_translated_pose_is_offset_norm() {
    let mut r = rng(2);
    let gt = random_transform(&mut r);
    let pairs: Vec<_> = random_points(20, &mut r).into_iter().map(|x| (x, gt.apply_point(&x))).collect();
    let delta = Vector3::new(0.1, -0.2, 0.3);
    let est = RigidTransform::from_translation(delta).compose(&gt);
    let got = correspondence_rmse(&est, &pairs).unwrap();
    assert!((got - delta.norm()).abs() < 1e-12);
}

#[test]
fn rmse_rejects_empty_set() {
    assert!(correspondence_rmse(&RigidTransform::identity(), &[]).is_err());
}

#[test]
fn metrics_match_brute_force_oracles() {
    let mut r = rng(3);
    for _ in 0..50 {
        let a = random_points(r.gen_range(1..40), &mut r);
        let b = random_points(r.gen_range(1..40), &mut r);
        let ca = PointCloud::new(a.clone()).unwrap();
        let cb = PointCloud::new(b.clone()).unwrap();
        let cd = chamfer_distance(&ca, &cb).unwrap();
        assert!((cd - brute::chamfer_sum_of_means(&a, &b)).abs() < 1e-9);

        let est = random_transform(&mut r);
        let gt = random_transform(&mut r);
        let pairs: Vec<_> = a.iter().map(|x| (*x, gt.apply_point(x))).collect();
        let mut sum = 0.0;
        for (x, y) in &pairs {
            let p = est.rotation() * x + est.translation();
            sum += (0..3).map(|k| (p[k] - y[k]).powi(2)).sum::<f64>();
        }
        let oracle = (sum / pairs.len() as f64).sqrt();
        assert!((correspondence_rmse(&est, &pairs).unwrap() - oracle).abs() < 1e-9);
    }
}

#[test]
fn recall_examples() {
    let all = vec![row("a", 0.01, 1.0, 0.1), row("b", 0.1, 2.0, 0.2)];
    assert_eq!(registration_recall(&all, 0.2).unwrap(), 1.0);
    let mixed = vec![
        row("a", 0.01, 1.0, 0.1),
        row("b", 0.1, 2.0, 0.2),
        row("c", 0.19, 3.0, 0.3),
        row("d", 0.5, 90.0, 2.0),
    ];
    assert_eq!(registration_recall(&mixed, 0.2).unwrap(), 0.75);
    assert!(registration_recall(&[], 0.2).is_err());
}

#[test]
fn aggregation_excludes_failed_pairs_only_in_success_mode() {
    let rows = vec![
        row("a", 0.01, 1.0, 0.1),
        row("b", 0.1, 3.0, 0.3),
        row("c", 0.5, 90.0, 2.0),
    ];
    let s = summarize(&rows, 0.2).unwrap();
    assert_eq!(s.successes, 2);
    assert_eq!(s.rre_mean_success, 2.0);
    assert_eq!(s.rre_median_success, 2.0);
    assert!((s.rte_mean_success - 0.2).abs() < 1e-15);
    assert_eq!(s.rre_median_all, 3.0);
    assert!((s.rre_mean_all - 94.0 / 3.0).abs() < 1e-12);
    assert_eq!(s.rte_median_all, 0.3);
}

#[test]
fn median_and_percentile() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    assert!(median(&[]).is_nan());
    let v: Vec<f64> = (1..=100).map(f64::from).collect();
    assert_eq!(percentile(&v, 0.95), 95.0);
    assert_eq!(percentile(&v, 0.0), 1.0);
    assert_eq!(percentile(&v, 1.0), 100.0);
}

#[test]
fn oracle_on_identical_grids_is_zero() {
    let mut pts = Vec::new();
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                pts.push(Point3::new(i as f64, j as f64, k as f64) * 0.1);
            }
        }
    }
    let pc = PointCloud::new(pts).unwrap();
    let rep = oracle_match(&pc, &pc, &RigidTransform::identity()).unwrap();
    assert_eq!(rep.median, 0.0);
    assert_eq!(rep.p95, 0.0);
}

#[test]
fn oracle_matches_exhaustive_matcher() {
    let mut r = rng(5);
    let kx = random_points(60, &mut r);
    let ky = random_points(45, &mut r);
    let gt = random_transform(&mut r);
    let rep = oracle_match(&PointCloud::new(kx.clone()).unwrap(), &PointCloud::new(ky.clone()).unwrap(), &gt).unwrap();
    for (x, e) in kx.iter().zip(&rep.errors) {
        let (_, d) = brute::nearest_neighbor(&gt.apply_point(x), &ky);
        assert!((d - e).abs() < 1e-12);
    }
}

#[test]
fn loose_pairs_use_nearest_neighbours_within_radius() {
    let src = PointCloud::new(vec![Point3::new(0.0, 0.0, 0.0), Point3::new(5.0, 0.0, 0.0)]).unwrap();
    let tgt = PointCloud::new(vec![Point3::new(1.01, 0.0, 0.0)]).unwrap();
    let pair = PairSample {
        source: src,
        target: tgt,
        gt_transform: RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0)),
        overlap_fraction: 0.5,
        clean_overlap: None,
    };
    let c = ground_truth_correspondences(&pair, 0.05);
    assert_eq!(c, vec![(Point3::new(0.0, 0.0, 0.0), Point3::new(1.01, 0.0, 0.0))]);
}

#[test]
fn oracle_correspondences_register_every_generated_pair() {
    use crate::synth::{make_modelnet_style_pair, generate_shape, PairConfig, ShapeKind};
    use crate::solver::weighted_kabsch_points;
    let cfg = PairConfig {
        noise_sigma: 0.0,
        ..PairConfig::default()
    };
    let mut rows = Vec::new();
    for seed in 0..6u64 {
        let mut r = rng(seed);
        let kind = if seed % 2 == 0 { ShapeKind::SphereCap } else { ShapeKind::Box };
        let shape = generate_shape(kind, 1024, &mut r).unwrap();
        let pair = make_modelnet_style_pair(&shape, 0.7, &cfg, &mut r).unwrap();
        let corr = pair.clean_correspondences().unwrap();
        let (xs, ys): (Vec<_>, Vec<_>) = corr.into_iter().unzip();
        let est = weighted_kabsch_points(&xs, &ys, &vec![1.0; xs.len()]).unwrap();
        rows.push(score_pair(&format!("p{seed}"), &pair, &est, 0.2, 0.075).unwrap());
    }
    assert_eq!(registration_recall(&rows, 0.2).unwrap(), 1.0);
    assert!(rows.iter().all(|r| r.rre_deg < 1e-6 && r.rte < 1e-9));
}

proptest! {
    #[test]
    fn recall_is_monotone_in_threshold(
        rmses in proptest::collection::vec(0.0f64..1.0, 1..30),
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
    ) {
        let rows: Vec<_> = rmses.iter().map(|&m| row("x", m, 0.0, 0.0)).collect();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(registration_recall(&rows, lo).unwrap() <= registration_recall(&rows, hi).unwrap());
    }

    #[test]
    fn success_count_matches_recall(rmses in proptest::collection::vec(0.0f64..0.5, 1..30)) {
        let rows: Vec<_> = rmses.iter().map(|&m| row("x", m, m, m)).collect();
        let s = summarize(&rows, 0.2).unwrap();
        prop_assert_eq!(s.successes, rmses.iter().filter(|&&m| m < 0.2).count());
        prop_assert!((s.recall - s.successes as f64 / rows.len() as f64).abs() < 1e-15);
    }
}
