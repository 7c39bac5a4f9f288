use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geom::brute;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut r = rng(seed);
    PointCloud::new(
        (0..n)
            .map(|_| Point3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)))
            .collect(),
    )
    .unwrap()
}

fn sorted_points(pc: &PointCloud) -> Vec<[f64; 3]> {
    let mut v: Vec<[f64; 3]> = pc.points().iter().map(|p| [p.x, p.y, p.z]).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

#[test]
fn one_voxel_gives_the_centroid() {
    let pc = PointCloud::from_arrays(&[[0.1, 0.1, 0.1], [0.3, 0.2, 0.1], [0.2, 0.6, 0.4]]).unwrap();
    let sub = voxel_subsample(&pc, 1.0).unwrap();
    assert_eq!(sub.len(), 1);
    assert!((sub.keypoints.get(0) - Point3::new(0.2, 0.3, 0.2)).norm() < 1e-15);
    assert_eq!(sub.pooling_indices, vec![vec![0, 1, 2]]);
}

#[test]
fn separated_points_stay_separate() {
    let pc = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [1.5, 0.0, 0.0]]).unwrap();
    let sub = voxel_subsample(&pc, 1.0).unwrap();
    assert_eq!(sub.keypoints, pc);
}

#[test]
fn non_positive_voxel_is_rejected() {
    let pc = random_cloud(10, 0);
    assert!(voxel_subsample(&pc, 0.0).is_err());
    assert!(voxel_subsample(&pc, -1.0).is_err());
}

#[test]
fn subsampling_matches_rebucketing_oracle() {
    let pc = random_cloud(2000, 3);
    let v = 0.23;
    let sub = voxel_subsample(&pc, v).unwrap();
    // Oracle buckets by integer division of the coordinate minus its remainder.
    let bucket = |x: f64| ((x - x.rem_euclid(v)) / v).round() as i64;
    let mut oracle: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in pc.points().iter().enumerate() {
        oracle.entry([bucket(p.x), bucket(p.y), bucket(p.z)]).or_default().push(i);
    }
    assert_eq!(oracle.len(), sub.len());
    let mut seen = vec![false; pc.len()];
    for (k, members) in sub.pooling_indices.iter().enumerate() {
        assert_eq!(oracle[&sub.voxels[k]], *members);
        let center = sub.voxel_center(k);
        let mut sum = Point3::zeros();
        for &i in members {
            assert!(!seen[i]);
            seen[i] = true;
            assert!((pc.get(i) - center).norm() <= v * 3f64.sqrt() / 2.0 + 1e-12);
            sum += pc.get(i);
        }
        assert!((sub.keypoints.get(k) - sum / members.len() as f64).norm() < 1e-12);
    }
    assert!(seen.into_iter().all(|s| s));
}

#[test]
fn keypoints_do_not_depend_on_input_order() {
    let pc = random_cloud(500, 4);
    let mut pts = pc.points().to_vec();
    pts.reverse();
    let a = voxel_subsample(&pc, 0.3).unwrap();
    let b = voxel_subsample(&PointCloud::new(pts).unwrap(), 0.3).unwrap();
    assert_eq!(a.voxels, b.voxels);
    for k in 0..a.len() {
        assert!((a.keypoints.get(k) - b.keypoints.get(k)).norm() < 1e-12);
    }
}

#[test]
fn full_crop_keeps_everything() {
    let pc = random_cloud(100, 5);
    let crop = halfspace_crop(&pc, 1.0, &mut rng(1)).unwrap();
    assert_eq!(crop.cloud, pc);
    assert!(halfspace_crop(&pc, 0.0, &mut rng(1)).is_err());
    assert!(halfspace_crop(&pc, 1.2, &mut rng(1)).is_err());
}

#[test]
fn half_crop_splits_at_the_plane() {
    let pc = random_cloud(100, 6);
    let crop = halfspace_crop(&pc, 0.5, &mut rng(2)).unwrap();
    assert_eq!(crop.cloud.len(), 50);
    for (i, p) in pc.points().iter().enumerate() {
        let kept = crop.indices.binary_search(&i).is_ok();
        assert_eq!(kept, crop.normal.dot(p) >= crop.offset, "point {i}");
    }
}

#[test]
fn crop_matches_sort_oracle_on_sphere() {
    let mut r = rng(7);
    let sphere = generate_shape(ShapeKind::SphereCap, 400, &mut r).unwrap();
    let crop = halfspace_crop(&sphere, 0.7, &mut r).unwrap();
    let mut scored: Vec<(f64, usize)> = sphere
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| (crop.normal.dot(p), i))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut expected: Vec<usize> = scored[..280].iter().map(|s| s.1).collect();
    expected.sort_unstable();
    assert_eq!(crop.indices, expected);
}

#[test]
fn kept_count_ignores_round_off() {
    assert_eq!(kept_count(0.7, 100), 70);
    assert_eq!(kept_count(0.7, 1434), 1004);
    assert_eq!(kept_count(0.5, 101), 51);
    assert_eq!(kept_count(1.0, 7), 7);
}

fn modelnet_cfg() -> PairConfig {
    PairConfig::default()
}

fn mean_overlap(p: f64) -> f64 {
    let mut total = 0.0;
    for seed in 0..100 {
        let entry = ManifestEntry {
            seed,
            kind: ShapeKind::ALL[seed as usize % 4],
            p,
            count: 717,
            scene: None,
        };
        total += entry.generate(&modelnet_cfg(), 2048).unwrap().overlap_fraction;
    }
    total / 100.0
}

#[test]
fn overlap_tracks_keep_fraction() {
    let hi = mean_overlap(0.7);
    let lo = mean_overlap(0.5);
    assert!((hi - 0.735).abs() < 0.1, "p=0.7 overlap {hi}");
    assert!((lo - 0.536).abs() < 0.1, "p=0.5 overlap {lo}");
}

#[test]
fn clean_pair_is_a_shuffle_of_the_shape() {
    let mut r = rng(8);
    let shape = generate_shape(ShapeKind::Box, 300, &mut r).unwrap();
    let cfg = PairConfig {
        max_rotation_deg: 0.0,
        max_translation: 0.0,
        noise_sigma: 0.0,
        num_points: 1000,
        ..PairConfig::default()
    };
    let pair = make_modelnet_style_pair(&shape, 1.0, &cfg, &mut r).unwrap();
    assert_eq!(sorted_points(&pair.source), sorted_points(&shape));
    assert_eq!(sorted_points(&pair.target), sorted_points(&shape));
    assert_eq!(pair.overlap_fraction, 1.0);
    assert_ne!(pair.source, shape);
}

#[test]
fn generated_pair_respects_motion_bounds() {
    let entry = ManifestEntry {
        seed: 11,
        kind: ShapeKind::Box,
        p: 0.7,
        count: 717,
        scene: None,
    };
    let pair = entry.generate(&PairConfig::default(), 2048).unwrap();
    assert_eq!(pair.source.len(), 717);
    assert_eq!(pair.target.len(), 717);
    let angle = crate::geom::rotation_error(&pair.gt_transform, &RigidTransform::identity());
    assert!(angle <= 45.0 + 1e-9);
    assert!(pair.gt_transform.translation().amax() <= 0.5);
    let corr = pair.clean_correspondences().unwrap();
    assert!(!corr.is_empty());
}

#[test]
fn tiny_crops_are_rejected() {
    let mut r = rng(12);
    let shape = generate_shape(ShapeKind::Box, 64, &mut r).unwrap();
    assert!(make_modelnet_style_pair(&shape, 0.3, &PairConfig::default(), &mut r).is_err());
}

fn aligned_pair(seed: u64) -> PairSample {
    let mut r = rng(seed);
    let source = generate_shape(ShapeKind::CompositeRoom, 700, &mut r).unwrap();
    let gt = RigidTransform::from_axis_angle(&Vector3::new(1.0, 2.0, 0.5), 0.4, Vector3::new(0.1, -0.3, 0.2));
    PairSample {
        target: gt.apply(&source),
        clean_overlap: Some(source.clone()),
        source,
        gt_transform: gt,
        overlap_fraction: 1.0,
    }
}

#[test]
fn zero_sigma_augmentation_is_identity() {
    let pair = aligned_pair(13);
    let out = augment_pair_with(pair.clone(), &AugmentConfig::none(), &mut rng(1));
    assert_eq!(out.source, pair.source);
    assert_eq!(out.target, pair.target);
    assert!((out.gt_transform.to_homogeneous() - pair.gt_transform.to_homogeneous()).amax() < 1e-15);
}

#[test]
fn shuffle_only_permutes() {
    let pair = aligned_pair(14);
    let cfg = AugmentConfig {
        shuffle: true,
        ..AugmentConfig::none()
    };
    let out = augment_pair_with(pair.clone(), &cfg, &mut rng(2));
    assert_ne!(out.source, pair.source);
    assert_eq!(sorted_points(&out.source), sorted_points(&pair.source));
    assert_eq!(sorted_points(&out.target), sorted_points(&pair.target));
}

#[test]
fn augmented_ground_truth_still_aligns() {
    let pair = aligned_pair(15);
    let sigma = 0.05;
    let out = augment_scene_pair(pair, &mut rng(3));
    // Clean copies: the clean overlap moved with the source.
    for (s, t) in out.clean_correspondences().unwrap().iter().take(5) {
        assert!((out.gt_transform.apply_point(s) - t).norm() < 1e-12);
    }
    // Noisy copies: each aligned source point has a target point within the
    // jitter scale; the RMS of two independent σ-jitters is σ·√6 < 3σ.
    let moved = out.gt_transform.apply(&out.source);
    let ms: f64 = moved
        .points()
        .iter()
        .map(|p| brute::nearest_neighbor(p, out.target.points()).1.powi(2))
        .sum::<f64>()
        / moved.len() as f64;
    assert!(ms.sqrt() < 3.0 * sigma, "rms {}", ms.sqrt());
}

#[test]
fn manifest_round_trip() {
    let entries = vec![
        ManifestEntry {
            seed: 42,
            kind: ShapeKind::SphereCap,
            p: 0.7,
            count: 717,
            scene: None,
        },
        ManifestEntry {
            seed: 7,
            kind: ShapeKind::CompositeRoom,
            p: 0.5,
            count: 300,
            scene: Some("room-a".into()),
        },
    ];
    let text = manifest_string(&entries);
    assert_eq!(parse_manifest(&text).unwrap(), entries);
    assert!(parse_manifest("1 torus 0.7 100\n").is_err());
    assert!(parse_manifest("1 box 1.5 100\n").is_err());
    assert!(parse_manifest("1 box\n").is_err());
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let entry = ManifestEntry {
        seed: 5,
        kind: ShapeKind::Box,
        p: 0.7,
        count: 200,
        scene: None,
    };
    let pair = entry.generate(&PairConfig::default(), 512).unwrap();
    Dataset::write(dir.path(), &[(entry.clone(), pair.clone())]).unwrap();
    let loaded = Dataset::load(dir.path(), 0.05).unwrap();
    assert_eq!(loaded.pairs.len(), 1);
    let got = &loaded.pairs[0];
    assert_eq!(got.entry, entry);
    assert_eq!(got.pair.source, pair.source);
    assert_eq!(got.pair.target, pair.target);
    assert_eq!(got.pair.clean_overlap, pair.clean_overlap);
    let h = got.pair.gt_transform.to_homogeneous() - pair.gt_transform.to_homogeneous();
    assert!(h.amax() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn crop_count_is_ceiling(num in 1usize..20, m in 1usize..300, seed in any::<u64>()) {
        let p = num as f64 / 20.0;
        let pc = random_cloud(m, seed);
        let crop = halfspace_crop(&pc, p, &mut rng(seed)).unwrap();
        prop_assert_eq!(crop.cloud.len(), (num * m).div_ceil(20));
    }

    #[test]
    fn coarser_nested_grids_never_add_keypoints(seed in any::<u64>(), v in 0.05f64..0.5, k in 2u32..5) {
        let pc = random_cloud(300, seed);
        let fine = voxel_subsample(&pc, v).unwrap();
        let coarse = voxel_subsample(&pc, v * k as f64).unwrap();
        prop_assert!(coarse.len() <= fine.len());
        let mut all: Vec<usize> = coarse.pooling_indices.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..pc.len()).collect::<Vec<_>>());
    }
}
