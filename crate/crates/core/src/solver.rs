//! Rigid transform estimation from weighted correspondences.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{svd3, Point3, PointCloud, RigidTransform};

/// Relative singular value below which the covariance counts as rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-9;

/// Per-keypoint predictions of one cloud, as plain numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct PointPredictions {
    /// Predicted partner of every keypoint, in the other cloud's frame.
    pub coords: Vec<Point3>,
    /// Overlap score of every keypoint.
    pub scores: Vec<f64>,
}

/// Stacked correspondences in source → target direction.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceBundle {
    pub source: Vec<Point3>,
    pub target: Vec<Point3>,
    pub weights: Vec<f64>,
}

impl CorrespondenceBundle {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn uniform(source: Vec<Point3>, target: Vec<Point3>) -> Self {
        let weights = vec![1.0; source.len()];
        CorrespondenceBundle {
            source,
            target,
            weights,
        }
    }
}

/// Rows `0..M'` pair source keypoints with their predicted target positions;
/// rows `M'..M'+N'` pair predicted source positions with target keypoints.
/// Each row carries the overlap score of the keypoint it came from.
pub fn assemble(
    kx: &PointCloud,
    ky: &PointCloud,
    pred_xy: &PointPredictions,
    pred_yx: &PointPredictions,
) -> Result<CorrespondenceBundle> {
    for (k, p) in [(kx, pred_xy), (ky, pred_yx)] {
        if p.coords.len() != k.len() || p.scores.len() != k.len() {
            return Err(Error::ShapeMismatch {
                op: "assemble",
                lhs: vec![k.len()],
                rhs: vec![p.coords.len(), p.scores.len()],
            });
        }
    }
    let mut source = kx.points().to_vec();
    source.extend_from_slice(&pred_yx.coords);
    let mut target = pred_xy.coords.clone();
    target.extend_from_slice(ky.points());
    let mut weights = pred_xy.scores.clone();
    weights.extend_from_slice(&pred_yx.scores);
    Ok(CorrespondenceBundle {
        source,
        target,
        weights,
    })
}

/// Closed-form weighted least-squares rigid transform.
///
/// Weighted centroids, covariance `H = Σ w_i x̃_i ỹ_iᵀ` of the centred sets,
/// `H = U Σ Vᵀ`, `R = V diag(1, 1, det(V Uᵀ)) Uᵀ`, `t = ȳ - R x̄`.
pub fn weighted_kabsch(bundle: &CorrespondenceBundle) -> Result<RigidTransform> {
    weighted_kabsch_points(&bundle.source, &bundle.target, &bundle.weights)
}

pub fn weighted_kabsch_points(source: &[Point3], target: &[Point3], weights: &[f64]) -> Result<RigidTransform> {
    if source.len() != target.len() || source.len() != weights.len() {
        return Err(Error::ShapeMismatch {
            op: "weighted_kabsch",
            lhs: vec![source.len(), target.len()],
            rhs: vec![weights.len()],
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::invalid("correspondence weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 1e-12) {
        return Err(Error::NoConfidentCorrespondences);
    }
    let mut xbar = Vector3::zeros();
    let mut ybar = Vector3::zeros();
    for ((x, y), w) in source.iter().zip(target).zip(weights) {
        let w = w / total;
        xbar += x * w;
        ybar += y * w;
    }
    let mut h = Matrix3::zeros();
    for ((x, y), w) in source.iter().zip(target).zip(weights) {
        h += ((x - xbar) * (w / total)) * (y - ybar).transpose();
    }
    let svd = svd3(&h);
    if !(svd.s[0] > 0.0) || svd.s[1] <= RANK_TOLERANCE * svd.s[0] {
        return Err(Error::Degenerate);
    }
    let (u, v) = (svd.u, svd.v);
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let t = ybar - r * xbar;
    RigidTransform::new(r, t)
}

/// Outcome of [`ransac_estimate`].
#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub transform: RigidTransform,
    /// Inliers of the winning hypothesis.
    pub inliers: Vec<usize>,
    /// Index of the winning hypothesis.
    pub hypothesis: usize,
}

fn inliers_of(t: &RigidTransform, source: &[Point3], target: &[Point3], threshold: f64) -> Vec<usize> {
    source
        .iter()
        .zip(target)
        .enumerate()
        .filter(|(_, (x, y))| (t.apply_point(x) - *y).norm() < threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Hypothesise-and-verify over random 3-point samples with unweighted Kabsch,
/// then a uniform-weight refit on the best inlier set.
///
/// Hypothesis `h` draws its sample from its own stream of a seed taken from
/// `rng`, and the best hypothesis is the one with most inliers, lowest index
/// first, so the result does not depend on thread scheduling.
pub fn ransac_estimate(
    source: &[Point3],
    target: &[Point3],
    iterations: usize,
    threshold: f64,
    rng: &mut impl Rng,
) -> Result<RansacResult> {
    let n = source.len();
    if n != target.len() {
        return Err(Error::ShapeMismatch {
            op: "ransac_estimate",
            lhs: vec![n],
            rhs: vec![target.len()],
        });
    }
    if n < 3 {
        return Err(Error::invalid(format!("RANSAC needs at least 3 correspondences, got {n}")));
    }
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!("inlier threshold must be positive, got {threshold}")));
    }
    let seed: u64 = rng.gen();
    let best = (0..iterations)
        .into_par_iter()
        .filter_map(|h| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(h as u64);
            let pick = index::sample(&mut r, n, 3).into_vec();
            let xs: Vec<Point3> = pick.iter().map(|&i| source[i]).collect();
            let ys: Vec<Point3> = pick.iter().map(|&i| target[i]).collect();
            let t = weighted_kabsch_points(&xs, &ys, &[1.0; 3]).ok()?;
            let count = inliers_of(&t, source, target, threshold).len();
            Some((count, h, t))
        })
        .reduce_with(|a, b| {
            if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                b
            } else {
                a
            }
        });
    let (count, hypothesis, t) = best.ok_or(Error::NoHypothesis)?;
    if count < 3 {
        return Err(Error::NoHypothesis);
    }
    let inliers = inliers_of(&t, source, target, threshold);
    let xs: Vec<Point3> = inliers.iter().map(|&i| source[i]).collect();
    let ys: Vec<Point3> = inliers.iter().map(|&i| target[i]).collect();
    let transform = weighted_kabsch_points(&xs, &ys, &vec![1.0; xs.len()]).unwrap_or(t);
    Ok(RansacResult {
        transform,
        inliers,
        hypothesis,
    })
}
