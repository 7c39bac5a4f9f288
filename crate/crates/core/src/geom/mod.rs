//! Point clouds, rigid transforms and the distance metrics built on them.
//!
//! Everything here works in `f64`. Nearest-neighbour queries go through a
//! uniform-grid spatial hash ([`SpatialGrid`]); the exhaustive scans in
//! [`brute`] stay around as reference implementations.

pub mod io;
mod nn;
mod svd;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

pub use nn::SpatialGrid;
pub use svd::{svd3, Svd3};

pub type Point3 = Vector3<f64>;

/// Tolerance for the orthonormality and determinant checks on rotations.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// An ordered list of finite 3D points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinitePoint(i));
        }
        Ok(Self { points })
    }

    pub fn from_arrays(points: &[[f64; 3]]) -> Result<Self> {
        Self::new(points.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect())
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, i: usize) -> Point3 {
        self.points[i]
    }

    pub(crate) fn ensure_non_empty(&self) -> Result<()> {
        if self.points.is_empty() {
            Err(Error::EmptyCloud)
        } else {
            Ok(())
        }
    }

    pub fn centroid(&self) -> Result<Point3> {
        self.ensure_non_empty()?;
        let sum: Point3 = self.points.iter().sum();
        Ok(sum / self.points.len() as f64)
    }

    /// Returns a cloud holding the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn translated(&self, offset: &Point3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| p + offset).collect(),
        }
    }
}

/// A proper rigid motion `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    /// Validates that `rotation` lies in SO(3) within [`ROTATION_TOLERANCE`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        Self::with_tolerance(rotation, translation, ROTATION_TOLERANCE)
    }

    pub fn with_tolerance(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        tol: f64,
    ) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("rigid transform has non-finite entries"));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > tol || (det - 1.0).abs() > tol {
            return Err(Error::invalid(format!(
                "rotation not in SO(3): |RtR - I| = {ortho:e}, det = {det}"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation of `angle` radians about `axis` (normalised internally), via Rodrigues.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        Self {
            rotation: axis_angle_matrix(axis, angle),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply_point(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn apply(&self, pc: &PointCloud) -> PointCloud {
        PointCloud {
            points: pc.points.iter().map(|p| self.apply_point(p)).collect(),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// The 12 values `R` row-major followed by `t`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[0],
            t[1],
            t[2],
        ]
    }

    pub fn from_row_major(v: &[f64; 12]) -> Result<Self> {
        let r = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
        // Text round-trips can lose the last bit or two.
        Self::with_tolerance(r, Vector3::new(v[9], v[10], v[11]), 1e-6)
    }
}

pub(crate) fn axis_angle_matrix(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let n = axis.norm();
    if n == 0.0 || angle == 0.0 {
        return Matrix3::identity();
    }
    let k = axis / n;
    let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

/// A weighted pair `source_point ↔ target_point`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source_point: Point3,
    pub target_point: Point3,
    pub weight: f64,
}

impl Correspondence {
    pub fn new(source_point: Point3, target_point: Point3, weight: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::invalid(format!("correspondence weight {weight} outside [0,1]")));
        }
        Ok(Self {
            source_point,
            target_point,
            weight,
        })
    }
}

/// Index and Euclidean distance of the point of `pc` nearest to `query`.
/// Ties resolve to the lowest index.
pub fn nearest_neighbor(query: &Point3, pc: &PointCloud) -> Result<(usize, f64)> {
    pc.ensure_non_empty()?;
    let grid = SpatialGrid::build(pc.points());
    Ok(grid.nearest(query))
}

/// How the two directed terms of the Chamfer distance are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChamferMode {
    /// `mean_a d² + mean_b d²`
    #[default]
    SumOfMeans,
    /// `(mean_a d² + mean_b d²) / 2`
    MeanOfMeans,
}

pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    chamfer_distance_with(a, b, ChamferMode::SumOfMeans)
}

/// Chamfer distance over squared nearest-neighbour distances.
pub fn chamfer_distance_with(a: &PointCloud, b: &PointCloud, mode: ChamferMode) -> Result<f64> {
    a.ensure_non_empty()?;
    b.ensure_non_empty()?;
    let directed = |from: &PointCloud, to: &PointCloud| {
        let grid = SpatialGrid::build(to.points());
        from.points()
            .iter()
            .map(|p| {
                let (_, d) = grid.nearest(p);
                d * d
            })
            .sum::<f64>()
            / from.len() as f64
    };
    let total = directed(a, b) + directed(b, a);
    Ok(match mode {
        ChamferMode::SumOfMeans => total,
        ChamferMode::MeanOfMeans => total / 2.0,
    })
}

/// Geodesic angle between the two rotations, in degrees.
///
/// With `Q = R_estᵀ R_gt`, `sin θ` comes from the skew part `‖Q - Qᵀ‖ / 2√2`
/// and `cos θ` from `(tr Q - 1) / 2`; `atan2` of the two keeps full precision
/// near zero, where `acos` alone loses half the digits.
pub fn rotation_error(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    let m = est.rotation.transpose() * gt.rotation;
    let sin = (m - m.transpose()).norm() / (2.0 * std::f64::consts::SQRT_2);
    let cos = (m.trace() - 1.0) / 2.0;
    sin.atan2(cos).to_degrees()
}

pub fn translation_error(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    (est.translation - gt.translation).norm()
}

/// Exhaustive reference implementations of the accelerated queries.
pub mod brute {
    use super::*;

    pub fn nearest_neighbor(query: &Point3, points: &[Point3]) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d2 = (p - query).norm_squared();
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        (best.0, best.1.sqrt())
    }

    pub fn chamfer_sum_of_means(a: &[Point3], b: &[Point3]) -> f64 {
        let directed = |from: &[Point3], to: &[Point3]| {
            let mut total = 0.0;
            for p in from {
                let mut best = f64::INFINITY;
                for q in to {
                    best = best.min((p - q).norm_squared());
                }
                total += best;
            }
            total / from.len() as f64
        };
        directed(a, b) + directed(b, a)
    }
}
