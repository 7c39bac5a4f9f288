//! Synthetic registration pairs, data augmentation and voxel-grid subsampling.

mod dataset;
mod shapes;

pub use dataset::{
    manifest_string, pair_id, parse_manifest, read_manifest, write_manifest, Dataset, ManifestEntry,
    StoredPair, MANIFEST_NAME,
};
pub use shapes::{generate_shape, generate_shape_named, ShapeKind, MIN_SHAPE_POINTS};

use std::collections::{BTreeMap, HashSet};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, UnitSphere};

use crate::error::{Error, Result};
use crate::geom::{SpatialGrid, Point3, PointCloud, RigidTransform};

/// A source/target pair with its ground-truth alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub source: PointCloud,
    pub target: PointCloud,
    /// Maps source coordinates into the target frame.
    pub gt_transform: RigidTransform,
    pub overlap_fraction: f64,
    /// Noise-free source-frame positions of source points that also exist in
    /// the target crop. Their exact partners are `gt_transform` applied to them.
    pub clean_overlap: Option<PointCloud>,
}

impl PairSample {
    /// Exact (source, target) correspondences when the pair was generated here.
    pub fn clean_correspondences(&self) -> Option<Vec<(Point3, Point3)>> {
        self.clean_overlap.as_ref().map(|c| {
            c.points()
                .iter()
                .map(|p| (*p, self.gt_transform.apply_point(p)))
                .collect()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsampleResult {
    pub keypoints: PointCloud,
    /// Dense indices pooled into each keypoint, ascending.
    pub pooling_indices: Vec<Vec<usize>>,
    /// Integer grid cell of each keypoint.
    pub voxels: Vec<[i64; 3]>,
    pub voxel_size: f64,
    /// Corner of cell `[0, 0, 0]`.
    pub origin: Point3,
}

impl SubsampleResult {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn voxel_center(&self, i: usize) -> Point3 {
        let [x, y, z] = self.voxels[i];
        self.origin + Point3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5) * self.voxel_size
    }
}

pub fn voxel_key(p: &Point3, voxel_size: f64) -> [i64; 3] {
    [
        (p.x / voxel_size).floor() as i64,
        (p.y / voxel_size).floor() as i64,
        (p.z / voxel_size).floor() as i64,
    ]
}

/// One keypoint per occupied cell of a grid anchored at the origin, placed at
/// the centroid of the cell's points. Keypoints are ordered by cell key, so the
/// keypoint set and its order do not depend on input order.
pub fn voxel_subsample(pc: &PointCloud, voxel_size: f64) -> Result<SubsampleResult> {
    voxel_subsample_from(pc, voxel_size, Point3::zeros())
}

/// Like [`voxel_subsample`] with the grid anchored at `origin`.
pub fn voxel_subsample_from(pc: &PointCloud, voxel_size: f64, origin: Point3) -> Result<SubsampleResult> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(Error::invalid(format!("voxel size must be positive, got {voxel_size}")));
    }
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in pc.points().iter().enumerate() {
        cells.entry(voxel_key(&(p - origin), voxel_size)).or_default().push(i);
    }
    let mut keypoints = Vec::with_capacity(cells.len());
    let mut pooling_indices = Vec::with_capacity(cells.len());
    let mut voxels = Vec::with_capacity(cells.len());
    for (key, members) in cells {
        let sum: Point3 = members.iter().map(|&i| pc.get(i)).sum();
        keypoints.push(sum / members.len() as f64);
        pooling_indices.push(members);
        voxels.push(key);
    }
    Ok(SubsampleResult {
        keypoints: PointCloud::new(keypoints)?,
        pooling_indices,
        voxels,
        voxel_size,
        origin,
    })
}

/// Result of cutting a cloud with a plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub cloud: PointCloud,
    /// Indices of kept points in the input, ascending.
    pub indices: Vec<usize>,
    /// Kept points satisfy `normal · p >= offset`.
    pub normal: Vector3<f64>,
    pub offset: f64,
}

/// Number of points kept for fraction `p` of `m` points, i.e. `⌈p·m⌉` with
/// round-off in `p·m` ignored.
pub fn kept_count(p: f64, m: usize) -> usize {
    let x = p * m as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (k as usize).min(m)
}

/// Keeps the `⌈p·M⌉` points farthest along a random direction.
pub fn halfspace_crop(pc: &PointCloud, p: f64, rng: &mut impl Rng) -> Result<Crop> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("keep fraction must be in (0, 1], got {p}")));
    }
    pc.ensure_non_empty()?;
    let n: [f64; 3] = UnitSphere.sample(rng);
    let normal = Vector3::from(n);
    let dist: Vec<f64> = pc.points().iter().map(|q| normal.dot(q)).collect();
    let mut order: Vec<usize> = (0..pc.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let k = kept_count(p, pc.len());
    let offset = if k < pc.len() {
        0.5 * (dist[order[k - 1]] + dist[order[k]])
    } else {
        dist[order[k - 1]]
    };
    let mut indices = order[..k].to_vec();
    indices.sort_unstable();
    Ok(Crop {
        cloud: pc.select(&indices),
        indices,
        normal,
        offset,
    })
}

/// Uniform selection of `count` indices out of `0..n` without replacement,
/// in random order. Keeps all `n` (shuffled) when `n <= count`.
pub fn resample_indices(n: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n <= count {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(rng);
        all
    } else {
        rand::seq::index::sample(rng, n, count).into_vec()
    }
}

pub const MIN_CROP_POINTS: usize = 32;

/// Parameters of object-centric pair generation.
#[derive(Debug, Clone, PartialEq)]
pub struct PairConfig {
    pub max_rotation_deg: f64,
    /// Per-axis translation bound.
    pub max_translation: f64,
    pub noise_sigma: f64,
    /// Points per cloud after resampling.
    pub num_points: usize,
    /// Radius used for the overlap fraction.
    pub overlap_radius: f64,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            max_rotation_deg: 45.0,
            max_translation: 0.5,
            noise_sigma: 0.05,
            num_points: 717,
            overlap_radius: 0.05,
        }
    }
}

fn random_rotation_axis(rng: &mut impl Rng) -> Vector3<f64> {
    let a: [f64; 3] = UnitSphere.sample(rng);
    Vector3::from(a)
}

fn jitter(points: &mut [Point3], sigma: f64, rng: &mut impl Rng) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for p in points {
        *p += Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
    }
}

/// Two independent partial crops of `shape`; the target crop is moved by a
/// random rigid motion. Both clouds get Gaussian jitter and are resampled.
pub fn make_modelnet_style_pair(
    shape: &PointCloud,
    p: f64,
    cfg: &PairConfig,
    rng: &mut impl Rng,
) -> Result<PairSample> {
    let src_crop = halfspace_crop(shape, p, rng)?;
    let tgt_crop = halfspace_crop(shape, p, rng)?;
    for crop in [&src_crop, &tgt_crop] {
        if crop.indices.len() < MIN_CROP_POINTS {
            return Err(Error::invalid(format!(
                "crop keeps {} points, need at least {MIN_CROP_POINTS}",
                crop.indices.len()
            )));
        }
    }

    let axis = random_rotation_axis(rng);
    let angle = rng.gen_range(0.0..=cfg.max_rotation_deg.to_radians());
    let t = cfg.max_translation;
    let translation = if t > 0.0 {
        Vector3::new(rng.gen_range(-t..=t), rng.gen_range(-t..=t), rng.gen_range(-t..=t))
    } else {
        Vector3::zeros()
    };
    let gt = RigidTransform::from_axis_angle(&axis, angle, translation);

    let src_pick = resample_indices(src_crop.indices.len(), cfg.num_points, rng);
    let tgt_pick = resample_indices(tgt_crop.indices.len(), cfg.num_points, rng);
    let src_ids: Vec<usize> = src_pick.iter().map(|&i| src_crop.indices[i]).collect();
    let tgt_ids: Vec<usize> = tgt_pick.iter().map(|&i| tgt_crop.indices[i]).collect();

    let clean_source = shape.select(&src_ids);
    let in_target: HashSet<usize> = tgt_crop.indices.iter().copied().collect();
    let shared: Vec<usize> = src_ids.iter().copied().filter(|i| in_target.contains(i)).collect();
    let clean_overlap = PointCloud::new(shape.select(&shared).into_points())?;

    // Overlap measured on noise-free geometry against the full target crop, in
    // the source frame where gt is the identity.
    let grid = SpatialGrid::build(tgt_crop.cloud.points());
    let close = clean_source
        .points()
        .iter()
        .filter(|q| grid.nearest(q).1 < cfg.overlap_radius)
        .count();
    let overlap_fraction = close as f64 / clean_source.len() as f64;

    let mut source = clean_source.into_points();
    let mut target: Vec<Point3> = tgt_ids.iter().map(|&i| gt.apply_point(&shape.get(i))).collect();
    jitter(&mut source, cfg.noise_sigma, rng);
    jitter(&mut target, cfg.noise_sigma, rng);

    Ok(PairSample {
        source: PointCloud::new(source)?,
        target: PointCloud::new(target)?,
        gt_transform: gt,
        overlap_fraction,
        clean_overlap: Some(clean_overlap),
    })
}

/// Scene-pair augmentation: a Gaussian-magnitude rigid perturbation of the
/// source, point jitter on both clouds and optional shuffling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Standard deviation of the rotation angle in radians.
    pub rotation_sigma: f64,
    pub translation_sigma: f64,
    pub jitter_sigma: f64,
    pub shuffle: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_sigma: 0.1 * std::f64::consts::PI,
            translation_sigma: 0.1,
            jitter_sigma: 0.05,
            shuffle: true,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            rotation_sigma: 0.0,
            translation_sigma: 0.0,
            jitter_sigma: 0.0,
            shuffle: false,
        }
    }
}

/// Applies [`AugmentConfig::default`].
pub fn augment_scene_pair(pair: PairSample, rng: &mut impl Rng) -> PairSample {
    augment_pair_with(pair, &AugmentConfig::default(), rng)
}

/// The source is moved by a random `P`; the ground truth becomes `gt ∘ P⁻¹`.
pub fn augment_pair_with(pair: PairSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> PairSample {
    let axis = random_rotation_axis(rng);
    let angle = if cfg.rotation_sigma > 0.0 {
        cfg.rotation_sigma * rng.sample::<f64, _>(StandardNormal)
    } else {
        0.0
    };
    let mut translation = Vector3::zeros();
    if cfg.translation_sigma > 0.0 {
        for k in 0..3 {
            translation[k] = cfg.translation_sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let perturb = RigidTransform::from_axis_angle(&axis, angle, translation);
    let gt_transform = pair.gt_transform.compose(&perturb.inverse());

    let mut source: Vec<Point3> = pair.source.points().iter().map(|p| perturb.apply_point(p)).collect();
    let mut target = pair.target.into_points();
    jitter(&mut source, cfg.jitter_sigma, rng);
    jitter(&mut target, cfg.jitter_sigma, rng);
    if cfg.shuffle {
        source.shuffle(rng);
        target.shuffle(rng);
    }
    let clean_overlap = pair.clean_overlap.map(|c| perturb.apply(&c));
    PairSample {
        source: PointCloud::new(source).expect("rigid motion keeps points finite"),
        target: PointCloud::new(target).expect("jitter keeps points finite"),
        gt_transform,
        overlap_fraction: pair.overlap_fraction,
        clean_overlap,
    }
}

#[cfg(test)]
mod tests;
