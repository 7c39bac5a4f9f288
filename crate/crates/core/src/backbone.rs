//! Keypoint extraction and per-keypoint features.
//!
//! A lightweight stand-in for a convolutional point backbone. The cloud is
//! voxelised twice on nested grids anchored at its bounding-box minimum: fine
//! voxels of size `v` and, by default, coarse voxels of size `4v` whose
//! centroids are the keypoints. Features are built in two stages:
//!
//! * stage A: for every fine point, an MLP over offsets to fine
//!   neighbours within `ρ/2`, max-pooled;
//! * stage B: for every keypoint, an MLP over `[offset, stage A feature]` of
//!   fine points within `ρ`, pooled by max and mean, followed by a
//!   pointwise MLP.
//!
//! Only relative offsets enter the features, so they are unchanged by
//! translating the cloud. Neighbourhoods are the `k` nearest points inside the
//! radius with ties broken by index.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud, SpatialGrid};
use crate::params::{Bound, ParamStore};
use crate::synth::{voxel_subsample_from, SubsampleResult};
use crate::tensor::{Float, Graph, PoolKind, Tensor, Var};
use crate::xencoder::ModelConfig;

pub const MIN_KEYPOINTS: usize = 4;

/// Flattened neighbour lists of a set of query points.
#[derive(Debug, Clone)]
pub struct Neighborhoods {
    /// Neighbour indices of all queries, concatenated.
    pub indices: Arc<[usize]>,
    /// `(start, len)` of each query in `indices`.
    pub segments: Arc<[(usize, usize)]>,
    /// Row-aligned with `indices`: `(neighbour - query) / radius`.
    pub offsets: Vec<[f64; 3]>,
}

impl Neighborhoods {
    fn build(queries: &[Point3], points: &[Point3], k: usize, radius: f64) -> Self {
        let grid = SpatialGrid::with_cell_size(points, radius);
        let mut indices = Vec::new();
        let mut segments = Vec::with_capacity(queries.len());
        let mut offsets = Vec::new();
        for q in queries {
            let start = indices.len();
            for (j, _) in grid.spread_within(q, k, radius) {
                indices.push(j);
                let o = (points[j] - q) / radius;
                offsets.push([o.x, o.y, o.z]);
            }
            segments.push((start, indices.len() - start));
        }
        Neighborhoods {
            indices: indices.into(),
            segments: segments.into(),
            offsets,
        }
    }

    fn offsets_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::from_fn(self.offsets.len(), 3, |r, c| T::of(self.offsets[r][c]))
    }
}

/// Parameter-free part of the backbone: voxelisation and neighbourhoods.
#[derive(Debug, Clone)]
pub struct BackboneGeometry {
    /// Keypoints fed to the encoder and their pooling lists over the input.
    pub keypoints: SubsampleResult,
    /// Points carrying stage A features.
    pub fine: PointCloud,
    pub stage_a: Neighborhoods,
    pub stage_b: Neighborhoods,
}

fn lower_corner(pc: &PointCloud) -> Point3 {
    pc.points()
        .iter()
        .fold(Point3::repeat(f64::INFINITY), |lo, p| lo.inf(p))
}

pub fn prepare(pc: &PointCloud, cfg: &ModelConfig) -> Result<BackboneGeometry> {
    pc.ensure_non_empty()?;
    let origin = lower_corner(pc);
    let keypoints = voxel_subsample_from(pc, cfg.final_voxel(), origin)?;
    if keypoints.len() < MIN_KEYPOINTS {
        return Err(Error::InputTooSparse(keypoints.len()));
    }
    let fine = if cfg.levels >= 2 {
        voxel_subsample_from(pc, cfg.voxel_size, origin)?.keypoints
    } else {
        pc.clone()
    };
    let rho = cfg.radius_factor * cfg.final_voxel();
    let stage_a = Neighborhoods::build(fine.points(), fine.points(), (cfg.max_neighbors / 2).max(2), rho / 2.0);
    let stage_b = Neighborhoods::build(keypoints.keypoints.points(), fine.points(), cfg.max_neighbors, rho);
    Ok(BackboneGeometry {
        keypoints,
        fine,
        stage_a,
        stage_b,
    })
}

pub fn init_backbone<T: Float>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
    let h = cfg.backbone_hidden;
    let ha = h / 2;
    let dd = cfg.feature_dim;
    store.insert_uniform("bb.a.w1", 3, ha, 1.0, rng)?;
    store.insert_zeros("bb.a.b1", 1, ha)?;
    store.insert_uniform("bb.a.w2", ha, ha, 1.0, rng)?;
    store.insert_zeros("bb.a.b2", 1, ha)?;
    store.insert_uniform("bb.b.w1", 3 + ha, h, 1.0, rng)?;
    store.insert_zeros("bb.b.b1", 1, h)?;
    store.insert_uniform("bb.b.w2", h, h, 1.0, rng)?;
    store.insert_zeros("bb.b.b2", 1, h)?;
    store.insert_uniform("bb.c.w1", 2 * h, dd, 1.0, rng)?;
    store.insert_zeros("bb.c.b1", 1, dd)?;
    store.insert_uniform("bb.c.w2", dd, dd, 1.0, rng)?;
    store.insert_zeros("bb.c.b2", 1, dd)?;
    store.insert_uniform("proj.w", dd, cfg.d, 1.0, rng)?;
    store.insert_zeros("proj.b", 1, cfg.d)
}

fn dense<T: Float>(g: &mut Graph<T>, x: Var, p: &Bound, w: &str, b: &str, relu: bool) -> Result<Var> {
    let y = g.matmul(x, p.var(w)?)?;
    let y = g.add_row(y, p.var(b)?)?;
    if relu {
        g.relu(y)
    } else {
        Ok(y)
    }
}

/// Per-keypoint features (`keypoints × feature_dim`).
pub fn features<T: Float>(g: &mut Graph<T>, geom: &BackboneGeometry, p: &Bound) -> Result<Var> {
    let off_a = g.constant(geom.stage_a.offsets_tensor());
    let h = dense(g, off_a, p, "bb.a.w1", "bb.a.b1", true)?;
    let h = dense(g, h, p, "bb.a.w2", "bb.a.b2", true)?;
    let f1 = g.segment_pool(h, geom.stage_a.segments.clone(), PoolKind::Max)?;

    let off_b = g.constant(geom.stage_b.offsets_tensor());
    let gathered = g.gather_rows(f1, geom.stage_b.indices.clone())?;
    let x = g.concat_cols(&[off_b, gathered])?;
    let h = dense(g, x, p, "bb.b.w1", "bb.b.b1", true)?;
    let h = dense(g, h, p, "bb.b.w2", "bb.b.b2", true)?;
    let mx = g.segment_pool(h, geom.stage_b.segments.clone(), PoolKind::Max)?;
    let mean = g.segment_pool(h, geom.stage_b.segments.clone(), PoolKind::Mean)?;
    let pooled = g.concat_cols(&[mx, mean])?;
    let h = dense(g, pooled, p, "bb.c.w1", "bb.c.b1", true)?;
    dense(g, h, p, "bb.c.w2", "bb.c.b2", false)
}

/// Keypoints with their backbone features.
#[derive(Debug, Clone)]
pub struct KeypointSet {
    pub keypoints: PointCloud,
    /// `keypoints × feature_dim`.
    pub features: Var,
    /// Input indices pooled into each keypoint.
    pub pooling_indices: Vec<Vec<usize>>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

pub fn extract_prepared<T: Float>(g: &mut Graph<T>, geom: &BackboneGeometry, p: &Bound) -> Result<KeypointSet> {
    Ok(KeypointSet {
        keypoints: geom.keypoints.keypoints.clone(),
        features: features(g, geom, p)?,
        pooling_indices: geom.keypoints.pooling_indices.clone(),
    })
}

pub fn extract<T: Float>(g: &mut Graph<T>, pc: &PointCloud, cfg: &ModelConfig, p: &Bound) -> Result<KeypointSet> {
    extract_prepared(g, &prepare(pc, cfg)?, p)
}

/// Single linear layer `f W + b` mapping backbone features to width `d`.
pub fn project_features<T: Float>(g: &mut Graph<T>, f: Var, p: &Bound) -> Result<Var> {
    dense(g, f, p, "proj.w", "proj.b", false)
}
