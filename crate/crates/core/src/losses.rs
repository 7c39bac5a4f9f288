//! Overlap labels and the training losses.

use std::fmt;
use std::sync::Arc;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud, RigidTransform, SpatialGrid};
use crate::params::ParamStore;
use crate::tensor::{Float, Graph, Tensor, Var};

pub const BCE_CLAMP: f64 = 1e-7;

/// Dense and keypoint overlap labels of one cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapLabels {
    /// 1 where the transformed point has a neighbour in the other cloud
    /// closer than the overlap radius.
    pub dense: Vec<f64>,
    /// Mean of the dense labels pooled into each keypoint.
    pub keypoint: Vec<f64>,
}

/// Labels for `points` against `other` after moving `points` by `transform`.
pub fn overlap_labels(
    points: &PointCloud,
    other: &PointCloud,
    transform: &RigidTransform,
    pooling: &[Vec<usize>],
    radius: f64,
) -> Result<OverlapLabels> {
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("overlap radius must be positive, got {radius}")));
    }
    other.ensure_non_empty()?;
    let grid = SpatialGrid::build(other.points());
    let dense: Vec<f64> = points
        .points()
        .iter()
        .map(|p| {
            if grid.nearest(&transform.apply_point(p)).1 < radius {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let keypoint = pooling
        .iter()
        .map(|ids| {
            if ids.is_empty() {
                return Err(Error::invalid("empty pooling list"));
            }
            Ok(ids.iter().map(|&i| dense[i]).sum::<f64>() / ids.len() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OverlapLabels { dense, keypoint })
}

/// Labels for both clouds of a pair: source against target under `gt`, target
/// against source under its inverse.
pub fn pair_overlap_labels(
    source: &PointCloud,
    target: &PointCloud,
    gt: &RigidTransform,
    source_pooling: &[Vec<usize>],
    target_pooling: &[Vec<usize>],
    radius: f64,
) -> Result<(OverlapLabels, OverlapLabels)> {
    Ok((
        overlap_labels(source, target, gt, source_pooling, radius)?,
        overlap_labels(target, source, &gt.inverse(), target_pooling, radius)?,
    ))
}

pub(crate) fn column<T: Float>(values: &[f64]) -> Tensor<T> {
    Tensor::from_fn(values.len(), 1, |r, _| T::of(values[r]))
}

/// Mean binary cross-entropy of `pred` (`n×1`) against soft labels, with
/// predictions clamped to `[1e-7, 1 - 1e-7]`.
pub fn overlap_loss<T: Float>(g: &mut Graph<T>, pred: Var, labels: &[f64]) -> Result<Var> {
    let shape = g.value(pred).shape();
    if shape != [labels.len(), 1] {
        return Err(Error::ShapeMismatch {
            op: "overlap_loss",
            lhs: shape.to_vec(),
            rhs: vec![labels.len(), 1],
        });
    }
    let c = g.clamp(pred, T::of(BCE_CLAMP), T::of(1.0 - BCE_CLAMP))?;
    let log_p = g.log(c)?;
    let neg = g.scale(c, T::of(-1.0))?;
    let one_minus = g.add_scalar(neg, T::one())?;
    let log_q = g.log(one_minus)?;
    let o = g.constant(column(labels));
    let not_o = g.constant(column(&labels.iter().map(|v| 1.0 - v).collect::<Vec<_>>()));
    let a = g.mul(o, log_p)?;
    let b = g.mul(not_o, log_q)?;
    let s = g.add(a, b)?;
    let m = g.mean(s)?;
    g.scale(m, T::of(-1.0))
}

fn zero<T: Float>(g: &mut Graph<T>) -> Var {
    g.constant(Tensor::scalar(T::zero()))
}

/// `Σ o_i |T(x_i) - ŷ_i|₁ / Σ o_i` for one direction.
pub fn correspondence_loss<T: Float>(
    g: &mut Graph<T>,
    pred: Var,
    keypoints: &PointCloud,
    transform: &RigidTransform,
    labels: &[f64],
) -> Result<Var> {
    let shape = g.value(pred).shape();
    if shape != [keypoints.len(), 3] || labels.len() != keypoints.len() {
        return Err(Error::ShapeMismatch {
            op: "correspondence_loss",
            lhs: shape.to_vec(),
            rhs: vec![keypoints.len(), labels.len()],
        });
    }
    let total: f64 = labels.iter().sum();
    if total <= 0.0 {
        log::warn!("correspondence loss: no keypoint has a positive overlap label");
        return Ok(zero(g));
    }
    let target = g.constant(Tensor::from_fn(keypoints.len(), 3, |r, c| {
        T::of(transform.apply_point(&keypoints.get(r))[c])
    }));
    let diff = g.sub(pred, target)?;
    let l1 = g.abs(diff)?;
    let w = g.constant(Tensor::from_fn(keypoints.len(), 3, |r, _| T::of(labels[r] / total)));
    let weighted = g.mul(l1, w)?;
    g.sum(weighted)
}

/// Upper-triangular parameterisation of the bilinear similarity matrix.
pub fn init_feature_loss<T: Float>(store: &mut ParamStore<T>, d: usize, rng: &mut impl Rng) -> Result<()> {
    let bound = 1.0 / (d as f64).sqrt();
    let u = Tensor::from_fn(d, d, |r, c| {
        let v = rng.gen_range(-bound..=bound);
        if c >= r {
            T::of(v)
        } else {
            T::zero()
        }
    });
    store.insert("loss.uf", u)
}

/// `W = U + Uᵀ` with `U` the upper triangle of `uf`.
pub fn symmetric_weight<T: Float>(g: &mut Graph<T>, uf: Var) -> Result<Var> {
    let d = g.value(uf).rows();
    let mask = g.constant(Tensor::from_fn(d, d, |r, c| if c >= r { T::one() } else { T::zero() }));
    let u = g.mul(uf, mask)?;
    let ut = g.transpose(u)?;
    g.add(u, ut)
}

/// Positive and negative sets of one InfoNCE direction.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastSets {
    /// Anchor rows with a positive match.
    pub anchors: Vec<usize>,
    /// Positive column of each anchor.
    pub positives: Vec<usize>,
    /// Row-major `anchors × others` mask of the columns entering the
    /// denominator: the positive and every column farther than `r_n`.
    pub mask: Vec<bool>,
}

/// Anchors are keypoints whose nearest transformed partner lies within `r_p`.
pub fn contrast_sets(
    anchors: &PointCloud,
    others: &PointCloud,
    transform: &RigidTransform,
    r_p: f64,
    r_n: f64,
) -> ContrastSets {
    let grid = SpatialGrid::build(others.points());
    let mut sets = ContrastSets {
        anchors: Vec::new(),
        positives: Vec::new(),
        mask: Vec::new(),
    };
    for (i, p) in anchors.points().iter().enumerate() {
        let q: Point3 = transform.apply_point(p);
        let (j, dist) = grid.nearest(&q);
        if dist > r_p {
            continue;
        }
        sets.anchors.push(i);
        sets.positives.push(j);
        sets.mask
            .extend(others.points().iter().enumerate().map(|(c, y)| c == j || (y - q).norm() > r_n));
    }
    sets
}

/// One direction of the InfoNCE loss with the log-bilinear score
/// `f̄_xᵀ W f̄_c`, averaged over anchors.
pub fn infonce_direction<T: Float>(
    g: &mut Graph<T>,
    fa: Var,
    fb: Var,
    w: Var,
    sets: &ContrastSets,
) -> Result<Option<Var>> {
    if sets.anchors.is_empty() {
        return Ok(None);
    }
    let n = g.value(fb).rows();
    let rows = g.gather_rows(fa, sets.anchors.as_slice().into())?;
    let proj = g.matmul(rows, w)?;
    let scores = g.matmul_nt(proj, fb)?;
    let lse = g.logsumexp_rows(scores, Some(Arc::from(sets.mask.as_slice())))?;
    let a = sets.anchors.len();
    let onehot = g.constant(Tensor::from_fn(a, n, |r, c| {
        if sets.positives[r] == c {
            T::one()
        } else {
            T::zero()
        }
    }));
    let picked = g.mul(scores, onehot)?;
    let ones = g.constant(Tensor::full(n, 1, T::one()));
    let pos = g.matmul(picked, ones)?;
    let per_anchor = g.sub(lse, pos)?;
    Ok(Some(g.mean(per_anchor)?))
}

/// Symmetric InfoNCE loss: source anchors against target keypoints plus the
/// reverse. A direction without anchors contributes 0 with a warning.
#[allow(clippy::too_many_arguments)]
pub fn infonce_loss<T: Float>(
    g: &mut Graph<T>,
    fx: Var,
    fy: Var,
    kx: &PointCloud,
    ky: &PointCloud,
    gt: &RigidTransform,
    w: Var,
    r_p: f64,
    r_n: f64,
) -> Result<Var> {
    if !(r_p < r_n) {
        return Err(Error::invalid(format!("positive margin {r_p} must be below negative margin {r_n}")));
    }
    let sx = contrast_sets(kx, ky, gt, r_p, r_n);
    let sy = contrast_sets(ky, kx, &gt.inverse(), r_p, r_n);
    let a = infonce_direction(g, fx, fy, w, &sx)?;
    let b = infonce_direction(g, fy, fx, w, &sy)?;
    match (a, b) {
        (Some(a), Some(b)) => g.add(a, b),
        (Some(v), None) | (None, Some(v)) => Ok(v),
        (None, None) => {
            log::warn!("feature loss: no keypoint has a positive match");
            Ok(zero(g))
        }
    }
}

/// Circle loss settings: margins, optima and scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleParams {
    pub pos_margin: f64,
    pub neg_margin: f64,
    pub pos_optimal: f64,
    pub neg_optimal: f64,
    pub log_scale: f64,
    /// Treat the adaptive pair weights as constants during backprop.
    pub detach_weights: bool,
}

impl Default for CircleParams {
    fn default() -> Self {
        CircleParams {
            pos_margin: 0.1,
            neg_margin: 1.4,
            pos_optimal: 0.1,
            neg_optimal: 1.4,
            log_scale: 24.0,
            detach_weights: true,
        }
    }
}

fn circle_direction<T: Float>(
    g: &mut Graph<T>,
    na: Var,
    nb: Var,
    anchors: &PointCloud,
    others: &PointCloud,
    transform: &RigidTransform,
    r_p: f64,
    r_n: f64,
    cp: &CircleParams,
) -> Result<Option<Var>> {
    let mut rows = Vec::new();
    let mut pos_mask = Vec::new();
    let mut neg_mask = Vec::new();
    for (i, p) in anchors.points().iter().enumerate() {
        let q = transform.apply_point(p);
        let d: Vec<f64> = others.points().iter().map(|y| (y - q).norm()).collect();
        let pos: Vec<bool> = d.iter().map(|&v| v < r_p).collect();
        let neg: Vec<bool> = d.iter().map(|&v| v > r_n).collect();
        if pos.iter().any(|&b| b) && neg.iter().any(|&b| b) {
            rows.push(i);
            pos_mask.extend(pos);
            neg_mask.extend(neg);
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let a = g.gather_rows(na, rows.as_slice().into())?;
    let sim = g.matmul_nt(a, nb)?;
    let sq = g.scale(sim, T::of(-2.0))?;
    let sq = g.add_scalar(sq, T::of(2.0))?;
    let sq = g.clamp(sq, T::of(1e-12), T::of(4.0))?;
    let dist = g.sqrt(sq)?;
    let (alpha_p, alpha_n) = if cp.detach_weights {
        let dv = g.value(dist).clone();
        let gamma = T::of(cp.log_scale);
        let ap = dv.map(|v| (v - T::of(cp.pos_optimal)).max(T::zero()) * gamma);
        let an = dv.map(|v| (T::of(cp.neg_optimal) - v).max(T::zero()) * gamma);
        (g.constant(ap), g.constant(an))
    } else {
        let ap = g.add_scalar(dist, T::of(-cp.pos_optimal))?;
        let ap = g.relu(ap)?;
        let ap = g.scale(ap, T::of(cp.log_scale))?;
        let an = g.scale(dist, T::of(-1.0))?;
        let an = g.add_scalar(an, T::of(cp.neg_optimal))?;
        let an = g.relu(an)?;
        let an = g.scale(an, T::of(cp.log_scale))?;
        (ap, an)
    };
    let shifted_p = g.add_scalar(dist, T::of(-cp.pos_margin))?;
    let logit_p = g.mul(shifted_p, alpha_p)?;
    let flipped = g.scale(dist, T::of(-1.0))?;
    let shifted_n = g.add_scalar(flipped, T::of(cp.neg_margin))?;
    let logit_n = g.mul(shifted_n, alpha_n)?;
    let lp = g.logsumexp_rows(logit_p, Some(Arc::from(pos_mask.as_slice())))?;
    let ln = g.logsumexp_rows(logit_n, Some(Arc::from(neg_mask.as_slice())))?;
    let s = g.add(lp, ln)?;
    let sp = g.softplus(s)?;
    let m = g.mean(sp)?;
    Ok(Some(g.scale(m, T::of(1.0 / cp.log_scale))?))
}

/// Circle loss on L2-normalised features, used as a replacement for the
/// InfoNCE term in ablations.
#[allow(clippy::too_many_arguments)]
pub fn circle_loss<T: Float>(
    g: &mut Graph<T>,
    fx: Var,
    fy: Var,
    kx: &PointCloud,
    ky: &PointCloud,
    gt: &RigidTransform,
    r_p: f64,
    r_n: f64,
    cp: &CircleParams,
) -> Result<Var> {
    let nx = g.normalize_rows(fx, T::of(1e-8))?;
    let ny = g.normalize_rows(fy, T::of(1e-8))?;
    let a = circle_direction(g, nx, ny, kx, ky, gt, r_p, r_n, cp)?;
    let b = circle_direction(g, ny, nx, ky, kx, &gt.inverse(), r_p, r_n, cp)?;
    match (a, b) {
        (Some(a), Some(b)) => g.add(a, b),
        (Some(v), None) | (None, Some(v)) => Ok(v),
        (None, None) => {
            log::warn!("circle loss: no anchor has both positives and negatives");
            Ok(zero(g))
        }
    }
}

/// The three loss terms of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossComponents {
    pub correspondence: Var,
    pub overlap: Var,
    pub feature: Var,
}

/// Selects the feature term and where supervision is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossAblation {
    #[default]
    Full,
    NoFeat,
    Circle,
    AllLayers,
}

impl fmt::Display for LossAblation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossAblation::Full => "full",
            LossAblation::NoFeat => "no-feat",
            LossAblation::Circle => "circle",
            LossAblation::AllLayers => "all-layers",
        })
    }
}

impl FromStr for LossAblation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(LossAblation::Full),
            "no-feat" => Ok(LossAblation::NoFeat),
            "circle" => Ok(LossAblation::Circle),
            "all-layers" => Ok(LossAblation::AllLayers),
            _ => Err(Error::Unknown {
                what: "loss ablation",
                name: s.to_string(),
            }),
        }
    }
}

/// `L_c + λ_o L_o + λ_f L_f`. Fails on a non-finite component, naming it.
pub fn total_loss<T: Float>(g: &mut Graph<T>, c: &LossComponents, lambda_o: f64, lambda_f: f64) -> Result<Var> {
    for (name, v) in [
        ("correspondence", c.correspondence),
        ("overlap", c.overlap),
        ("feature", c.feature),
    ] {
        if !g.value(v).all_finite() {
            return Err(Error::NonFinite(format!("{name} loss")));
        }
    }
    let o = g.scale(c.overlap, T::of(lambda_o))?;
    let f = g.scale(c.feature, T::of(lambda_f))?;
    let s = g.add(c.correspondence, o)?;
    g.add(s, f)
}

#[cfg(test)]
mod tests;
