//! Output heads: corresponding coordinates and overlap scores.

use rand::Rng;

use crate::error::Result;
use crate::geom::PointCloud;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Float, Graph, Tensor, Var};
use crate::xencoder::{attention, mlp2, DecoderKind, ModelConfig};

pub fn init_heads<T: Float>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
    let d = cfg.d;
    match cfg.decoder {
        DecoderKind::Regress => {
            store.insert_uniform("head.reg.w1", d, cfg.head_hidden, 1.0, rng)?;
            store.insert_zeros("head.reg.b1", 1, cfg.head_hidden)?;
            store.insert_uniform("head.reg.w2", cfg.head_hidden, 3, 1.0, rng)?;
            store.insert_zeros("head.reg.b2", 1, 3)?;
        }
        DecoderKind::Weighted => {
            store.insert_uniform("head.att.wq", d, d, 1.0, rng)?;
            store.insert_uniform("head.att.wk", d, d, 1.0, rng)?;
        }
    }
    store.insert_uniform("head.ovl.w", d, 1, 1.0, rng)?;
    store.insert_zeros("head.ovl.b", 1, 1)
}

/// Predicted partner coordinates and overlap scores for one cloud's keypoints.
#[derive(Debug, Clone, Copy)]
pub struct PredictionSet {
    /// `n × 3`, in the other cloud's frame.
    pub coords: Var,
    /// `n × 1`, in `(0, 1)`.
    pub overlap: Var,
}

/// Two-layer MLP regressing coordinates: `relu(F W1 + b1) W2 + b2`.
pub fn decode_regress<T: Float>(g: &mut Graph<T>, f: Var, p: &Bound) -> Result<Var> {
    mlp2(
        g,
        f,
        p.var("head.reg.w1")?,
        p.var("head.reg.b1")?,
        p.var("head.reg.w2")?,
        p.var("head.reg.b2")?,
    )
}

/// Single-head attention whose values are the other cloud's keypoint
/// coordinates, so every output is a convex combination of them.
pub fn decode_weighted<T: Float>(g: &mut Graph<T>, fx: Var, fy: Var, y_coords: Var, p: &Bound) -> Result<Var> {
    let q = g.matmul(fx, p.var("head.att.wq")?)?;
    let k = g.matmul(fy, p.var("head.att.wk")?)?;
    attention(g, q, k, y_coords, None)
}

/// `sigmoid(F w + b)`.
pub fn decode_overlap<T: Float>(g: &mut Graph<T>, f: Var, p: &Bound) -> Result<Var> {
    let z = g.matmul(f, p.var("head.ovl.w")?)?;
    let z = g.add_row(z, p.var("head.ovl.b")?)?;
    g.sigmoid(z)
}

pub fn coords_tensor<T: Float>(pc: &PointCloud) -> Tensor<T> {
    Tensor::from_fn(pc.len(), 3, |r, c| T::of(pc.get(r)[c]))
}

/// Runs the configured decoder and the overlap head for both directions.
#[allow(clippy::too_many_arguments)]
pub fn predict<T: Float>(
    g: &mut Graph<T>,
    fx: Var,
    fy: Var,
    x_coords: Var,
    y_coords: Var,
    decoder: DecoderKind,
    p: &Bound,
) -> Result<(PredictionSet, PredictionSet)> {
    let (cx, cy) = match decoder {
        DecoderKind::Regress => (decode_regress(g, fx, p)?, decode_regress(g, fy, p)?),
        DecoderKind::Weighted => (
            decode_weighted(g, fx, fy, y_coords, p)?,
            decode_weighted(g, fy, fx, x_coords, p)?,
        ),
    };
    let ox = decode_overlap(g, fx, p)?;
    let oy = decode_overlap(g, fy, p)?;
    Ok((
        PredictionSet { coords: cx, overlap: ox },
        PredictionSet { coords: cy, overlap: oy },
    ))
}
