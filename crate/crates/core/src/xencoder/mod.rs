//! Transformer cross-encoder over the keypoint features of two clouds.
//!
//! Every layer runs self-attention, cross-attention and a position-wise FFN,
//! each as `x + sublayer(LayerNorm(x))`. Positional encodings are added to the
//! query, key and value inputs of both attention kinds. The two clouds share
//! one set of weights per layer and are updated simultaneously, so swapping
//! them swaps the outputs exactly.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::backbone::{project_features, KeypointSet};
use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::params::{Bound, ParamStore};
use crate::posenc::PositionalEncoding;
use crate::tensor::{Float, Graph, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Init scale applied to the last projection of every sub-layer.
pub const OUTPUT_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecoderKind {
    #[default]
    Regress,
    Weighted,
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderKind::Regress => "regress",
            DecoderKind::Weighted => "weighted",
        })
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regress" => Ok(DecoderKind::Regress),
            "weighted" => Ok(DecoderKind::Weighted),
            _ => Err(Error::Unknown {
                what: "decoder",
                name: s.to_string(),
            }),
        }
    }
}

/// Model hyperparameters, including the backbone and heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub lambda_o: f64,
    pub lambda_f: f64,
    /// Overlap label radius.
    pub overlap_radius: f64,
    pub decoder: DecoderKind,
    /// Hidden width of the coordinate regression MLP.
    pub head_hidden: usize,
    /// Coordinates are multiplied by this before the sinusoidal encoding.
    pub posenc_scale: f64,
    /// Fine voxel size of the backbone.
    pub voxel_size: f64,
    /// 1 keeps fine voxels as keypoints, 2 adds a coarser level.
    pub levels: usize,
    pub coarse_factor: f64,
    /// Neighbourhood radius in units of the final voxel size.
    pub radius_factor: f64,
    pub max_neighbors: usize,
    /// Backbone output width.
    pub feature_dim: usize,
    pub backbone_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 256,
            heads: 8,
            layers: 6,
            ffn_hidden: 1024,
            lambda_o: 1.0,
            lambda_f: 0.1,
            overlap_radius: 0.075,
            decoder: DecoderKind::Regress,
            head_hidden: 256,
            posenc_scale: 1.0,
            voxel_size: 0.05,
            levels: 2,
            coarse_factor: 4.0,
            radius_factor: 2.0,
            max_neighbors: 32,
            feature_dim: 96,
            backbone_hidden: 64,
        }
    }
}

impl ModelConfig {
    /// Small configuration that trains in minutes on one core.
    pub fn desk() -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            layers: 2,
            ffn_hidden: 128,
            head_hidden: 64,
            decoder: DecoderKind::Weighted,
            max_neighbors: 16,
            backbone_hidden: 32,
            ..ModelConfig::default()
        }
    }

    pub fn d_head(&self) -> usize {
        self.d / self.heads
    }

    /// Voxel size of the keypoints fed to the encoder (`m`).
    pub fn final_voxel(&self) -> f64 {
        if self.levels >= 2 {
            self.voxel_size * self.coarse_factor
        } else {
            self.voxel_size
        }
    }

    pub fn positive_margin(&self) -> f64 {
        self.final_voxel()
    }

    pub fn negative_margin(&self) -> f64 {
        2.0 * self.final_voxel()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        if self.d < 6 {
            return bad(format!("d = {} is too small for the positional encoding", self.d));
        }
        if self.ffn_hidden == 0 || self.head_hidden == 0 || self.feature_dim == 0 || self.backbone_hidden < 2 {
            return bad("layer widths must be positive".into());
        }
        if !(self.lambda_o >= 0.0 && self.lambda_f >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        for (name, v) in [
            ("overlap_radius", self.overlap_radius),
            ("voxel_size", self.voxel_size),
            ("posenc_scale", self.posenc_scale),
            ("radius_factor", self.radius_factor),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(1..=2).contains(&self.levels) {
            return bad(format!("levels must be 1 or 2, got {}", self.levels));
        }
        if self.levels == 2 && !(self.coarse_factor >= 1.0) {
            return bad(format!("coarse_factor must be >= 1, got {}", self.coarse_factor));
        }
        if self.max_neighbors < 2 {
            return bad("max_neighbors must be at least 2".into());
        }
        Ok(())
    }
}

pub(crate) fn layer_name(l: usize, part: &str) -> String {
    format!("enc.{l}.{part}")
}

/// Adds the weights of one attention block: per-head projections stored side
/// by side as `d × d` matrices and the output projection.
fn init_attention<T: Float>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut impl Rng) -> Result<()> {
    store.insert_uniform(format!("{prefix}.wq"), d, d, 1.0, rng)?;
    store.insert_uniform(format!("{prefix}.wk"), d, d, 1.0, rng)?;
    store.insert_uniform(format!("{prefix}.wv"), d, d, 1.0, rng)?;
    store.insert_uniform(format!("{prefix}.wo"), d, d, OUTPUT_INIT_SCALE, rng)
}

fn init_layer_norm<T: Float>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<()> {
    store.insert_full(format!("{prefix}.g"), 1, d, 1.0)?;
    store.insert_zeros(format!("{prefix}.b"), 1, d)
}

pub fn init_encoder<T: Float>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
    let d = cfg.d;
    for l in 0..cfg.layers {
        init_layer_norm(store, &layer_name(l, "ln1"), d)?;
        init_attention(store, &layer_name(l, "sa"), d, rng)?;
        init_layer_norm(store, &layer_name(l, "ln2"), d)?;
        init_attention(store, &layer_name(l, "ca"), d, rng)?;
        init_layer_norm(store, &layer_name(l, "ln3"), d)?;
        store.insert_uniform(layer_name(l, "ffn.w1"), d, cfg.ffn_hidden, 1.0, rng)?;
        store.insert_zeros(layer_name(l, "ffn.b1"), 1, cfg.ffn_hidden)?;
        store.insert_uniform(layer_name(l, "ffn.w2"), cfg.ffn_hidden, d, OUTPUT_INIT_SCALE, rng)?;
        store.insert_zeros(layer_name(l, "ffn.b2"), 1, d)?;
    }
    Ok(())
}

/// Names of the last projection of every sub-layer.
pub fn output_projection_names(cfg: &ModelConfig) -> Vec<String> {
    (0..cfg.layers)
        .flat_map(|l| {
            [
                layer_name(l, "sa.wo"),
                layer_name(l, "ca.wo"),
                layer_name(l, "ffn.w2"),
                layer_name(l, "ffn.b2"),
            ]
        })
        .collect()
}

/// Weights of one multi-head attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn bind(p: &Bound, prefix: &str, heads: usize) -> Result<Self> {
        Ok(AttentionWeights {
            wq: p.var(&format!("{prefix}.wq"))?,
            wk: p.var(&format!("{prefix}.wk"))?,
            wv: p.var(&format!("{prefix}.wv"))?,
            wo: p.var(&format!("{prefix}.wo"))?,
            heads,
        })
    }
}

/// Single-head scaled dot-product attention `softmax(q kᵀ/√dk) v`. The
/// attention matrix is pushed to `trace` when given.
pub fn attention<T: Float>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    trace: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let dk = g.value(q).cols();
    let scores = g.matmul_nt(q, k)?;
    let scaled = g.scale(scores, T::of(1.0 / (dk as f64).sqrt()))?;
    let weights = g.softmax(scaled)?;
    if let Some(t) = trace {
        t.push(weights);
    }
    g.matmul(weights, v)
}

/// Multi-head attention: per head `softmax(Q W_h^Q (K W_h^K)ᵀ/√d_head) V W_h^V`,
/// heads concatenated and projected by `W^O`.
pub fn mh_attention<T: Float>(
    g: &mut Graph<T>,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    w: &AttentionWeights,
    mut trace: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let d = g.value(w.wq).cols();
    if d % w.heads != 0 {
        return Err(Error::invalid(format!("width {d} not divisible by {} heads", w.heads)));
    }
    let dh = d / w.heads;
    let q = g.matmul(q_in, w.wq)?;
    let k = g.matmul(k_in, w.wk)?;
    let v = g.matmul(v_in, w.wv)?;
    let mut outs = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        outs.push(attention(g, qh, kh, vh, trace.as_deref_mut())?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    g.matmul(cat, w.wo)
}

/// LayerNorm with learned gain and bias.
pub fn layer_norm<T: Float>(g: &mut Graph<T>, x: Var, p: &Bound, prefix: &str) -> Result<Var> {
    let n = g.layer_norm(x, T::of(LAYER_NORM_EPS))?;
    let scaled = g.mul_row(n, p.var(&format!("{prefix}.g"))?)?;
    g.add_row(scaled, p.var(&format!("{prefix}.b"))?)
}

/// `relu(x W1 + b1) W2 + b2`.
pub fn mlp2<T: Float>(g: &mut Graph<T>, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h)?;
    let o = g.matmul(h, w2)?;
    g.add_row(o, b2)
}

/// Attention matrices recorded during a forward pass, in call order.
pub type AttentionTrace = Vec<Var>;

/// One cross-encoder layer applied to both clouds.
#[allow(clippy::too_many_arguments)]
pub fn cross_encoder_layer<T: Float>(
    g: &mut Graph<T>,
    fx: Var,
    fy: Var,
    pos_x: Var,
    pos_y: Var,
    p: &Bound,
    l: usize,
    heads: usize,
    mut trace: Option<&mut AttentionTrace>,
) -> Result<(Var, Var)> {
    for (f, pos) in [(fx, pos_x), (fy, pos_y)] {
        let (a, b) = (g.value(f).shape(), g.value(pos).shape());
        if a != b {
            return Err(Error::ShapeMismatch {
                op: "positional encoding",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    let sa = AttentionWeights::bind(p, &layer_name(l, "sa"), heads)?;
    let ca = AttentionWeights::bind(p, &layer_name(l, "ca"), heads)?;

    let self_attend = |g: &mut Graph<T>, f: Var, pos: Var, tr: Option<&mut AttentionTrace>| -> Result<Var> {
        let n = layer_norm(g, f, p, &layer_name(l, "ln1"))?;
        let qkv = g.add(n, pos)?;
        let upd = mh_attention(g, qkv, qkv, qkv, &sa, tr)?;
        g.add(f, upd)
    };
    let x1 = self_attend(g, fx, pos_x, trace.as_deref_mut())?;
    let y1 = self_attend(g, fy, pos_y, trace.as_deref_mut())?;

    let ln2 = layer_name(l, "ln2");
    let nx = layer_norm(g, x1, p, &ln2)?;
    let nx = g.add(nx, pos_x)?;
    let ny = layer_norm(g, y1, p, &ln2)?;
    let ny = g.add(ny, pos_y)?;
    let ux = mh_attention(g, nx, ny, ny, &ca, trace.as_deref_mut())?;
    let uy = mh_attention(g, ny, nx, nx, &ca, trace.as_deref_mut())?;
    let x2 = g.add(x1, ux)?;
    let y2 = g.add(y1, uy)?;

    let ffn = |g: &mut Graph<T>, f: Var| -> Result<Var> {
        let n = layer_norm(g, f, p, &layer_name(l, "ln3"))?;
        let upd = mlp2(
            g,
            n,
            p.var(&layer_name(l, "ffn.w1"))?,
            p.var(&layer_name(l, "ffn.b1"))?,
            p.var(&layer_name(l, "ffn.w2"))?,
            p.var(&layer_name(l, "ffn.b2"))?,
        )?;
        g.add(f, upd)
    };
    let x3 = ffn(g, x2)?;
    let y3 = ffn(g, y2)?;
    Ok((x3, y3))
}

/// Conditioned features after every layer; the last entry is the output.
/// With zero layers the single entry is the input.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub per_layer: Vec<(Var, Var)>,
}

impl Encoded {
    pub fn last(&self) -> (Var, Var) {
        *self.per_layer.last().expect("at least the input")
    }
}

/// Runs the layer stack on already projected features.
#[allow(clippy::too_many_arguments)]
pub fn encode_projected<T: Float>(
    g: &mut Graph<T>,
    fx: Var,
    fy: Var,
    pos_x: Var,
    pos_y: Var,
    cfg: &ModelConfig,
    p: &Bound,
    mut trace: Option<&mut AttentionTrace>,
) -> Result<Encoded> {
    let mut per_layer = vec![(fx, fy)];
    let (mut x, mut y) = (fx, fy);
    for l in 0..cfg.layers {
        (x, y) = cross_encoder_layer(g, x, y, pos_x, pos_y, p, l, cfg.heads, trace.as_deref_mut())?;
        per_layer.push((x, y));
    }
    if cfg.layers > 0 {
        per_layer.remove(0);
    }
    Ok(Encoded { per_layer })
}

/// Positional encodings of a keypoint cloud as a graph constant.
pub fn positions<T: Float>(g: &mut Graph<T>, pc: &PointCloud, cfg: &ModelConfig) -> Result<Var> {
    let pe = PositionalEncoding::with_scale(cfg.d, cfg.posenc_scale)?;
    Ok(g.constant(pe.encode_all(pc.points())))
}

/// Projects backbone features to width `d` and runs the layer stack with the
/// keypoints' positional encodings.
pub fn encode<T: Float>(
    g: &mut Graph<T>,
    kx: &KeypointSet,
    ky: &KeypointSet,
    cfg: &ModelConfig,
    p: &Bound,
    trace: Option<&mut AttentionTrace>,
) -> Result<Encoded> {
    let fx = project_features(g, kx.features, p)?;
    let fy = project_features(g, ky.features, p)?;
    let pos_x = positions(g, &kx.keypoints, cfg)?;
    let pos_y = positions(g, &ky.keypoints, cfg)?;
    encode_projected(g, fx, fy, pos_x, pos_y, cfg, p, trace)
}

#[cfg(test)]
mod tests;
