//! The full network: backbone, cross-encoder and heads, plus its training
//! objective and inference path.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{extract_prepared, init_backbone, prepare, BackboneGeometry, KeypointSet};
use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud, RigidTransform};
use crate::heads::{coords_tensor, init_heads, predict, PredictionSet};
use crate::losses::{
    circle_loss, correspondence_loss, infonce_loss, init_feature_loss, overlap_loss, pair_overlap_labels,
    symmetric_weight, total_loss, CircleParams, LossAblation, LossComponents, OverlapLabels,
};
use crate::params::{Bound, ParamStore};
use crate::solver::PointPredictions;
use crate::tensor::{Float, Graph, Tensor, Var};
use crate::xencoder::{encode, init_encoder, AttentionTrace, ModelConfig};

/// Configuration and weights of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    cfg: ModelConfig,
    params: ParamStore<T>,
}

fn init_params<T: Float>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_backbone(&mut store, cfg, &mut rng)?;
    init_encoder(&mut store, cfg, &mut rng)?;
    init_heads(&mut store, cfg, &mut rng)?;
    init_feature_loss(&mut store, cfg.d, &mut rng)?;
    Ok(store)
}

impl<T: Float> Model<T> {
    /// Fresh weights drawn from `seed`.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg, seed)?;
        Ok(Model { cfg, params })
    }

    /// Pairs loaded weights with a configuration, checking that every tensor
    /// the configuration needs is present with the right shape.
    pub fn from_parts(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let expect = init_params::<T>(&cfg, 0)?;
        if expect.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "configuration needs {} tensors, checkpoint has {}",
                expect.len(),
                params.len()
            )));
        }
        for ((name, want), (got_name, got)) in expect.iter().zip(params.iter()) {
            if name != got_name || want.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {got_name} {:?} does not match configuration ({name} {:?})",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(Model { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }

    /// Runs the network on a pair and returns the per-keypoint predictions
    /// of the last layer with stage timings.
    pub fn infer(&self, source: &PointCloud, target: &PointCloud) -> Result<Inference> {
        let t0 = Instant::now();
        let pair = PreparedPair::new(source, target, &self.cfg)?;
        let t1 = Instant::now();
        let mut g = Graph::new();
        g.set_check_finite(false);
        let p = self.params.bind(&mut g, false);
        let fwd = forward(&mut g, &pair, &self.cfg, &p, false, None)?;
        let out = fwd.last();
        let read = |v: Var| to_f64(g.value(v));
        let inference = Inference {
            keypoints_x: fwd.kx.keypoints.clone(),
            keypoints_y: fwd.ky.keypoints.clone(),
            pred_xy: predictions(&read(out.pred_x.coords), &read(out.pred_x.overlap))?,
            pred_yx: predictions(&read(out.pred_y.coords), &read(out.pred_y.overlap))?,
            features_x: read(out.fx),
            features_y: read(out.fy),
            preprocess_ms: ms(t1 - t0),
            feature_ms: ms(t1.elapsed()),
        };
        Ok(inference)
    }
}

fn ms(d: std::time::Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn to_f64<T: Float>(t: &Tensor<T>) -> Tensor<f64> {
    t.cast()
}

fn predictions(coords: &Tensor<f64>, scores: &Tensor<f64>) -> Result<PointPredictions> {
    let coords: Vec<Point3> = (0..coords.rows())
        .map(|r| Point3::new(coords.get(r, 0), coords.get(r, 1), coords.get(r, 2)))
        .collect();
    if coords.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("predicted coordinates".into()));
    }
    Ok(PointPredictions {
        coords,
        scores: scores.data().to_vec(),
    })
}

/// Network outputs for one pair, as plain numbers.
#[derive(Debug, Clone)]
pub struct Inference {
    pub keypoints_x: PointCloud,
    pub keypoints_y: PointCloud,
    /// Source keypoints' predicted positions in the target frame.
    pub pred_xy: PointPredictions,
    /// Target keypoints' predicted positions in the source frame.
    pub pred_yx: PointPredictions,
    /// Conditioned features of the last layer.
    pub features_x: Tensor<f64>,
    pub features_y: Tensor<f64>,
    pub preprocess_ms: f64,
    pub feature_ms: f64,
}

/// Parameter-free preprocessing of both clouds of a pair.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub geom_x: BackboneGeometry,
    pub geom_y: BackboneGeometry,
}

impl PreparedPair {
    pub fn new(source: &PointCloud, target: &PointCloud, cfg: &ModelConfig) -> Result<Self> {
        Ok(PreparedPair {
            source: source.clone(),
            target: target.clone(),
            geom_x: prepare(source, cfg)?,
            geom_y: prepare(target, cfg)?,
        })
    }

    /// Overlap labels of both clouds under the ground truth.
    pub fn labels(&self, gt: &RigidTransform, radius: f64) -> Result<(OverlapLabels, OverlapLabels)> {
        pair_overlap_labels(
            &self.source,
            &self.target,
            gt,
            &self.geom_x.keypoints.pooling_indices,
            &self.geom_y.keypoints.pooling_indices,
            radius,
        )
    }
}

/// Conditioned features and head outputs after one encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    pub fx: Var,
    pub fy: Var,
    pub pred_x: PredictionSet,
    pub pred_y: PredictionSet,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub kx: KeypointSet,
    pub ky: KeypointSet,
    /// Head outputs of every layer when requested, otherwise of the last
    /// layer only.
    pub outputs: Vec<LayerOutput>,
}

impl ForwardPass {
    pub fn last(&self) -> LayerOutput {
        *self.outputs.last().expect("at least one output")
    }
}

/// Backbone, encoder and heads on a prepared pair. With `all_layers` the
/// heads run on the output of every encoder layer.
pub fn forward<T: Float>(
    g: &mut Graph<T>,
    pair: &PreparedPair,
    cfg: &ModelConfig,
    p: &Bound,
    all_layers: bool,
    trace: Option<&mut AttentionTrace>,
) -> Result<ForwardPass> {
    let kx = extract_prepared(g, &pair.geom_x, p)?;
    let ky = extract_prepared(g, &pair.geom_y, p)?;
    let encoded = encode(g, &kx, &ky, cfg, p, trace)?;
    let x_coords = g.constant(coords_tensor(&kx.keypoints));
    let y_coords = g.constant(coords_tensor(&ky.keypoints));
    let layers: Vec<(Var, Var)> = if all_layers {
        encoded.per_layer.clone()
    } else {
        vec![encoded.last()]
    };
    let mut outputs = Vec::with_capacity(layers.len());
    for (fx, fy) in layers {
        let (pred_x, pred_y) = predict(g, fx, fy, x_coords, y_coords, cfg.decoder, p)?;
        outputs.push(LayerOutput { fx, fy, pred_x, pred_y });
    }
    Ok(ForwardPass { kx, ky, outputs })
}

/// Loss terms of one pair.
#[derive(Debug, Clone, Copy)]
pub struct PairLoss {
    pub total: Var,
    pub components: LossComponents,
}

/// Scalar loss values, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub correspondence: f64,
    pub overlap: f64,
    pub feature: f64,
}

impl LossValues {
    pub fn read<T: Float>(g: &Graph<T>, loss: &PairLoss) -> Self {
        let v = |x: Var| g.value(x).item().as_f64();
        LossValues {
            total: v(loss.total),
            correspondence: v(loss.components.correspondence),
            overlap: v(loss.components.overlap),
            feature: v(loss.components.feature),
        }
    }
}

/// Loss terms of one layer's outputs.
#[allow(clippy::too_many_arguments)]
fn layer_loss<T: Float>(
    g: &mut Graph<T>,
    out: &LayerOutput,
    fwd: &ForwardPass,
    gt: &RigidTransform,
    labels: &(OverlapLabels, OverlapLabels),
    cfg: &ModelConfig,
    ablation: LossAblation,
    p: &Bound,
) -> Result<LossComponents> {
    let (kx, ky) = (&fwd.kx.keypoints, &fwd.ky.keypoints);
    let inv = gt.inverse();
    let cx = correspondence_loss(g, out.pred_x.coords, kx, gt, &labels.0.keypoint)?;
    let cy = correspondence_loss(g, out.pred_y.coords, ky, &inv, &labels.1.keypoint)?;
    let ox = overlap_loss(g, out.pred_x.overlap, &labels.0.keypoint)?;
    let oy = overlap_loss(g, out.pred_y.overlap, &labels.1.keypoint)?;
    let (r_p, r_n) = (cfg.positive_margin(), cfg.negative_margin());
    let feature = match ablation {
        LossAblation::NoFeat => g.constant(Tensor::scalar(T::zero())),
        LossAblation::Circle => circle_loss(g, out.fx, out.fy, kx, ky, gt, r_p, r_n, &CircleParams::default())?,
        LossAblation::Full | LossAblation::AllLayers => {
            let w = symmetric_weight(g, p.var("loss.uf")?)?;
            infonce_loss(g, out.fx, out.fy, kx, ky, gt, w, r_p, r_n)?
        }
    };
    Ok(LossComponents {
        correspondence: g.add(cx, cy)?,
        overlap: g.add(ox, oy)?,
        feature,
    })
}

/// Forward pass and training loss of one pair. The all-layers ablation sums
/// the loss terms over every encoder layer; otherwise only the last layer is
/// supervised.
pub fn pair_loss<T: Float>(
    g: &mut Graph<T>,
    pair: &PreparedPair,
    gt: &RigidTransform,
    cfg: &ModelConfig,
    ablation: LossAblation,
    p: &Bound,
) -> Result<PairLoss> {
    let labels = pair.labels(gt, cfg.overlap_radius)?;
    let fwd = forward(g, pair, cfg, p, ablation == LossAblation::AllLayers, None)?;
    let mut sum: Option<LossComponents> = None;
    for out in &fwd.outputs {
        let c = layer_loss(g, out, &fwd, gt, &labels, cfg, ablation, p)?;
        sum = Some(match sum {
            None => c,
            Some(s) => LossComponents {
                correspondence: g.add(s.correspondence, c.correspondence)?,
                overlap: g.add(s.overlap, c.overlap)?,
                feature: g.add(s.feature, c.feature)?,
            },
        });
    }
    let components = sum.expect("at least one output");
    let total = total_loss(g, &components, cfg.lambda_o, cfg.lambda_f)?;
    Ok(PairLoss { total, components })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_shape, make_modelnet_style_pair, PairConfig, ShapeKind};
    use crate::tensor::grad_check;
    use crate::xencoder::DecoderKind;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d: 12,
            heads: 2,
            layers: 1,
            ffn_hidden: 8,
            head_hidden: 8,
            feature_dim: 8,
            backbone_hidden: 6,
            max_neighbors: 6,
            ..ModelConfig::default()
        }
    }

    fn pair(seed: u64, n: usize) -> (PointCloud, PointCloud, RigidTransform) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = generate_shape(ShapeKind::SphereCap, 512, &mut rng).unwrap();
        let cfg = PairConfig {
            num_points: n,
            ..PairConfig::default()
        };
        let s = make_modelnet_style_pair(&shape, 0.7, &cfg, &mut rng).unwrap();
        (s.source, s.target, s.gt_transform)
    }

    #[test]
    fn from_parts_rejects_mismatched_weights() {
        let cfg = tiny_cfg();
        let m = Model::<f32>::init(cfg.clone(), 1).unwrap();
        assert!(Model::from_parts(cfg.clone(), m.params().clone()).is_ok());
        let other = ModelConfig { d: 16, ..cfg.clone() };
        assert!(matches!(Model::from_parts(other, m.params().clone()), Err(Error::Checkpoint(_))));
        let weighted = ModelConfig {
            decoder: DecoderKind::Weighted,
            ..cfg
        };
        assert!(Model::from_parts(weighted, m.params().clone()).is_err());
    }

    #[test]
    fn inference_shapes_and_scores() {
        let (src, tgt, _) = pair(3, 300);
        let m = Model::<f32>::init(tiny_cfg(), 2).unwrap();
        let inf = m.infer(&src, &tgt).unwrap();
        assert_eq!(inf.pred_xy.coords.len(), inf.keypoints_x.len());
        assert_eq!(inf.pred_yx.coords.len(), inf.keypoints_y.len());
        assert_eq!(inf.features_x.shape(), [inf.keypoints_x.len(), 12]);
        assert!(inf.pred_xy.scores.iter().chain(&inf.pred_yx.scores).all(|s| *s > 0.0 && *s < 1.0));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::<f32>::init(tiny_cfg(), 9).unwrap();
        let b = Model::<f32>::init(tiny_cfg(), 9).unwrap();
        let c = Model::<f32>::init(tiny_cfg(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn all_layer_supervision_adds_terms() {
        let (src, tgt, gt) = pair(4, 300);
        let cfg = ModelConfig {
            layers: 2,
            ..tiny_cfg()
        };
        let m = Model::<f64>::init(cfg.clone(), 5).unwrap();
        let prepared = PreparedPair::new(&src, &tgt, &cfg).unwrap();
        let value = |ablation| {
            let mut g = Graph::new();
            let p = m.params().bind(&mut g, false);
            let l = pair_loss(&mut g, &prepared, &gt, &cfg, ablation, &p).unwrap();
            LossValues::read(&g, &l)
        };
        let full = value(LossAblation::Full);
        let all = value(LossAblation::AllLayers);
        let no_feat = value(LossAblation::NoFeat);
        assert!(all.correspondence > full.correspondence);
        assert_eq!(no_feat.feature, 0.0);
        assert_eq!(no_feat.correspondence, full.correspondence);
        let expect = full.correspondence + cfg.lambda_o * full.overlap + cfg.lambda_f * full.feature;
        assert!((full.total - expect).abs() < 1e-12);
    }

    #[test]
    fn end_to_end_loss_gradients_match_finite_differences() {
        let (src, tgt, gt) = pair(6, 160);
        let cfg = ModelConfig {
            voxel_size: 0.1,
            ..tiny_cfg()
        };
        let m = Model::<f64>::init(cfg.clone(), 7).unwrap();
        let prepared = PreparedPair::new(&src, &tgt, &cfg).unwrap();
        // Only the small tensors: the check perturbs every element.
        let names = ["head.ovl.w", "head.reg.w2", "proj.b", "enc.0.ln2.g", "enc.0.ca.wo"];
        let inputs: Vec<Tensor<f64>> = names.iter().map(|n| m.params().get(n).unwrap().clone()).collect();
        let report = grad_check(
            |g, v| {
                let mut p = m.params().bind(g, false);
                for (name, var) in names.iter().zip(v) {
                    p = p.replaced(name, *var)?;
                }
                Ok(pair_loss(g, &prepared, &gt, &cfg, LossAblation::Full, &p)?.total)
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
