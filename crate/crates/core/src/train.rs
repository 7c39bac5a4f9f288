//! Training: AdamW with decoupled weight decay, global-norm gradient
//! clipping, a step learning-rate schedule and the epoch loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::RigidTransform;
use crate::losses::LossAblation;
use crate::model::{pair_loss, LossValues, Model, PreparedPair};
use crate::params::ParamStore;
use crate::synth::{augment_pair_with, AugmentConfig, PairSample};
use crate::tensor::{Float, Graph, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// The learning rate halves every this many epochs; 0 keeps it constant.
    pub lr_halving_period: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Re-draw a scene-style augmentation of every pair each epoch.
    pub augment: bool,
    pub loss_ablation: LossAblation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            grad_clip: 0.1,
            batch_size: 2,
            epochs: 100,
            lr_halving_period: 20,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            augment: false,
            loss_ablation: LossAblation::Full,
        }
    }
}

impl TrainConfig {
    /// Schedule for desk-scale runs of a few hundred pairs.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 200,
            lr_halving_period: 80,
            augment: true,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_halving_period == 0 {
            return self.lr;
        }
        self.lr * 0.5f64.powi((epoch / self.lr_halving_period) as i32)
    }
}

/// First and second moment estimates of every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One AdamW update: `p ← p − lr·(m̂/(√v̂+ε) + wd·p)`.
pub fn adamw_step<T: Float>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (name, g) in params.names().iter().zip(grads) {
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one, eps, wd, lr_t) = (T::one(), T::of(cfg.adam_eps), T::of(cfg.weight_decay), T::of(lr));
    let (bc1, bc2) = (T::of(bc1), T::of(bc2));
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = &grads[i];
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, pk) in p.data_mut().iter_mut().enumerate() {
            let gk = g.data()[k];
            m[k] = b1 * m[k] + (one - b1) * gk;
            v[k] = b2 * v[k] + (one - b2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *pk -= lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * *pk);
        }
    }
    Ok(())
}

pub fn global_norm<T: Float>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients by `max_norm/‖g‖₂` when the global norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients<T: Float>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub loss: LossValues,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,loss_total,loss_c,loss_o,loss_f,lr";

pub fn loss_csv(curve: &[EpochStats]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for e in curve {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            e.epoch, e.loss.total, e.loss.correspondence, e.loss.overlap, e.loss.feature, e.lr
        );
    }
    s
}

pub fn write_loss_csv(path: &Path, curve: &[EpochStats]) -> Result<()> {
    fs::write(path, loss_csv(curve)).map_err(|e| Error::io(path, e))
}

/// Seed of the augmentation drawn for `pair` in `epoch`.
pub fn pair_seed(seed: u64, epoch: usize, pair: usize) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (pair as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Job {
    prepared: PreparedPair,
    gt: RigidTransform,
}

fn make_job(pair: &PairSample, model_cfg: &crate::xencoder::ModelConfig, aug: Option<u64>) -> Result<Job> {
    match aug {
        None => Ok(Job {
            prepared: PreparedPair::new(&pair.source, &pair.target, model_cfg)?,
            gt: pair.gt_transform.clone(),
        }),
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = augment_pair_with(pair.clone(), &AugmentConfig::default(), &mut rng);
            Ok(Job {
                prepared: PreparedPair::new(&a.source, &a.target, model_cfg)?,
                gt: a.gt_transform,
            })
        }
    }
}

/// Loss and parameter gradients of one pair.
fn pair_gradients<T: Float>(
    model: &Model<T>,
    job: &Job,
    ablation: LossAblation,
) -> Result<(LossValues, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    g.set_check_finite(false);
    let p = model.params().bind(&mut g, true);
    let loss = pair_loss(&mut g, &job.prepared, &job.gt, model.config(), ablation, &p)?;
    let values = LossValues::read(&g, &loss);
    let grads = g.backward(loss.total)?;
    Ok((values, p.gradients(model.params(), &grads)))
}

/// Trains `model` in place on `pairs` and returns the loss curve.
///
/// Pair order is reshuffled every epoch from `cfg.seed`. Gradients of a
/// batch are computed in parallel but summed in batch order, so the result
/// does not depend on the number of threads. `on_epoch` sees every epoch's
/// statistics as soon as they are known.
pub fn train<T: Float>(
    model: &mut Model<T>,
    pairs: &[PairSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &Model<T>),
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let model_cfg = model.config().clone();
    let cached: Option<Vec<Job>> = if cfg.augment {
        None
    } else {
        Some(
            pairs
                .par_iter()
                .map(|p| make_job(p, &model_cfg, None))
                .collect::<Result<_>>()?,
        )
    };
    let mut state = AdamState::new(model.params());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossValues::default();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<(LossValues, Vec<Tensor<T>>)>> = {
                let m: &Model<T> = model;
                batch
                    .par_iter()
                    .map(|&i| match &cached {
                        Some(jobs) => pair_gradients(m, &jobs[i], cfg.loss_ablation),
                        None => {
                            let job = make_job(&pairs[i], &model_cfg, Some(pair_seed(cfg.seed, epoch, i)))?;
                            pair_gradients(m, &job, cfg.loss_ablation)
                        }
                    })
                    .collect()
            };
            let diagnostic = || {
                let seeds: Vec<String> = batch
                    .iter()
                    .map(|&i| format!("pair {i} seed {}", pair_seed(cfg.seed, epoch, i)))
                    .collect();
                format!("epoch {}, batch {b} ({})", epoch + 1, seeds.join(", "))
            };
            let mut total: Option<Vec<Tensor<T>>> = None;
            for r in results {
                let (values, grads) = match r {
                    Ok(v) => v,
                    Err(Error::NonFinite(what)) => {
                        return Err(Error::NonFinite(format!("{what} at {}", diagnostic())));
                    }
                    Err(e) => return Err(e),
                };
                if !values.total.is_finite() {
                    return Err(Error::NonFinite(format!("loss at {}", diagnostic())));
                }
                sum.total += values.total;
                sum.correspondence += values.correspondence;
                sum.overlap += values.overlap;
                sum.feature += values.feature;
                total = Some(match total {
                    None => grads,
                    Some(mut acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += *y;
                            }
                        }
                        acc
                    }
                });
            }
            let mut grads = total.expect("non-empty batch");
            let inv = T::of(1.0 / batch.len() as f64);
            for g in grads.iter_mut() {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            clip_gradients(&mut grads, cfg.grad_clip);
            adamw_step(model.params_mut(), &grads, &mut state, cfg, lr).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at {}", diagnostic())),
                e => e,
            })?;
        }
        let n = pairs.len() as f64;
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: LossValues {
                total: sum.total / n,
                correspondence: sum.correspondence / n,
                overlap: sum.overlap / n,
                feature: sum.feature / n,
            },
            lr,
        };
        log::info!(
            "epoch {} loss {:.4} (c {:.4} o {:.4} f {:.4}) lr {:e}",
            stats.epoch,
            stats.loss.total,
            stats.loss.correspondence,
            stats.loss.overlap,
            stats.loss.feature,
            lr
        );
        on_epoch(&stats, model);
        curve.push(stats);
    }
    Ok(curve)
}
