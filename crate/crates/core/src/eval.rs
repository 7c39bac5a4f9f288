//! Registration metrics, registration recall, the oracle matcher and the
//! benchmark report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{EvalConfig, SolverKind};
use crate::error::{Error, Result};
use crate::geom::{chamfer_distance, rotation_error, translation_error, Point3, PointCloud, RigidTransform, SpatialGrid};
use crate::model::{Inference, Model};
use crate::solver::{assemble, ransac_estimate, weighted_kabsch, CorrespondenceBundle};
use crate::synth::{Dataset, PairSample};
use crate::tensor::Tensor;
use crate::train::pair_seed;

pub const REPORT_CSV_HEADER: &str = "pair_id,rre_deg,rte,chamfer,corr_rmse,success,t_pre_ms,t_feat_ms,t_pose_ms";

/// Metrics of one registered pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairResult {
    pub pair_id: String,
    pub rre_deg: f64,
    pub rte: f64,
    pub chamfer: f64,
    pub corr_rmse: f64,
    pub success: bool,
    pub t_pre_ms: f64,
    pub t_feat_ms: f64,
    pub t_pose_ms: f64,
}

/// Root mean square of `‖est(x) - y‖` over `(x, y)` pairs.
pub fn correspondence_rmse(est: &RigidTransform, pairs: &[(Point3, Point3)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("correspondence RMSE needs at least one pair"));
    }
    let sum: f64 = pairs.iter().map(|(x, y)| (est.apply_point(x) - y).norm_squared()).sum();
    Ok((sum / pairs.len() as f64).sqrt())
}

/// Exact correspondences of a generated pair, or, for pairs without clean
/// overlap points, each source point matched to its nearest target point
/// under `gt` when closer than `radius`.
pub fn ground_truth_correspondences(pair: &PairSample, radius: f64) -> Vec<(Point3, Point3)> {
    if let Some(c) = pair.clean_correspondences() {
        return c;
    }
    let grid = SpatialGrid::build(pair.target.points());
    pair.source
        .points()
        .iter()
        .filter_map(|x| {
            let (j, d) = grid.nearest(&pair.gt_transform.apply_point(x));
            (d < radius).then(|| (*x, pair.target.get(j)))
        })
        .collect()
}

/// Fraction of pairs with `corr_rmse < threshold`.
pub fn registration_recall(results: &[PairResult], threshold: f64) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::invalid("registration recall of an empty result list"));
    }
    let ok = results.iter().filter(|r| r.corr_rmse < threshold).count();
    Ok(ok as f64 / results.len() as f64)
}

/// Median, with the mean of the two middle values for even lengths.
/// NaN for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Nearest-rank percentile, `q` in `[0, 1]`. NaN for an empty slice.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let rank = (q * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Error distribution of the oracle matcher.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    /// Per source keypoint, distance from its transformed position to the
    /// nearest target keypoint.
    pub errors: Vec<f64>,
    pub median: f64,
    pub p95: f64,
}

/// Matches every source keypoint to the target keypoint nearest its
/// ground-truth position.
pub fn oracle_match(kx: &PointCloud, ky: &PointCloud, gt: &RigidTransform) -> Result<OracleReport> {
    kx.ensure_non_empty()?;
    ky.ensure_non_empty()?;
    let grid = SpatialGrid::build(ky.points());
    let errors: Vec<f64> = kx.points().iter().map(|x| grid.nearest(&gt.apply_point(x)).1).collect();
    Ok(OracleReport {
        median: median(&errors),
        p95: percentile(&errors, 0.95),
        errors,
    })
}

fn normalized_rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|r| {
            let row: Vec<f64> = (0..t.cols()).map(|c| t.get(r, c)).collect();
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter().map(|v| v / n).collect()
        })
        .collect()
}

fn best_match(query: &[f64], candidates: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, c) in candidates.iter().enumerate() {
        let s: f64 = query.iter().zip(c).map(|(a, b)| a * b).sum();
        if s > best.1 {
            best = (j, s);
        }
    }
    best.0
}

/// Putative correspondences from nearest neighbours in feature space, in
/// both directions, on L2-normalised features.
pub fn feature_matches(inf: &Inference) -> CorrespondenceBundle {
    let fx = normalized_rows(&inf.features_x);
    let fy = normalized_rows(&inf.features_y);
    let (kx, ky) = (inf.keypoints_x.points(), inf.keypoints_y.points());
    let mut source = Vec::with_capacity(kx.len() + ky.len());
    let mut target = Vec::with_capacity(kx.len() + ky.len());
    for (i, f) in fx.iter().enumerate() {
        source.push(kx[i]);
        target.push(ky[best_match(f, &fy)]);
    }
    for (j, f) in fy.iter().enumerate() {
        source.push(kx[best_match(f, &fx)]);
        target.push(ky[j]);
    }
    CorrespondenceBundle::uniform(source, target)
}

/// Pose from network outputs with the chosen solver.
pub fn estimate_pose(inf: &Inference, cfg: &EvalConfig, threshold: f64, seed: u64) -> Result<RigidTransform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match cfg.solver {
        SolverKind::Direct => {
            let bundle = assemble(&inf.keypoints_x, &inf.keypoints_y, &inf.pred_xy, &inf.pred_yx)?;
            weighted_kabsch(&bundle)
        }
        SolverKind::RegtrRansac => {
            let bundle = assemble(&inf.keypoints_x, &inf.keypoints_y, &inf.pred_xy, &inf.pred_yx)?;
            Ok(ransac_estimate(&bundle.source, &bundle.target, cfg.ransac_iterations, threshold, &mut rng)?.transform)
        }
        SolverKind::RansacBaseline => {
            let bundle = feature_matches(inf);
            Ok(ransac_estimate(&bundle.source, &bundle.target, cfg.ransac_iterations, threshold, &mut rng)?.transform)
        }
    }
}

/// Metrics of an estimated pose against the ground truth of `pair`.
pub fn score_pair(
    pair_id: &str,
    pair: &PairSample,
    est: &RigidTransform,
    success_threshold: f64,
    radius: f64,
) -> Result<PairResult> {
    let corr = ground_truth_correspondences(pair, radius);
    let corr_rmse = correspondence_rmse(est, &corr)?;
    Ok(PairResult {
        pair_id: pair_id.to_string(),
        rre_deg: rotation_error(est, &pair.gt_transform),
        rte: translation_error(est, &pair.gt_transform),
        chamfer: chamfer_distance(&est.apply(&pair.source), &pair.target)?,
        corr_rmse,
        success: corr_rmse < success_threshold,
        t_pre_ms: 0.0,
        t_feat_ms: 0.0,
        t_pose_ms: 0.0,
    })
}

/// Registers one pair. A solver that finds no pose leaves the identity in
/// place, which the metrics then score as it is.
pub fn evaluate_pair(
    model: &Model<f32>,
    pair_id: &str,
    pair: &PairSample,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<PairResult> {
    let mcfg = model.config();
    let inf = model.infer(&pair.source, &pair.target)?;
    let t0 = Instant::now();
    let est = match estimate_pose(&inf, cfg, cfg.threshold(mcfg), seed) {
        Ok(t) => t,
        Err(e @ (Error::NoConfidentCorrespondences | Error::Degenerate | Error::NoHypothesis)) => {
            log::warn!("{pair_id}: {e}, falling back to the identity");
            RigidTransform::identity()
        }
        Err(e) => return Err(e),
    };
    let t_pose_ms = t0.elapsed().as_secs_f64() * 1e3;
    let mut r = score_pair(pair_id, pair, &est, cfg.success_threshold, mcfg.overlap_radius)?;
    r.t_pre_ms = inf.preprocess_ms;
    r.t_feat_ms = inf.feature_ms;
    r.t_pose_ms = t_pose_ms;
    Ok(r)
}

/// Per-pair rows in manifest order plus the scene tag of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub solver: SolverKind,
    pub success_threshold: f64,
    pub rows: Vec<PairResult>,
    pub scenes: Vec<Option<String>>,
}

/// Evaluates every pair of `dataset`. Pairs run in parallel; each draws its
/// RANSAC seed from its manifest index, so the report does not depend on the
/// thread count. With `deterministic` the timings are written as zero.
pub fn benchmark(model: &Model<f32>, dataset: &Dataset, cfg: &EvalConfig, deterministic: bool) -> Result<Report> {
    if dataset.pairs.is_empty() {
        return Err(Error::invalid("dataset has no pairs"));
    }
    let rows = dataset
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, sp)| {
            let mut r = evaluate_pair(model, &sp.id, &sp.pair, cfg, pair_seed(cfg.seed, 0, i))?;
            if deterministic {
                r.t_pre_ms = 0.0;
                r.t_feat_ms = 0.0;
                r.t_pose_ms = 0.0;
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Report {
        solver: cfg.solver,
        success_threshold: cfg.success_threshold,
        rows,
        scenes: dataset.pairs.iter().map(|p| p.entry.scene.clone()).collect(),
    })
}

/// Aggregates over one set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub pairs: usize,
    pub successes: usize,
    pub recall: f64,
    /// Mean and median RRE/RTE over successful pairs only.
    pub rre_mean_success: f64,
    pub rre_median_success: f64,
    pub rte_mean_success: f64,
    pub rte_median_success: f64,
    /// Mean and median RRE/RTE over all pairs.
    pub rre_mean_all: f64,
    pub rre_median_all: f64,
    pub rte_mean_all: f64,
    pub rte_median_all: f64,
    pub chamfer_mean: f64,
    pub chamfer_median: f64,
    pub t_pre_ms_mean: f64,
    pub t_feat_ms_mean: f64,
    pub t_pose_ms_mean: f64,
}

pub fn summarize(rows: &[PairResult], threshold: f64) -> Result<Summary> {
    let recall = registration_recall(rows, threshold)?;
    let col = |f: fn(&PairResult) -> f64, only_success: bool| -> Vec<f64> {
        rows.iter()
            .filter(|r| !only_success || r.corr_rmse < threshold)
            .map(f)
            .collect()
    };
    let rre_s = col(|r| r.rre_deg, true);
    let rte_s = col(|r| r.rte, true);
    let rre = col(|r| r.rre_deg, false);
    let rte = col(|r| r.rte, false);
    let chamfer = col(|r| r.chamfer, false);
    Ok(Summary {
        pairs: rows.len(),
        successes: rre_s.len(),
        recall,
        rre_mean_success: mean(&rre_s),
        rre_median_success: median(&rre_s),
        rte_mean_success: mean(&rte_s),
        rte_median_success: median(&rte_s),
        rre_mean_all: mean(&rre),
        rre_median_all: median(&rre),
        rte_mean_all: mean(&rte),
        rte_median_all: median(&rte),
        chamfer_mean: mean(&chamfer),
        chamfer_median: median(&chamfer),
        t_pre_ms_mean: mean(&col(|r| r.t_pre_ms, false)),
        t_feat_ms_mean: mean(&col(|r| r.t_feat_ms, false)),
        t_pose_ms_mean: mean(&col(|r| r.t_pose_ms, false)),
    })
}

impl Report {
    pub fn summary(&self) -> Result<Summary> {
        summarize(&self.rows, self.success_threshold)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from(REPORT_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.pair_id,
                r.rre_deg,
                r.rte,
                r.chamfer,
                r.corr_rmse,
                u8::from(r.success),
                r.t_pre_ms,
                r.t_feat_ms,
                r.t_pose_ms
            );
        }
        s
    }

    /// Key-value summary. Scene-tagged rows also get a recall line per scene.
    pub fn summary_text(&self) -> Result<String> {
        let m = self.summary()?;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("solver", self.solver.to_string());
        kv("success_threshold", self.success_threshold.to_string());
        kv("pairs", m.pairs.to_string());
        kv("successes", m.successes.to_string());
        kv("registration_recall", m.recall.to_string());
        kv("rre_deg_mean_success", m.rre_mean_success.to_string());
        kv("rre_deg_median_success", m.rre_median_success.to_string());
        kv("rte_mean_success", m.rte_mean_success.to_string());
        kv("rte_median_success", m.rte_median_success.to_string());
        kv("rre_deg_mean_all", m.rre_mean_all.to_string());
        kv("rre_deg_median_all", m.rre_median_all.to_string());
        kv("rte_mean_all", m.rte_mean_all.to_string());
        kv("rte_median_all", m.rte_median_all.to_string());
        kv("chamfer_mean", m.chamfer_mean.to_string());
        kv("chamfer_median", m.chamfer_median.to_string());
        kv("t_pre_ms_mean", m.t_pre_ms_mean.to_string());
        kv("t_feat_ms_mean", m.t_feat_ms_mean.to_string());
        kv("t_pose_ms_mean", m.t_pose_ms_mean.to_string());
        let mut by_scene: BTreeMap<&str, Vec<PairResult>> = BTreeMap::new();
        for (r, scene) in self.rows.iter().zip(&self.scenes) {
            if let Some(scene) = scene {
                by_scene.entry(scene).or_default().push(r.clone());
            }
        }
        for (scene, rows) in by_scene {
            kv(&format!("scene.{scene}.pairs"), rows.len().to_string());
            kv(
                &format!("scene.{scene}.registration_recall"),
                registration_recall(&rows, self.success_threshold)?.to_string(),
            );
        }
        Ok(s)
    }

    /// Writes `report.csv` and `summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("report.csv");
        fs::write(&csv, self.csv()).map_err(|e| Error::io(&csv, e))?;
        let summary = dir.join("summary.txt");
        fs::write(&summary, self.summary_text()?).map_err(|e| Error::io(&summary, e))
    }
}

#[cfg(test)]
mod tests;
