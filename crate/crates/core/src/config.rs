//! Flat `key = value` configuration text.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Every field of [`ModelConfig`], [`TrainConfig`] and [`RunConfig`] has a
//! key; unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::train::TrainConfig;
use crate::xencoder::ModelConfig;

/// Splits configuration text into `(key, value, line)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out: Vec<(String, String, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`, got {line:?}", i + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if let Some((_, _, first)) = out.iter().find(|(key, _, _)| key == k) {
            return Err(Error::Config(format!("line {}: {k} already set on line {first}", i + 1)));
        }
        out.push((k.to_string(), v.to_string(), i + 1));
    }
    Ok(out)
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for {key}, expected true or false"))),
    }
}

/// Sets one model field. Returns `false` when `key` is not a model key.
pub fn set_model_key(cfg: &mut ModelConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "d" => cfg.d = parse(key, value)?,
        "heads" => cfg.heads = parse(key, value)?,
        "layers" => cfg.layers = parse(key, value)?,
        "ffn_hidden" => cfg.ffn_hidden = parse(key, value)?,
        "lambda_o" => cfg.lambda_o = parse(key, value)?,
        "lambda_f" => cfg.lambda_f = parse(key, value)?,
        "overlap_radius" => cfg.overlap_radius = parse(key, value)?,
        "decoder" => cfg.decoder = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
        "head_hidden" => cfg.head_hidden = parse(key, value)?,
        "posenc_scale" => cfg.posenc_scale = parse(key, value)?,
        "voxel_size" => cfg.voxel_size = parse(key, value)?,
        "levels" => cfg.levels = parse(key, value)?,
        "coarse_factor" => cfg.coarse_factor = parse(key, value)?,
        "radius_factor" => cfg.radius_factor = parse(key, value)?,
        "max_neighbors" => cfg.max_neighbors = parse(key, value)?,
        "feature_dim" => cfg.feature_dim = parse(key, value)?,
        "backbone_hidden" => cfg.backbone_hidden = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Sets one training field. Returns `false` when `key` is not a training key.
pub fn set_train_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "lr" => cfg.lr = parse(key, value)?,
        "weight_decay" => cfg.weight_decay = parse(key, value)?,
        "grad_clip" => cfg.grad_clip = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "epochs" => cfg.epochs = parse(key, value)?,
        "lr_halving_period" => cfg.lr_halving_period = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "beta1" => cfg.beta1 = parse(key, value)?,
        "beta2" => cfg.beta2 = parse(key, value)?,
        "adam_eps" => cfg.adam_eps = parse(key, value)?,
        "augment" => cfg.augment = parse_bool(key, value)?,
        "loss_ablation" => cfg.loss_ablation = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Canonical text form of a model configuration; parsing it back gives the
/// same configuration.
pub fn model_config_text(cfg: &ModelConfig) -> String {
    let mut s = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    put("d", cfg.d.to_string());
    put("heads", cfg.heads.to_string());
    put("layers", cfg.layers.to_string());
    put("ffn_hidden", cfg.ffn_hidden.to_string());
    put("lambda_o", cfg.lambda_o.to_string());
    put("lambda_f", cfg.lambda_f.to_string());
    put("overlap_radius", cfg.overlap_radius.to_string());
    put("decoder", cfg.decoder.to_string());
    put("head_hidden", cfg.head_hidden.to_string());
    put("posenc_scale", cfg.posenc_scale.to_string());
    put("voxel_size", cfg.voxel_size.to_string());
    put("levels", cfg.levels.to_string());
    put("coarse_factor", cfg.coarse_factor.to_string());
    put("radius_factor", cfg.radius_factor.to_string());
    put("max_neighbors", cfg.max_neighbors.to_string());
    put("feature_dim", cfg.feature_dim.to_string());
    put("backbone_hidden", cfg.backbone_hidden.to_string());
    s
}

/// Parses text holding model keys only.
pub fn parse_model_config(text: &str, base: ModelConfig) -> Result<ModelConfig> {
    let mut cfg = base;
    for (k, v, line) in parse_pairs(text)? {
        if !set_model_key(&mut cfg, &k, &v)? {
            return Err(Error::Config(format!("line {line}: unknown key {k}")));
        }
    }
    Ok(cfg)
}

/// Pose estimation mode used for evaluation and registration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverKind {
    /// Weighted Kabsch on the predicted correspondences.
    #[default]
    Direct,
    /// Nearest-neighbour matching of conditioned features, then RANSAC.
    RansacBaseline,
    /// RANSAC over the predicted correspondences.
    RegtrRansac,
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolverKind::Direct => "direct",
            SolverKind::RansacBaseline => "ransac-baseline",
            SolverKind::RegtrRansac => "regtr+ransac",
        })
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(SolverKind::Direct),
            "ransac-baseline" => Ok(SolverKind::RansacBaseline),
            "regtr+ransac" => Ok(SolverKind::RegtrRansac),
            _ => Err(Error::Unknown {
                what: "solver",
                name: s.to_string(),
            }),
        }
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub solver: SolverKind,
    pub ransac_iterations: usize,
    /// Inlier threshold; `None` means twice the overlap radius.
    pub ransac_threshold: Option<f64>,
    /// Correspondence RMSE below which a pair counts as registered.
    pub success_threshold: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            solver: SolverKind::Direct,
            ransac_iterations: 1000,
            ransac_threshold: None,
            success_threshold: 0.2,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn threshold(&self, model: &ModelConfig) -> f64 {
        self.ransac_threshold.unwrap_or(2.0 * model.overlap_radius)
    }
}

/// Everything a configuration file can set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Training dataset (directory or manifest).
    pub train_data: Option<PathBuf>,
    /// Evaluation dataset (directory or manifest).
    pub eval_data: Option<PathBuf>,
    /// Where `train` writes its checkpoint and loss curve.
    pub output_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            ..RunConfig::default()
        }
    }

    /// Applies configuration text on top of `self`. Relative paths are taken
    /// relative to `base_dir`.
    pub fn apply_text(&mut self, text: &str, base_dir: &Path) -> Result<()> {
        for (k, v, line) in parse_pairs(text)? {
            if set_model_key(&mut self.model, &k, &v)? || set_train_key(&mut self.train, &k, &v)? {
                continue;
            }
            let path = || Some(base_dir.join(&v));
            match k.as_str() {
                "solver" => self.eval.solver = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
                "ransac_iterations" => self.eval.ransac_iterations = parse(&k, &v)?,
                "ransac_threshold" => self.eval.ransac_threshold = Some(parse(&k, &v)?),
                "success_threshold" => self.eval.success_threshold = parse(&k, &v)?,
                "eval_seed" => self.eval.seed = parse(&k, &v)?,
                "train_data" => self.train_data = path(),
                "eval_data" => self.eval_data = path(),
                "output_dir" => self.output_dir = path(),
                "checkpoint" => self.checkpoint = path(),
                _ => return Err(Error::Config(format!("line {line}: unknown key {k}"))),
            }
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::desk();
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.apply_text(&text, base)?;
        cfg.check_inputs_exist()?;
        Ok(cfg)
    }

    /// Fails when an input path (datasets, checkpoint) does not exist. The
    /// output directory is created on demand and is not checked.
    pub fn check_inputs_exist(&self) -> Result<()> {
        for (key, path) in [
            ("train_data", &self.train_data),
            ("eval_data", &self.eval_data),
            ("checkpoint", &self.checkpoint),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::Config(format!("{key}: {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.eval.success_threshold > 0.0) {
            return Err(Error::Config("success_threshold must be positive".into()));
        }
        if self.eval.ransac_iterations == 0 {
            return Err(Error::Config("ransac_iterations must be at least 1".into()));
        }
        if let Some(t) = self.eval.ransac_threshold {
            if !(t > 0.0) {
                return Err(Error::Config("ransac_threshold must be positive".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossAblation;
    use crate::xencoder::DecoderKind;

    #[test]
    fn comments_blank_lines_and_values() {
        let text = "# model\nd = 32  # width\n\nheads=2\ndecoder = weighted\nlr = 0.001\naugment = true\nloss_ablation = no-feat\nsolver = regtr+ransac\ntrain_data = data/train\n";
        let mut cfg = RunConfig::desk();
        cfg.apply_text(text, Path::new("/base")).unwrap();
        assert_eq!(cfg.model.d, 32);
        assert_eq!(cfg.model.heads, 2);
        assert_eq!(cfg.model.decoder, DecoderKind::Weighted);
        assert_eq!(cfg.train.lr, 0.001);
        assert!(cfg.train.augment);
        assert_eq!(cfg.train.loss_ablation, LossAblation::NoFeat);
        assert_eq!(cfg.eval.solver, SolverKind::RegtrRansac);
        assert_eq!(cfg.train_data.as_deref(), Some(Path::new("/base/data/train")));
    }

    #[test]
    fn unknown_repeated_and_malformed_lines_fail() {
        let mut cfg = RunConfig::desk();
        for bad in ["colour = red", "d = 3\nd = 4", "just words", "d = many", "augment = maybe", "decoder = mlp"] {
            let err = cfg.apply_text(bad, Path::new(".")).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{bad}: {err}");
        }
    }

    #[test]
    fn model_text_round_trips() {
        let cfg = ModelConfig {
            posenc_scale: 2.5,
            decoder: DecoderKind::Weighted,
            overlap_radius: 0.0625,
            ..ModelConfig::desk()
        };
        let back = parse_model_config(&model_config_text(&cfg), ModelConfig::default()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_input_paths_are_rejected_at_parse_time() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("train")).unwrap();
        let file = dir.path().join("run.cfg");
        std::fs::write(&file, "train_data = train\noutput_dir = not_yet\n").unwrap();
        let cfg = RunConfig::from_file(&file).unwrap();
        assert_eq!(cfg.train_data, Some(dir.path().join("train")));
        std::fs::write(&file, "train_data = train\neval_data = missing\n").unwrap();
        assert!(matches!(RunConfig::from_file(&file), Err(Error::Config(_))));
    }

    #[test]
    fn every_solver_name_parses_back() {
        for s in [SolverKind::Direct, SolverKind::RansacBaseline, SolverKind::RegtrRansac] {
            assert_eq!(s.to_string().parse::<SolverKind>().unwrap(), s);
        }
        assert!("icp".parse::<SolverKind>().is_err());
    }
}
