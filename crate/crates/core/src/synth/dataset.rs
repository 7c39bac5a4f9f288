//! On-disk datasets: a manifest plus one set of files per pair.
//!
//! Manifest lines are `seed kind p count [scene]`; `#` starts a comment.
//! Pair `i` (0-based, in manifest order) is stored as `pair_{i:04}_src.ply`,
//! `pair_{i:04}_tgt.ply`, `pair_{i:04}_gt.txt` and, for generated pairs,
//! `pair_{i:04}_clean.ply` holding the noise-free overlap points.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{generate_shape, make_modelnet_style_pair, PairConfig, PairSample, ShapeKind};
use crate::error::{Error, Result};
use crate::geom::io::{read_ply, read_transform, write_ply, write_transform};
use crate::geom::SpatialGrid;

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub seed: u64,
    pub kind: ShapeKind,
    /// Crop keep fraction.
    pub p: f64,
    /// Points per cloud.
    pub count: usize,
    pub scene: Option<String>,
}

impl ManifestEntry {
    /// Regenerates the pair from its seed. `shape_points` is the size of the
    /// shape before cropping.
    pub fn generate(&self, cfg: &PairConfig, shape_points: usize) -> Result<PairSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let shape = generate_shape(self.kind, shape_points, &mut rng)?;
        let cfg = PairConfig {
            num_points: self.count,
            ..cfg.clone()
        };
        make_modelnet_style_pair(&shape, self.p, &cfg, &mut rng)
    }

    fn line(&self) -> String {
        let mut s = format!("{} {} {} {}", self.seed, self.kind, self.p, self.count);
        if let Some(scene) = &self.scene {
            s.push(' ');
            s.push_str(scene);
        }
        s
    }
}

pub fn manifest_string(entries: &[ManifestEntry]) -> String {
    let mut s = String::from("# seed kind p count [scene]\n");
    for e in entries {
        let _ = writeln!(s, "{}", e.line());
    }
    s
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    fs::write(path, manifest_string(entries)).map_err(|e| Error::io(path, e))
}

pub fn parse_manifest(text: &str) -> std::result::Result<Vec<ManifestEntry>, String> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(4..=5).contains(&fields.len()) {
            return Err(format!("line {}: expected 'seed kind p count [scene]'", no + 1));
        }
        let bad = |what: &str| format!("line {}: bad {what} '{}'", no + 1, line);
        let p: f64 = fields[2].parse().map_err(|_| bad("p"))?;
        if !(p > 0.0 && p <= 1.0) {
            return Err(bad("p"));
        }
        out.push(ManifestEntry {
            seed: fields[0].parse().map_err(|_| bad("seed"))?,
            kind: fields[1].parse().map_err(|_| bad("kind"))?,
            p,
            count: fields[3].parse().map_err(|_| bad("count"))?,
            scene: fields.get(4).map(|s| s.to_string()),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text).map_err(|msg| Error::format(path, msg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredPair {
    pub id: String,
    pub entry: ManifestEntry,
    pub pair: PairSample,
}

/// A directory of stored pairs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub pairs: Vec<StoredPair>,
}

fn pair_path(dir: &Path, id: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{id}_{suffix}"))
}

pub fn pair_id(i: usize) -> String {
    format!("pair_{i:04}")
}

impl Dataset {
    /// Writes the pairs and the manifest into `dir`, creating it if needed.
    pub fn write(dir: &Path, pairs: &[(ManifestEntry, PairSample)]) -> Result<Dataset> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut stored = Vec::with_capacity(pairs.len());
        for (i, (entry, pair)) in pairs.iter().enumerate() {
            let id = pair_id(i);
            write_ply(&pair_path(dir, &id, "src.ply"), &pair.source)?;
            write_ply(&pair_path(dir, &id, "tgt.ply"), &pair.target)?;
            write_transform(&pair_path(dir, &id, "gt.txt"), &pair.gt_transform)?;
            if let Some(clean) = &pair.clean_overlap {
                write_ply(&pair_path(dir, &id, "clean.ply"), clean)?;
            }
            stored.push(StoredPair {
                id,
                entry: entry.clone(),
                pair: pair.clone(),
            });
        }
        let entries: Vec<ManifestEntry> = pairs.iter().map(|(e, _)| e.clone()).collect();
        write_manifest(&dir.join(MANIFEST_NAME), &entries)?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            pairs: stored,
        })
    }

    /// Loads a dataset from `dir`, or from the directory containing the
    /// manifest when `path` names the manifest file itself.
    ///
    /// Overlap fractions are not stored; they are recomputed from the clean
    /// overlap points when present and otherwise from nearest neighbours under
    /// the ground truth within `overlap_radius`.
    pub fn load(path: &Path, overlap_radius: f64) -> Result<Dataset> {
        let (dir, manifest) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_NAME))
        } else {
            let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (dir, path.to_path_buf())
        };
        let entries = read_manifest(&manifest)?;
        let mut pairs = Vec::with_capacity(entries.len());
        for (i, entry) in entries.into_iter().enumerate() {
            let id = pair_id(i);
            let source = read_ply(&pair_path(&dir, &id, "src.ply"))?;
            let target = read_ply(&pair_path(&dir, &id, "tgt.ply"))?;
            let gt_transform = read_transform(&pair_path(&dir, &id, "gt.txt"))?;
            let clean_path = pair_path(&dir, &id, "clean.ply");
            let clean_overlap = if clean_path.exists() {
                Some(read_ply(&clean_path)?)
            } else {
                None
            };
            source.ensure_non_empty()?;
            target.ensure_non_empty()?;
            let overlap_fraction = match &clean_overlap {
                Some(c) => (c.len() as f64 / source.len() as f64).min(1.0),
                None => {
                    let grid = SpatialGrid::build(target.points());
                    let close = source
                        .points()
                        .iter()
                        .filter(|p| grid.nearest(&gt_transform.apply_point(p)).1 < overlap_radius)
                        .count();
                    close as f64 / source.len() as f64
                }
            };
            pairs.push(StoredPair {
                id,
                entry,
                pair: PairSample {
                    source,
                    target,
                    gt_transform,
                    overlap_fraction,
                    clean_overlap,
                },
            });
        }
        Ok(Dataset { dir, pairs })
    }
}
