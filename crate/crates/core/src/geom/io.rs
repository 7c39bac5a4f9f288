//! Point-cloud file formats.
//!
//! * ASCII PLY: a header declaring one `vertex` element whose first three
//!   properties are `x y z`, followed by one whitespace-separated line per
//!   point. Extra properties are read past and ignored.
//! * Raw binary: 8-byte magic `REGTRPC1`, little-endian `u64` point count,
//!   then `count` little-endian `f32` triplets.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Point3, PointCloud, RigidTransform};
use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 8] = b"REGTRPC1";

pub fn ply_string(pc: &PointCloud) -> String {
    let mut s = String::with_capacity(64 + pc.len() * 48);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", pc.len());
    s.push_str("property double x\nproperty double y\nproperty double z\nend_header\n");
    for p in pc.points() {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    s
}

pub fn write_ply(path: &Path, pc: &PointCloud) -> Result<()> {
    fs::write(path, ply_string(pc)).map_err(|e| Error::io(path, e))
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text).map_err(|msg| Error::format(path, msg))
}

pub fn parse_ply(text: &str) -> std::result::Result<PointCloud, String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err("missing 'ply' magic".into());
    }
    let mut count: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    let mut ascii = false;
    loop {
        let line = lines.next().ok_or("unterminated header")?.trim();
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => ascii = tok.next() == Some("ascii"),
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = tok.next().unwrap_or("");
                in_vertex = name == "vertex";
                if in_vertex {
                    let n = tok.next().ok_or("vertex element without count")?;
                    count = Some(n.parse().map_err(|_| format!("bad vertex count '{n}'"))?);
                } else if count.is_some() {
                    // Elements after the vertices (faces, ...) are not read.
                } else {
                    return Err(format!("element '{name}' before vertex is not supported"));
                }
            }
            Some("property") if in_vertex => {
                props.push(tok.last().unwrap_or("").to_string());
            }
            Some("property") => {}
            Some("end_header") => break,
            Some(other) => return Err(format!("unexpected header line '{other}'")),
        }
    }
    if !ascii {
        return Err("only 'format ascii 1.0' is supported".into());
    }
    if props.len() < 3 || props[0] != "x" || props[1] != "y" || props[2] != "z" {
        return Err(format!("first vertex properties must be x y z, got {props:?}"));
    }
    let count = count.ok_or("no vertex element")?;
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let line = lines.next().ok_or_else(|| format!("expected {count} vertices, got {i}"))?;
        let mut vals = line.split_whitespace().map(str::parse::<f64>);
        let mut next = || -> std::result::Result<f64, String> {
            vals.next()
                .ok_or_else(|| format!("vertex {i}: too few values"))?
                .map_err(|e| format!("vertex {i}: {e}"))
        };
        points.push(Point3::new(next()?, next()?, next()?));
    }
    PointCloud::new(points).map_err(|e| e.to_string())
}

pub fn binary_bytes(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pc.len() * 12);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(pc.len() as u64).to_le_bytes());
    for p in pc.points() {
        for c in p.iter() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_binary(path: &Path, pc: &PointCloud) -> Result<()> {
    fs::write(path, binary_bytes(pc)).map_err(|e| Error::io(path, e))
}

pub fn read_binary(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_binary(&bytes).map_err(|msg| Error::format(path, msg))
}

pub fn parse_binary(bytes: &[u8]) -> std::result::Result<PointCloud, String> {
    if bytes.len() < 16 || &bytes[..8] != BINARY_MAGIC {
        return Err("bad magic".into());
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != count.checked_mul(12).ok_or("count overflow")? {
        return Err(format!("expected {} payload bytes, found {}", count * 12, body.len()));
    }
    let points = body
        .chunks_exact(12)
        .map(|c| {
            let f = |k: usize| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap()) as f64;
            Point3::new(f(0), f(1), f(2))
        })
        .collect();
    PointCloud::new(points).map_err(|e| e.to_string())
}

/// Reads a cloud, choosing the format from the file contents.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(BINARY_MAGIC) {
        parse_binary(&bytes).map_err(|m| Error::format(path, m))
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "not UTF-8 PLY"))?;
        parse_ply(&text).map_err(|m| Error::format(path, m))
    }
}

/// `R` as three rows, then `t` on a fourth line: 12 float64 values in all.
pub fn transform_string(t: &RigidTransform) -> String {
    let v = t.to_row_major();
    format!(
        "{} {} {}\n{} {} {}\n{} {} {}\n{} {} {}\n",
        v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9], v[10], v[11]
    )
}

pub fn parse_transform(text: &str) -> std::result::Result<RigidTransform, String> {
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|s| s.parse::<f64>().map_err(|e| format!("'{s}': {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let arr: [f64; 12] = vals
        .as_slice()
        .try_into()
        .map_err(|_| format!("expected 12 values, found {}", vals.len()))?;
    RigidTransform::from_row_major(&arr).map_err(|e| e.to_string())
}

pub fn write_transform(path: &Path, t: &RigidTransform) -> Result<()> {
    fs::write(path, transform_string(t)).map_err(|e| Error::io(path, e))
}

pub fn read_transform(path: &Path) -> Result<RigidTransform> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_transform(&text).map_err(|m| Error::format(path, m))
}
