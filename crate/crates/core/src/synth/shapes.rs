//! Procedural stand-ins for CAD models and scanned rooms.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    PlaneWithBumps,
    Box,
    SphereCap,
    CompositeRoom,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::PlaneWithBumps,
        ShapeKind::Box,
        ShapeKind::SphereCap,
        ShapeKind::CompositeRoom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::PlaneWithBumps => "plane-with-bumps",
            ShapeKind::Box => "box",
            ShapeKind::SphereCap => "sphere-cap",
            ShapeKind::CompositeRoom => "composite-room",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unknown {
                what: "shape kind",
                name: s.to_string(),
            })
    }
}

pub const MIN_SHAPE_POINTS: usize = 64;

/// Samples `n` surface points of a random instance of `kind`, scaled so the
/// farthest point sits on the unit sphere.
pub fn generate_shape(kind: ShapeKind, n: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    if n < MIN_SHAPE_POINTS {
        return Err(Error::invalid(format!(
            "shape needs at least {MIN_SHAPE_POINTS} points, got {n}"
        )));
    }
    let points = match kind {
        ShapeKind::Box => normalise(boxed(n, rng)),
        ShapeKind::SphereCap => sphere_cap(n, rng),
        ShapeKind::PlaneWithBumps => normalise(plane_with_bumps(n, rng)),
        ShapeKind::CompositeRoom => normalise(composite_room(n, rng)),
    };
    PointCloud::new(points)
}

/// Parses the kind name first so unknown names fail before any sampling.
pub fn generate_shape_named(kind: &str, n: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    generate_shape(kind.parse()?, n, rng)
}

fn unit_vector(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Picks an index with probability proportional to `weights`.
fn pick(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Axis-aligned box surface centred on the origin.
fn boxed(n: usize, rng: &mut impl Rng) -> Vec<Point3> {
    let half: Vector3<f64> =
        Vector3::new(rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0));
    let scale = 1.0 / half.norm();
    let half = half * scale;
    // Face pairs normal to x, y, z.
    let areas = [half.y * half.z, half.x * half.z, half.x * half.y];
    (0..n)
        .map(|_| {
            let axis = pick(&areas, rng);
            let mut p = Point3::new(
                rng.gen_range(-half.x..half.x),
                rng.gen_range(-half.y..half.y),
                rng.gen_range(-half.z..half.z),
            );
            p[axis] = if rng.gen_bool(0.5) { half[axis] } else { -half[axis] };
            p
        })
        .collect()
}

/// Region of the unit sphere around a random axis whose angular radius
/// wobbles with azimuth, so the rim has no rotational symmetry.
fn sphere_cap(n: usize, rng: &mut impl Rng) -> Vec<Point3> {
    let axis = unit_vector(rng);
    let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = axis.cross(&helper).normalize();
    let e2 = axis.cross(&e1);
    let base = rng.gen_range(50f64..75.0).to_radians();
    let lobes: Vec<(f64, f64)> = (1..=3)
        .map(|_| (rng.gen_range(4f64..14.0).to_radians(), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let limit = |phi: f64| {
        base + lobes
            .iter()
            .enumerate()
            .map(|(k, (amp, phase))| amp * ((k + 1) as f64 * phi + phase).sin())
            .sum::<f64>()
    };
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = unit_vector(rng);
        let theta = p.dot(&axis).clamp(-1.0, 1.0).acos();
        let phi = p.dot(&e2).atan2(p.dot(&e1));
        if theta <= limit(phi) {
            out.push(p);
        }
    }
    out
}

fn plane_with_bumps(n: usize, rng: &mut impl Rng) -> Vec<Point3> {
    let bumps: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(3..7))
        .map(|_| {
            (
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.4..0.4),
                rng.gen_range(0.15..0.4),
            )
        })
        .collect();
    (0..n)
        .map(|_| {
            let x: f64 = rng.gen_range(-1.0..1.0);
            let y: f64 = rng.gen_range(-1.0..1.0);
            let z = bumps
                .iter()
                .map(|(cx, cy, h, w)| h * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * w * w)).exp())
                .sum();
            Point3::new(x, y, z)
        })
        .collect()
}

/// Floor, two walls and a box standing on the floor.
fn composite_room(n: usize, rng: &mut impl Rng) -> Vec<Point3> {
    let w = rng.gen_range(1.5..2.5);
    let d = rng.gen_range(1.5..2.5);
    let h = rng.gen_range(1.0..1.6);
    let bw = rng.gen_range(0.3..0.6);
    let bd = rng.gen_range(0.3..0.6);
    let bh = rng.gen_range(0.3..0.8);
    let bx = rng.gen_range(-w + bw + 0.1..w - bw);
    let by = rng.gen_range(-d + bd + 0.1..d - bd);
    let areas = [
        4.0 * w * d,
        2.0 * d * h,
        2.0 * w * h,
        4.0 * bw * bd,
        4.0 * bd * bh,
        4.0 * bw * bh,
    ];
    (0..n)
        .map(|_| match pick(&areas, rng) {
            0 => Point3::new(rng.gen_range(-w..w), rng.gen_range(-d..d), 0.0),
            1 => Point3::new(-w, rng.gen_range(-d..d), rng.gen_range(0.0..h)),
            2 => Point3::new(rng.gen_range(-w..w), -d, rng.gen_range(0.0..h)),
            3 => Point3::new(bx + rng.gen_range(-bw..bw), by + rng.gen_range(-bd..bd), bh),
            4 => {
                let side = if rng.gen_bool(0.5) { bw } else { -bw };
                Point3::new(bx + side, by + rng.gen_range(-bd..bd), rng.gen_range(0.0..bh))
            }
            _ => {
                let side = if rng.gen_bool(0.5) { bd } else { -bd };
                Point3::new(bx + rng.gen_range(-bw..bw), by + side, rng.gen_range(0.0..bh))
            }
        })
        .collect()
}

/// Centres on the bounding-box centre and scales the farthest point to norm 1.
fn normalise(mut pts: Vec<Point3>) -> Vec<Point3> {
    let mut lo = Point3::repeat(f64::INFINITY);
    let mut hi = Point3::repeat(f64::NEG_INFINITY);
    for p in &pts {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let c = (lo + hi) / 2.0;
    let r = pts.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
    let s = if r > 0.0 { 1.0 / r } else { 1.0 };
    for p in &mut pts {
        *p = (*p - c) * s;
    }
    pts
}
