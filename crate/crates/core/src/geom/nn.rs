use std::collections::HashMap;

use super::Point3;

type Cell = [i64; 3];

/// Uniform-grid spatial hash over a borrowed point slice.
///
/// Queries return exactly what an exhaustive scan returns, including the
/// lowest-index tie break.
#[derive(Debug, Clone)]
pub struct SpatialGrid<'a> {
    points: &'a [Point3],
    cell_size: f64,
    origin: Point3,
    lo: Cell,
    hi: Cell,
    cells: HashMap<Cell, Vec<u32>>,
}

impl<'a> SpatialGrid<'a> {
    /// Picks a cell size giving a few points per occupied cell for
    /// surface-like clouds.
    pub fn build(points: &'a [Point3]) -> Self {
        let (min, max) = bounds(points);
        let extent = max - min;
        let diag = extent.norm();
        let n = points.len().max(1) as f64;
        // Surface sampling: n points over an area ~ diag², so spacing ~ diag/√n.
        let mut cell = 2.0 * diag / n.sqrt();
        if !(cell.is_finite() && cell > 0.0) {
            cell = 1.0;
        }
        Self::with_cell_size(points, cell)
    }

    pub fn with_cell_size(points: &'a [Point3], cell_size: f64) -> Self {
        assert!(cell_size > 0.0 && cell_size.is_finite());
        let (origin, _) = bounds(points);
        let mut cells: HashMap<Cell, Vec<u32>> = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(p, &origin, cell_size);
            for k in 0..3 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
            cells.entry(c).or_default().push(i as u32);
        }
        Self {
            points,
            cell_size,
            origin,
            lo,
            hi,
            cells,
        }
    }

    pub fn points(&self) -> &'a [Point3] {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Nearest point as `(index, distance)`. Panics on an empty grid.
    pub fn nearest(&self, q: &Point3) -> (usize, f64) {
        assert!(!self.points.is_empty(), "nearest() on empty grid");
        let qc = cell_of(q, &self.origin, self.cell_size);
        let mut best_i = usize::MAX;
        let mut best_d2 = f64::INFINITY;
        let start = self.ring_start(&qc);
        let end = self.ring_end(&qc);
        for r in start..=end {
            // Any point in ring r lies at least (r-1) whole cells away.
            if r >= 1 {
                let bound = (r - 1) as f64 * self.cell_size;
                if best_d2 < bound * bound {
                    break;
                }
            }
            self.for_each_in_ring(&qc, r, |i| {
                let d2 = (self.points[i] - q).norm_squared();
                if d2 < best_d2 || (d2 == best_d2 && i < best_i) {
                    best_d2 = d2;
                    best_i = i;
                }
            });
        }
        (best_i, best_d2.sqrt())
    }

    /// All indices within `radius` (inclusive), sorted by `(distance, index)`.
    pub fn within_radius(&self, q: &Point3, radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        if self.points.is_empty() || radius < 0.0 {
            return out;
        }
        let r2 = radius * radius;
        let reach = (radius / self.cell_size).ceil() as i64;
        let qc = cell_of(q, &self.origin, self.cell_size);
        for x in (qc[0] - reach).max(self.lo[0])..=(qc[0] + reach).min(self.hi[0]) {
            for y in (qc[1] - reach).max(self.lo[1])..=(qc[1] + reach).min(self.hi[1]) {
                for z in (qc[2] - reach).max(self.lo[2])..=(qc[2] + reach).min(self.hi[2]) {
                    if let Some(ids) = self.cells.get(&[x, y, z]) {
                        for &i in ids {
                            let d2 = (self.points[i as usize] - q).norm_squared();
                            if d2 <= r2 {
                                out.push((i as usize, d2));
                            }
                        }
                    }
                }
            }
        }
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out.into_iter().map(|(i, d2)| (i, d2.sqrt())).collect()
    }

    /// Up to `k` nearest indices within `radius`, ordered by `(distance, index)`.
    pub fn k_nearest_within(&self, q: &Point3, k: usize, radius: f64) -> Vec<(usize, f64)> {
        let mut all = self.within_radius(q, radius);
        all.truncate(k);
        all
    }

    /// Up to `k` indices within `radius`, taken at evenly spaced ranks so the
    /// sample spans the whole ball. The nearest point is always included.
    ///
    /// Ranks order by distance quantised to `1e-9 · radius`, then by index, so
    /// points that are equidistant up to round-off (such as the two halves
    /// around a centroid) keep the same order when the cloud is translated.
    pub fn spread_within(&self, q: &Point3, k: usize, radius: f64) -> Vec<(usize, f64)> {
        let mut all = self.within_radius(q, radius);
        let quantum = radius * 1e-9;
        all.sort_by_key(|&(i, d)| ((d / quantum).round() as u64, i));
        let n = all.len();
        if n <= k {
            return all;
        }
        (0..k).map(|i| all[i * n / k]).collect()
    }

    fn ring_start(&self, qc: &Cell) -> i64 {
        (0..3)
            .map(|k| (self.lo[k] - qc[k]).max(qc[k] - self.hi[k]).max(0))
            .max()
            .unwrap_or(0)
    }

    fn ring_end(&self, qc: &Cell) -> i64 {
        (0..3)
            .map(|k| (qc[k] - self.lo[k]).abs().max((self.hi[k] - qc[k]).abs()))
            .max()
            .unwrap_or(0)
    }

    fn for_each_in_ring(&self, qc: &Cell, r: i64, mut f: impl FnMut(usize)) {
        let range = |k: usize| ((qc[k] - r).max(self.lo[k]), (qc[k] + r).min(self.hi[k]));
        let (x0, x1) = range(0);
        let (y0, y1) = range(1);
        let (z0, z1) = range(2);
        for x in x0..=x1 {
            let edge_x = (x - qc[0]).abs() == r;
            for y in y0..=y1 {
                let edge_xy = edge_x || (y - qc[1]).abs() == r;
                if edge_xy {
                    for z in z0..=z1 {
                        if let Some(ids) = self.cells.get(&[x, y, z]) {
                            ids.iter().for_each(|&i| f(i as usize));
                        }
                    }
                } else {
                    for z in [qc[2] - r, qc[2] + r] {
                        if z < z0 || z > z1 || (r == 0 && z != qc[2]) {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&[x, y, z]) {
                            ids.iter().for_each(|&i| f(i as usize));
                        }
                        if r == 0 {
                            break;
                        }
                    }
                }
            }
        }
    }
}

fn bounds(points: &[Point3]) -> (Point3, Point3) {
    let mut min = Point3::repeat(f64::INFINITY);
    let mut max = Point3::repeat(f64::NEG_INFINITY);
    for p in points {
        min = min.inf(p);
        max = max.sup(p);
    }
    if points.is_empty() {
        (Point3::zeros(), Point3::zeros())
    } else {
        (min, max)
    }
}

fn cell_of(p: &Point3, origin: &Point3, cell: f64) -> Cell {
    let f = |k: usize| {
        let v = ((p[k] - origin[k]) / cell).floor();
        v.clamp(-1e15, 1e15) as i64
    };
    [f(0), f(1), f(2)]
}
