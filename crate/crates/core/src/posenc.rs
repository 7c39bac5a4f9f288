//! Sinusoidal positional encodings for continuous 3D coordinates.
//!
//! Each coordinate gets its own block of `2⌊d/6⌋` values: even slots hold
//! `sin(c / 10000^(2i/⌊d/3⌋))`, odd slots the matching cosine. The x, y and
//! z blocks are concatenated and the remaining `d - 6⌊d/6⌋` slots are zero.

use crate::error::{Error, Result};
use crate::geom::Point3;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionalEncoding {
    dim: usize,
    /// Multiplies coordinates before encoding.
    pre_scale: f64,
}

impl PositionalEncoding {
    pub fn new(dim: usize) -> Result<Self> {
        Self::with_scale(dim, 1.0)
    }

    pub fn with_scale(dim: usize, pre_scale: f64) -> Result<Self> {
        if dim < 6 {
            return Err(Error::invalid(format!("positional encoding needs d >= 6, got {dim}")));
        }
        if !(pre_scale.is_finite() && pre_scale > 0.0) {
            return Err(Error::invalid(format!("positional encoding scale must be > 0, got {pre_scale}")));
        }
        Ok(Self { dim, pre_scale })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block_len(&self) -> usize {
        2 * (self.dim / 6)
    }

    pub fn padding(&self) -> usize {
        self.dim - 3 * self.block_len()
    }

    pub fn encode(&self, p: &Point3) -> Vec<f64> {
        let pairs = self.dim / 6;
        let denom = (self.dim / 3) as f64;
        let mut out = vec![0.0; self.dim];
        for axis in 0..3 {
            let c = p[axis] * self.pre_scale;
            let block = &mut out[axis * 2 * pairs..(axis + 1) * 2 * pairs];
            for i in 0..pairs {
                let arg = c / 10000f64.powf(2.0 * i as f64 / denom);
                block[2 * i] = arg.sin();
                block[2 * i + 1] = arg.cos();
            }
        }
        out
    }

    /// One encoding per row.
    pub fn encode_all<T: Float>(&self, points: &[Point3]) -> Tensor<T> {
        let mut data = Vec::with_capacity(points.len() * self.dim);
        for p in points {
            data.extend(self.encode(p).into_iter().map(T::of));
        }
        Tensor::new(points.len(), self.dim, data).expect("shape")
    }
}

/// Convenience wrapper around [`PositionalEncoding::encode`].
pub fn encode(p: &Point3, dim: usize) -> Result<Vec<f64>> {
    Ok(PositionalEncoding::new(dim)?.encode(p))
}
