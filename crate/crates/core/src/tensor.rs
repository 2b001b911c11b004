//! Dense rank-4 `f64` arrays, the universal tensor of the network.

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// A batch × channels × height × width array in row-major order.
///
/// Degenerate shapes reuse the same type: a row matrix is `[n, f, 1, 1]`,
/// a vector `[1, f, 1, 1]`, a scalar `[1, 1, 1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        FeatureMap { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::shape(
                "FeatureMap::from_vec",
                format!("{} values for shape {}x{}x{}x{}", data.len(), n, c, h, w),
            ));
        }
        Ok(FeatureMap { n, c, h, w, data })
    }

    pub fn scalar(v: f64) -> Self {
        FeatureMap { n: 1, c: 1, h: 1, w: 1, data: vec![v] }
    }

    /// Row matrix [rows, cols, 1, 1].
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        FeatureMap::from_vec(rows, cols, 1, 1, data)
    }

    pub fn filled_like(&self, v: f64) -> Self {
        FeatureMap { n: self.n, c: self.c, h: self.h, w: self.w, data: vec![v; self.data.len()] }
    }

    /// Uniform draws in [-a, a].
    pub fn uniform(n: usize, c: usize, h: usize, w: usize, a: f64, rng: &mut RngStream) -> Self {
        let data = (0..n * c * h * w).map(|_| rng.uniform_in(-a, a)).collect();
        FeatureMap { n, c, h, w, data }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let i = self.idx(n, c, y, x);
        &mut self.data[i]
    }

    /// The scalar value of a [1,1,1,1] map.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar map");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same (n,c,h,w) shape.
    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.shape() == other.shape()
    }
}

/// ‖a − b‖₂ over flat data; shapes must match.
pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
