//! Sparse linear maps between spatial grids, applied uniformly over batch
//! and channels. Resizing, patch extraction and patch folding are all maps
//! of this form, which gives them one shared differentiation rule: the
//! adjoint of applying a map is applying its transpose.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Row-major sparse matrix from an (in_h x in_w) grid to an (out_h x out_w)
/// grid. `rows[o]` holds the taps of output pixel `o` in a fixed order, so
/// application order never depends on thread count.
#[derive(Debug, Clone)]
pub struct SpatialMap<T> {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    rows: Vec<Vec<(u32, T)>>,
}

impl<T: Scalar> SpatialMap<T> {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        SpatialMap {
            in_h,
            in_w,
            out_h,
            out_w,
            rows: vec![Vec::new(); out_h * out_w],
        }
    }

    pub fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn push(&mut self, out_px: usize, in_px: usize, weight: T) {
        debug_assert!(out_px < self.out_plane() && in_px < self.in_plane());
        self.rows[out_px].push((in_px as u32, weight));
    }

    pub fn row(&self, out_px: usize) -> &[(u32, T)] {
        &self.rows[out_px]
    }

    /// Scale every tap of one output row so the row sums to 1. Rows that
    /// sum to 0 are left untouched.
    pub fn normalize_row(&mut self, out_px: usize) {
        let total = self.rows[out_px]
            .iter()
            .fold(T::zero(), |acc, &(_, w)| acc + w);
        if total != T::zero() {
            for (_, w) in &mut self.rows[out_px] {
                *w /= total;
            }
        }
    }

    pub fn normalize_rows(&mut self) {
        for o in 0..self.rows.len() {
            self.normalize_row(o);
        }
    }

    fn check_plane(&self, s: Shape, h: usize, w: usize, op: &'static str) -> Result<()> {
        if s.h != h || s.w != w {
            return Err(Error::invalid(
                op,
                format!("map expects {}x{} plane, tensor is {s}", h, w),
            ));
        }
        Ok(())
    }

    /// y[o] = sum over taps of w * x[col], per (batch, channel) plane.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        self.check_plane(s, self.in_h, self.in_w, "spatial_map")?;
        let out_shape = Shape::new(s.n, s.c, self.out_h, self.out_w);
        let (ip, op) = (self.in_plane(), self.out_plane());
        let mut out = vec![T::zero(); out_shape.numel()];
        out.par_chunks_mut(op)
            .zip(x.data().par_chunks(ip))
            .for_each(|(dst, src)| {
                for (o, d) in dst.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for &(col, w) in &self.rows[o] {
                        acc += w * src[col as usize];
                    }
                    *d = acc;
                }
            });
        Tensor::new(out_shape, out)
    }

    /// x[col] += w * y[o] for every tap: the transpose of `apply`.
    pub fn apply_transposed(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let s = y.shape();
        self.check_plane(s, self.out_h, self.out_w, "spatial_map_t")?;
        let out_shape = Shape::new(s.n, s.c, self.in_h, self.in_w);
        let (ip, op) = (self.in_plane(), self.out_plane());
        let mut out = vec![T::zero(); out_shape.numel()];
        out.par_chunks_mut(ip)
            .zip(y.data().par_chunks(op))
            .for_each(|(dst, src)| {
                for (o, &v) in src.iter().enumerate() {
                    for &(col, w) in &self.rows[o] {
                        dst[col as usize] += w * v;
                    }
                }
            });
        Tensor::new(out_shape, out)
    }

    /// Dense matrix form, out_plane x in_plane. Test support for comparing
    /// against direct constructions.
    pub fn to_dense(&self) -> Vec<T> {
        let mut dense = vec![T::zero(); self.out_plane() * self.in_plane()];
        for (o, row) in self.rows.iter().enumerate() {
            for &(col, w) in row {
                dense[o * self.in_plane() + col as usize] += w;
            }
        }
        dense
    }

    pub fn shared(self) -> Arc<Self> {
        Arc::new(self)
    }
}
