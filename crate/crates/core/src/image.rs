//! Image-space primitives: separable resampling as sparse spatial maps,
//! sub-pixel shuffles, patch grids, and the codec stand-in used to make
//! paired training data (block cosine transform + uniform quantization).

use crate::error::{Error, Result};
use crate::map::SpatialMap;
use crate::scalar::{num, Scalar};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeKind {
    Bilinear,
    Bicubic,
}

/// Catmull-Rom style cubic, a = -0.5.
fn bicubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

fn bilinear_weight(t: f64) -> f64 {
    let t = t.abs();
    if t < 1.0 {
        1.0 - t
    } else {
        0.0
    }
}

/// Taps for one output coordinate along one axis, pixel centers aligned:
/// source = (out + 0.5) * (in/out) - 0.5, indices clamped at the edges.
fn axis_taps(out_i: usize, in_size: usize, out_size: usize, kind: ResizeKind) -> Vec<(usize, f64)> {
    let scale = in_size as f64 / out_size as f64;
    let src = (out_i as f64 + 0.5) * scale - 0.5;
    let (radius, weight): (isize, fn(f64) -> f64) = match kind {
        ResizeKind::Bilinear => (1, bilinear_weight),
        ResizeKind::Bicubic => (2, bicubic_weight),
    };
    let base = src.floor() as isize;
    let mut taps = Vec::with_capacity(2 * radius as usize);
    for k in (1 - radius)..=radius {
        let idx = base + k;
        let w = weight(src - idx as f64);
        if w != 0.0 {
            let clamped = idx.clamp(0, in_size as isize - 1) as usize;
            taps.push((clamped, w));
        }
    }
    taps
}

/// Resampling as an explicit sparse map; rows are normalized so constants
/// are preserved to rounding error.
pub fn build_resize_map<T: Scalar>(
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    kind: ResizeKind,
) -> SpatialMap<T> {
    let mut map = SpatialMap::new(in_h, in_w, out_h, out_w);
    let col_taps: Vec<Vec<(usize, f64)>> = (0..out_w)
        .map(|ox| axis_taps(ox, in_w, out_w, kind))
        .collect();
    for oy in 0..out_h {
        let row_taps = axis_taps(oy, in_h, out_h, kind);
        for ox in 0..out_w {
            let o = oy * out_w + ox;
            for &(iy, wy) in &row_taps {
                for &(ix, wx) in &col_taps[ox] {
                    map.push(o, iy * in_w + ix, num::<T>(wy * wx));
                }
            }
            map.normalize_row(o);
        }
    }
    map
}

pub fn resize<T: Scalar>(
    img: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    kind: ResizeKind,
) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize", "output dims must be >= 1"));
    }
    let s = img.shape();
    build_resize_map::<T>(s.h, s.w, out_h, out_w, kind).apply(img)
}

// ---- pixel shuffle ----

/// (n, c*r^2, h, w) -> (n, c, h*r, w*r); source channel c*r^2 + dy*r + dx.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if r == 0 || s.c % (r * r) != 0 {
        return Err(Error::invalid(
            "pixel_shuffle",
            format!("channels {} not divisible by r^2 = {}", s.c, r * r),
        ));
    }
    let oc = s.c / (r * r);
    Ok(Tensor::from_fn(Shape::new(s.n, oc, s.h * r, s.w * r), |n, c, y, xq| {
        x.at(n, c * r * r + (y % r) * r + (xq % r), y / r, xq / r)
    }))
}

/// Inverse of pixel_shuffle: (n, c, h*r, w*r) -> (n, c*r^2, h, w).
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if r == 0 || s.h % r != 0 || s.w % r != 0 {
        return Err(Error::invalid(
            "pixel_unshuffle",
            format!("spatial {}x{} not divisible by r = {r}", s.h, s.w),
        ));
    }
    Ok(Tensor::from_fn(
        Shape::new(s.n, s.c * r * r, s.h / r, s.w / r),
        |n, c, y, xq| {
            let (cc, rem) = (c / (r * r), c % (r * r));
            x.at(n, cc, y * r + rem / r, xq * r + rem % r)
        },
    ))
}

// ---- patch grids ----

/// Row-major enumeration of d x d patch origins with a fixed stride, fully
/// inside an (h, w) map. The same grid drives extraction and folding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub stride: usize,
    pub ny: usize,
    pub nx: usize,
}

impl PatchGrid {
    pub fn new(h: usize, w: usize, d: usize, stride: usize) -> Result<Self> {
        if d == 0 || stride == 0 {
            return Err(Error::invalid("patch_grid", "d and stride must be >= 1"));
        }
        if d > h || d > w {
            return Err(Error::invalid(
                "patch_grid",
                format!("patch {d}x{d} larger than map {h}x{w}"),
            ));
        }
        Ok(PatchGrid {
            h,
            w,
            d,
            stride,
            ny: (h - d) / stride + 1,
            nx: (w - d) / stride + 1,
        })
    }

    pub fn count(&self) -> usize {
        self.ny * self.nx
    }

    pub fn origin(&self, i: usize) -> (usize, usize) {
        ((i / self.nx) * self.stride, (i % self.nx) * self.stride)
    }

    /// How many patches cover each pixel.
    pub fn coverage(&self) -> Vec<u32> {
        let mut cov = vec![0u32; self.h * self.w];
        for i in 0..self.count() {
            let (oy, ox) = self.origin(i);
            for dy in 0..self.d {
                for dx in 0..self.d {
                    cov[(oy + dy) * self.w + ox + dx] += 1;
                }
            }
        }
        cov
    }

    /// Sparse map from the (ny, nx) patch-index plane to the (h, w) pixel
    /// plane: each pixel averages the per-patch values of its covering
    /// patches. Folds patch-constant quantities like attention scores.
    pub fn fold_map<T: Scalar>(&self) -> SpatialMap<T> {
        let mut map = SpatialMap::new(self.ny, self.nx, self.h, self.w);
        for i in 0..self.count() {
            let (oy, ox) = self.origin(i);
            for dy in 0..self.d {
                for dx in 0..self.d {
                    map.push((oy + dy) * self.w + ox + dx, i, T::one());
                }
            }
        }
        map.normalize_rows();
        map
    }
}

/// Rows of the result are flattened patches in (channel, dy, dx) order:
/// patches shape (p, 1, 1, c*d*d). Input must be a single map (n = 1).
pub fn extract_patches<T: Scalar>(
    feat: &Tensor<T>,
    d: usize,
    stride: usize,
) -> Result<(Tensor<T>, PatchGrid)> {
    let s = feat.shape();
    if s.n != 1 {
        return Err(Error::invalid("extract_patches", format!("expected n = 1, got {s}")));
    }
    let grid = PatchGrid::new(s.h, s.w, d, stride)?;
    let row = s.c * d * d;
    let mut data = vec![T::zero(); grid.count() * row];
    for i in 0..grid.count() {
        let (oy, ox) = grid.origin(i);
        let dst = &mut data[i * row..(i + 1) * row];
        for c in 0..s.c {
            for dy in 0..d {
                for dx in 0..d {
                    dst[(c * d + dy) * d + dx] = feat.at(0, c, oy + dy, ox + dx);
                }
            }
        }
    }
    let patches = Tensor::new(Shape::new(grid.count(), 1, 1, row), data)?;
    Ok((patches, grid))
}

/// Inverse of extract_patches under coverage-averaging: overlapping
/// contributions are summed per pixel and divided by the cover count.
pub fn fold_patches<T: Scalar>(patches: &Tensor<T>, grid: &PatchGrid, c: usize) -> Result<Tensor<T>> {
    let s = patches.shape();
    let row = c * grid.d * grid.d;
    if s.n != grid.count() || s.c * s.h * s.w != row {
        return Err(Error::invalid(
            "fold_patches",
            format!("patches {s} do not match grid ({} x {row})", grid.count()),
        ));
    }
    let plane = grid.h * grid.w;
    let mut acc = vec![T::zero(); c * plane];
    for i in 0..grid.count() {
        let (oy, ox) = grid.origin(i);
        let src = &patches.data()[i * row..(i + 1) * row];
        for ch in 0..c {
            for dy in 0..grid.d {
                for dx in 0..grid.d {
                    acc[ch * plane + (oy + dy) * grid.w + ox + dx] +=
                        src[(ch * grid.d + dy) * grid.d + dx];
                }
            }
        }
    }
    let cov = grid.coverage();
    for ch in 0..c {
        for (px, &k) in cov.iter().enumerate() {
            if k > 0 {
                acc[ch * plane + px] /= num::<T>(k as f64);
            }
        }
    }
    Tensor::new(Shape::new(1, c, grid.h, grid.w), acc)
}

// ---- degradation simulator ----

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradeConfig {
    pub factor: usize,
    pub block: usize,
    pub q: f64,
    pub seed: u64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        DegradeConfig { factor: 4, block: 8, q: 0.05, seed: 0 }
    }
}

/// Orthonormal type-II cosine basis, row u: alpha(u) cos(pi (2n+1) u / 2B).
fn dct_matrix<T: Scalar>(b: usize) -> Vec<T> {
    let mut m = vec![T::zero(); b * b];
    for u in 0..b {
        let alpha = if u == 0 {
            (1.0 / b as f64).sqrt()
        } else {
            (2.0 / b as f64).sqrt()
        };
        for n in 0..b {
            let angle = std::f64::consts::PI * (2 * n + 1) as f64 * u as f64 / (2 * b) as f64;
            m[u * b + n] = num::<T>(alpha * angle.cos());
        }
    }
    m
}

pub fn quantize<T: Scalar>(c: T, q: T) -> T {
    if q == T::zero() {
        c
    } else {
        (c / q).round() * q
    }
}

/// b x b block transform, quantize, inverse, in place on one padded plane.
fn quantize_plane<T: Scalar>(plane: &mut [T], h: usize, w: usize, b: usize, q: T, m: &[T]) {
    let mut block = vec![T::zero(); b * b];
    let mut tmp = vec![T::zero(); b * b];
    for by in (0..h).step_by(b) {
        for bx in (0..w).step_by(b) {
            for y in 0..b {
                for x in 0..b {
                    block[y * b + x] = plane[(by + y) * w + bx + x];
                }
            }
            // coef = M B M^T
            gemm_small(b, m, &block, &mut tmp, false, false);
            gemm_small(b, &tmp, m, &mut block, false, true);
            for v in block.iter_mut() {
                *v = quantize(*v, q);
            }
            // back = M^T C M
            gemm_small(b, m, &block, &mut tmp, true, false);
            gemm_small(b, &tmp, m, &mut block, false, false);
            for y in 0..b {
                for x in 0..b {
                    plane[(by + y) * w + bx + x] = block[y * b + x];
                }
            }
        }
    }
}

/// c = a * b for b x b matrices with optional transposes; sizes are tiny so
/// a direct triple loop keeps the accumulation order obvious.
fn gemm_small<T: Scalar>(n: usize, a: &[T], b: &[T], c: &mut [T], ta: bool, tb: bool) {
    for i in 0..n {
        for j in 0..n {
            let mut acc = T::zero();
            for k in 0..n {
                let av = if ta { a[k * n + i] } else { a[i * n + k] };
                let bv = if tb { b[j * n + k] } else { b[k * n + j] };
                acc += av * bv;
            }
            c[i * n + j] = acc;
        }
    }
}

/// Bilinear downscale by cfg.factor, then per-block cosine-domain uniform
/// quantization with step cfg.q, then clip to [0,1]. The quantization stage
/// pads planes to a block multiple by edge replication and crops back.
pub fn degrade<T: Scalar>(hr: &Tensor<T>, cfg: &DegradeConfig) -> Result<Tensor<T>> {
    let s = hr.shape();
    if cfg.factor == 0 || cfg.block == 0 {
        return Err(Error::invalid("degrade", "factor and block must be >= 1"));
    }
    if s.h % cfg.factor != 0 || s.w % cfg.factor != 0 {
        return Err(Error::invalid(
            "degrade",
            format!("dims {}x{} not divisible by factor {}", s.h, s.w, cfg.factor),
        ));
    }
    if cfg.q < 0.0 {
        return Err(Error::invalid("degrade", "q must be >= 0"));
    }
    let (lh, lw) = (s.h / cfg.factor, s.w / cfg.factor);
    let low = if cfg.factor == 1 {
        hr.clone()
    } else {
        resize(hr, lh, lw, ResizeKind::Bilinear)?
    };
    if cfg.q == 0.0 {
        return Ok(low);
    }

    let b = cfg.block;
    let (ph, pw) = (lh.div_ceil(b) * b, lw.div_ceil(b) * b);
    let m = dct_matrix::<T>(b);
    let q = num::<T>(cfg.q);
    let mut out = vec![T::zero(); low.numel()];
    let plane = lh * lw;
    for nc in 0..s.n * s.c {
        let src = &low.data()[nc * plane..(nc + 1) * plane];
        let mut padded = vec![T::zero(); ph * pw];
        for y in 0..ph {
            let sy = y.min(lh - 1);
            for x in 0..pw {
                padded[y * pw + x] = src[sy * lw + x.min(lw - 1)];
            }
        }
        quantize_plane(&mut padded, ph, pw, b, q, &m);
        let dst = &mut out[nc * plane..(nc + 1) * plane];
        for y in 0..lh {
            for x in 0..lw {
                dst[y * lw + x] = padded[y * pw + x].clamp(T::zero(), T::one());
            }
        }
    }
    Tensor::new(Shape::new(s.n, s.c, lh, lw), out)
}
