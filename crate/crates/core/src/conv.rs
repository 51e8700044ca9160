//! Convolution kernels: forward, input-gradient (transposed form) and
//! weight-gradient, all expressed as im2col + GEMM.
//!
//! The three kernels are the three directions of one trilinear form, which is
//! what lets the graph differentiate each of them in terms of the other two.
//! All outputs are independent of worker count: parallelism only splits work
//! across batch samples, and each output element is produced by exactly one
//! sequential accumulation chain.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Spatial output size for one axis: floor((size + 2*pad - k) / stride) + 1.
pub fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

pub fn conv_out_shape(x: Shape, w: Shape, stride: usize, pad: usize) -> Result<Shape> {
    if x.c != w.c {
        return Err(Error::shape("conv2d", x, w));
    }
    if w.h % 2 == 0 || w.w % 2 == 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel dims must be odd, got {}x{}", w.h, w.w),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be >= 1"));
    }
    let oh = conv_out_dim(x.h, w.h, stride, pad);
    let ow = conv_out_dim(x.w, w.w, stride, pad);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(Shape::new(x.n, w.n, oh, ow)),
        _ => Err(Error::invalid(
            "conv2d",
            format!("kernel {}x{} does not fit input {}", w.h, w.w, x),
        )),
    }
}

/// Unfold one sample into a (ic*kh*kw) x (oh*ow) column matrix, zero padding.
fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    col: &mut [T],
) {
    debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
    let plane = h * w;
    let ocols = oh * ow;
    let mut row = 0;
    for ic in 0..c {
        let src = &x[ic * plane..(ic + 1) * plane];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut col[row * ocols..(row + 1) * ocols];
                row += 1;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy as usize >= h {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix as usize >= w {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold a column-matrix gradient back onto the input plane (accumulating).
fn col2im_add<T: Scalar>(
    col: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    x: &mut [T],
) {
    let plane = h * w;
    let ocols = oh * ow;
    let mut row = 0;
    for ic in 0..c {
        let dst = &mut x[ic * plane..(ic + 1) * plane];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &col[row * ocols..(row + 1) * ocols];
                row += 1;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &g) in srow.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            drow[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// y = x (*) w, no bias. Weight shape (oc, ic, kh, kw).
pub fn conv_fwd<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    let os = conv_out_shape(xs, ws, stride, pad)?;
    let (oh, ow) = (os.h, os.w);
    let ick = ws.c * ws.h * ws.w;
    let in_per = xs.c * xs.h * xs.w;
    let out_per = os.c * oh * ow;

    let mut out = vec![T::zero(); os.numel()];
    out.par_chunks_mut(out_per)
        .zip(x.data().par_chunks(in_per))
        .for_each(|(o, xn)| {
            let mut col = vec![T::zero(); ick * oh * ow];
            im2col(xn, (xs.c, xs.h, xs.w), (ws.h, ws.w), stride, pad, (oh, ow), &mut col);
            T::gemm(ws.n, ick, oh * ow, w.data(), &col, o);
        });
    Tensor::new(os, out)
}

/// Gradient of conv_fwd w.r.t. its input: gx = gy (*)^T w.
pub fn conv_input_grad<T: Scalar>(
    gy: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    in_shape: Shape,
) -> Result<Tensor<T>> {
    let gs = gy.shape();
    let ws = w.shape();
    let expect = conv_out_shape(in_shape, ws, stride, pad)?;
    if expect != gs {
        return Err(Error::shape("conv2d_input_grad", expect, gs));
    }
    let ick = ws.c * ws.h * ws.w;
    let ocols = gs.h * gs.w;
    let out_per = gs.c * ocols;
    let in_per = in_shape.c * in_shape.h * in_shape.w;

    // W^T as an explicit (ick x oc) row-major matrix; small, built once.
    let mut wt = vec![T::zero(); ick * ws.n];
    for oc in 0..ws.n {
        for r in 0..ick {
            wt[r * ws.n + oc] = w.data()[oc * ick + r];
        }
    }

    let mut gx = vec![T::zero(); in_shape.numel()];
    gx.par_chunks_mut(in_per)
        .zip(gy.data().par_chunks(out_per))
        .for_each(|(gxn, gyn)| {
            let mut col = vec![T::zero(); ick * ocols];
            T::gemm(ick, ws.n, ocols, &wt, gyn, &mut col);
            col2im_add(
                &col,
                (in_shape.c, in_shape.h, in_shape.w),
                (ws.h, ws.w),
                stride,
                pad,
                (gs.h, gs.w),
                gxn,
            );
        });
    Tensor::new(in_shape, gx)
}

/// Gradient of conv_fwd w.r.t. the weight: gw[oc,ic,kh,kw] = sum_n gy_n * col_n^T.
/// Accumulation over the batch is sequential for reproducibility.
pub fn conv_weight_grad<T: Scalar>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
    w_shape: Shape,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let gs = gy.shape();
    let expect = conv_out_shape(xs, w_shape, stride, pad)?;
    if expect != gs {
        return Err(Error::shape("conv2d_weight_grad", expect, gs));
    }
    let ick = w_shape.c * w_shape.h * w_shape.w;
    let ocols = gs.h * gs.w;
    let in_per = xs.c * xs.h * xs.w;
    let out_per = gs.c * ocols;

    // gw^T accumulated as (ick x oc); transposed once at the end.
    let mut gwt = vec![T::zero(); ick * w_shape.n];
    let mut col = vec![T::zero(); ick * ocols];
    let mut prod = vec![T::zero(); ick * w_shape.n];
    for n in 0..xs.n {
        let xn = &x.data()[n * in_per..(n + 1) * in_per];
        let gyn = &gy.data()[n * out_per..(n + 1) * out_per];
        im2col(xn, (xs.c, xs.h, xs.w), (w_shape.h, w_shape.w), stride, pad, (gs.h, gs.w), &mut col);
        // gy^T as (ocols x oc)
        let mut gyt = vec![T::zero(); ocols * gs.c];
        for oc in 0..gs.c {
            for p in 0..ocols {
                gyt[p * gs.c + oc] = gyn[oc * ocols + p];
            }
        }
        T::gemm(ick, ocols, w_shape.n, &col, &gyt, &mut prod);
        for (a, &b) in gwt.iter_mut().zip(prod.iter()) {
            *a += b;
        }
    }
    let mut gw = vec![T::zero(); w_shape.numel()];
    for oc in 0..w_shape.n {
        for r in 0..ick {
            gw[oc * ick + r] = gwt[r * w_shape.n + oc];
        }
    }
    Tensor::new(w_shape, gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 7-loop convolution, the independent reference.
    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let os = conv_out_shape(xs, ws, stride, pad).unwrap();
        Tensor::from_fn(os, |n, oc, oy, ox| {
            let mut acc = 0.0;
            for ic in 0..xs.c {
                for ky in 0..ws.h {
                    for kx in 0..ws.w {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                            acc += x.at(n, ic, iy as usize, ix as usize) * w.at(oc, ic, ky, kx);
                        }
                    }
                }
            }
            acc
        })
    }

    fn rand_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matches_naive_on_random_shapes() {
        let cases = [
            (Shape::new(2, 3, 8, 8), Shape::new(4, 3, 3, 3), 1, 1),
            (Shape::new(1, 2, 7, 5), Shape::new(3, 2, 3, 3), 2, 1),
            (Shape::new(2, 4, 16, 16), Shape::new(2, 4, 5, 5), 2, 2),
            (Shape::new(1, 1, 4, 4), Shape::new(1, 1, 1, 1), 1, 0),
        ];
        for (i, &(xs, ws, stride, pad)) in cases.iter().enumerate() {
            let x = rand_tensor(xs, 10 + i as u64);
            let w = rand_tensor(ws, 20 + i as u64);
            let got = conv_fwd(&x, &w, stride, pad).unwrap();
            let want = conv_naive(&x, &w, stride, pad);
            assert!(got.max_abs_diff(&want) < 1e-9, "case {i}");
        }
    }

    #[test]
    fn input_and_weight_grads_match_naive_transposition() {
        // gx and gw are linear in gy; verify against explicit sums.
        let xs = Shape::new(2, 2, 6, 5);
        let ws = Shape::new(3, 2, 3, 3);
        let (stride, pad) = (2, 1);
        let x = rand_tensor(xs, 1);
        let w = rand_tensor(ws, 2);
        let os = conv_out_shape(xs, ws, stride, pad).unwrap();
        let gy = rand_tensor(os, 3);

        let gx = conv_input_grad(&gy, &w, stride, pad, xs).unwrap();
        let gw = conv_weight_grad(&x, &gy, stride, pad, ws).unwrap();

        let mut gx_ref = vec![0.0; xs.numel()];
        let mut gw_ref = vec![0.0; ws.numel()];
        for n in 0..xs.n {
            for oc in 0..ws.n {
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let g = gy.at(n, oc, oy, ox);
                        for ic in 0..xs.c {
                            for ky in 0..ws.h {
                                for kx in 0..ws.w {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                                        let xi = x.index(n, ic, iy as usize, ix as usize);
                                        gx_ref[xi] += g * w.at(oc, ic, ky, kx);
                                        gw_ref[w.index(oc, ic, ky, kx)] += g * x.data()[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let gx_ref = Tensor::new(xs, gx_ref).unwrap();
        let gw_ref = Tensor::new(ws, gw_ref).unwrap();
        assert!(gx.max_abs_diff(&gx_ref) < 1e-9);
        assert!(gw.max_abs_diff(&gw_ref) < 1e-9);
    }

    #[test]
    fn rejects_even_kernels_and_channel_mismatch() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
        let w_even = Tensor::<f64>::zeros(Shape::new(1, 3, 2, 2));
        assert!(conv_fwd(&x, &w_even, 1, 0).is_err());
        let w_chan = Tensor::<f64>::zeros(Shape::new(1, 2, 3, 3));
        assert!(conv_fwd(&x, &w_chan, 1, 1).is_err());
    }
}
