//! Parameter initialization: fan-in-scaled uniform for conv layers, drawn
//! from a caller-owned seeded stream so model construction is reproducible.
//! Samples are taken in f64 and converted, which keeps the stream identical
//! across scalar types.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::ParamSet;
use crate::scalar::{num, Scalar};
use crate::tensor::{Shape, Tensor};

pub fn uniform_conv<T: Scalar>(
    rng: &mut ChaCha8Rng,
    oc: usize,
    ic: usize,
    k: usize,
) -> (Tensor<T>, Tensor<T>) {
    let bound = 1.0 / ((ic * k * k) as f64).sqrt();
    let weight = Tensor::from_fn(Shape::new(oc, ic, k, k), |_, _, _, _| {
        num::<T>(rng.gen_range(-bound..bound))
    });
    let bias = Tensor::from_fn(Shape::new(1, 1, 1, oc), |_, _, _, _| {
        num::<T>(rng.gen_range(-bound..bound))
    });
    (weight, bias)
}

/// Register `<prefix>.weight` and `<prefix>.bias` with fan-in uniform init.
pub fn register_conv<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    oc: usize,
    ic: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let (w, b) = uniform_conv(rng, oc, ic, k);
    params.add(format!("{prefix}.weight"), w)?;
    params.add(format!("{prefix}.bias"), b)?;
    Ok(())
}

/// Register a conv whose weight and bias start at zero (gates that must
/// open only through training).
pub fn register_conv_zero<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    oc: usize,
    ic: usize,
    k: usize,
) -> Result<()> {
    params.add(format!("{prefix}.weight"), Tensor::zeros(Shape::new(oc, ic, k, k)))?;
    params.add(format!("{prefix}.bias"), Tensor::zeros(Shape::new(1, 1, 1, oc)))?;
    Ok(())
}
