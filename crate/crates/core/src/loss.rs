//! Training objective: L1 reconstruction, Wasserstein adversarial terms
//! with gradient penalty, and perceptual/texture terms computed in fixed
//! random feature spaces.
//!
//! The perceptual and texture extractors are frozen conv stacks drawn from
//! named seeds. They stand in for pretrained networks: same loss structure
//! and gradient paths, no external weight files. Externally trained weights
//! can be dropped in through `FeatureExtractor::from_entries`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mounted, NodeId, ParamSet};
use crate::image::{build_resize_map, ResizeKind};
use crate::init::register_conv;
use crate::io::checkpoint::state_fingerprint;
use crate::scalar::{num, Scalar};
use crate::tensor::Tensor;
use crate::texture::{lte_forward, LEAKY_SLOPE};

pub const PER_EXTRACTOR_SEED: u64 = 0x7065_7263;
pub const TEX_EXTRACTOR_SEED: u64 = 0x7465_7863;
pub const METRIC_EXTRACTOR_SEED: u64 = 0x6c70_7363;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub adv: f64,
    pub per: f64,
    pub tex: f64,
    pub gp: f64,
}

impl LossWeights {
    pub fn paper() -> Self {
        LossWeights { rec: 1.0, adv: 5e-4, per: 1e-2, tex: 1e-2, gp: 10.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rec < 0.0 || self.adv < 0.0 || self.per < 0.0 || self.tex < 0.0 || self.gp < 0.0 {
            return Err(Error::invalid("loss_weights", "weights must be non-negative"));
        }
        Ok(())
    }
}

// ---- frozen feature extractors ----

const EXTRACTOR_WIDTHS: [usize; 4] = [16, 32, 64, 64];
const EXTRACTOR_STRIDES: [usize; 4] = [1, 2, 2, 2];

/// A fixed 4-layer strided conv stack. Parameters are generated once from
/// a seed and never optimized; each conv output is a tap layer.
pub struct FeatureExtractor<T> {
    params: ParamSet<T>,
    prefix: String,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn from_seed(prefix: &str, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ic = 3;
        for (i, &oc) in EXTRACTOR_WIDTHS.iter().enumerate() {
            register_conv(&mut params, &format!("{prefix}.conv{}", i + 1), oc, ic, 3, &mut rng)
                .expect("extractor names are unique");
            ic = oc;
        }
        FeatureExtractor { params, prefix: prefix.to_string() }
    }

    /// Swap in externally supplied weights with the same layer names.
    pub fn from_entries(prefix: &str, entries: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut ex = Self::from_seed(prefix, 0);
        ex.params.load_entries(entries)?;
        Ok(ex)
    }

    pub fn fingerprint(&self) -> u64 {
        state_fingerprint(&self.params.entries())
    }

    /// All four tap layers, coarsest last.
    pub fn forward(&self, g: &mut Graph<T>, x: NodeId) -> Result<Vec<NodeId>> {
        if g.shape(x).c != 3 {
            return Err(Error::invalid("feature_extractor", "expected a 3-channel image"));
        }
        let mounts = self.params.mount(g);
        let m = Mounted::new(&self.params, &mounts);
        let mut taps = Vec::with_capacity(4);
        let mut cur = x;
        for (i, &stride) in EXTRACTOR_STRIDES.iter().enumerate() {
            let w = m.node(&format!("{}.conv{}.weight", self.prefix, i + 1))?;
            let b = m.node(&format!("{}.conv{}.bias", self.prefix, i + 1))?;
            let y = g.conv2d(cur, w, Some(b), stride, 1)?;
            cur = g.leaky_relu(y, num::<T>(LEAKY_SLOPE))?;
            taps.push(cur);
        }
        Ok(taps)
    }
}

// ---- discriminator ----

const D_WIDTHS: [usize; 4] = [32, 64, 128, 128];
const D_STRIDES: [usize; 4] = [1, 2, 2, 2];

/// Conv stack restricted to ops with well-defined second derivatives
/// (conv, leaky relu, means); no normalization layers.
pub fn register_discriminator<T: Scalar>(
    params: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut ic = 3;
    for (i, &oc) in D_WIDTHS.iter().enumerate() {
        register_conv(params, &format!("d.conv{}", i + 1), oc, ic, 3, rng)?;
        ic = oc;
    }
    register_conv(params, "d.out", 1, ic, 3, rng)
}

/// Per-sample critic scores, shape (n, 1, 1, 1).
pub fn discriminator_forward<T: Scalar>(
    g: &mut Graph<T>,
    m: &Mounted<T>,
    x: NodeId,
) -> Result<NodeId> {
    if g.shape(x).c != 3 {
        return Err(Error::invalid("discriminator", "expected a 3-channel image"));
    }
    let mut cur = x;
    for (i, &stride) in D_STRIDES.iter().enumerate() {
        let w = m.node(&format!("d.conv{}.weight", i + 1))?;
        let b = m.node(&format!("d.conv{}.bias", i + 1))?;
        let y = g.conv2d(cur, w, Some(b), stride, 1)?;
        cur = g.leaky_relu(y, num::<T>(LEAKY_SLOPE))?;
    }
    let w = m.node("d.out.weight")?;
    let b = m.node("d.out.bias")?;
    let y = g.conv2d(cur, w, Some(b), 1, 1)?;
    Ok(g.spatial_mean(y))
}

// ---- losses ----

/// Mean absolute difference.
pub fn loss_rec<T: Scalar>(g: &mut Graph<T>, out: NodeId, gt: NodeId) -> Result<NodeId> {
    let d = g.sub(out, gt)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// x_hat = u*real + (1-u)*fake with one coefficient per batch element.
pub fn interpolate<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>, u: &[f64]) -> Result<Tensor<T>> {
    let s = real.shape();
    if s != fake.shape() {
        return Err(Error::shape("interpolate", s, fake.shape()));
    }
    if u.len() != s.n {
        return Err(Error::invalid("interpolate", "one coefficient per batch element"));
    }
    Ok(Tensor::from_fn(s, |n, c, y, x| {
        let un = num::<T>(u[n]);
        un * real.at(n, c, y, x) + (num::<T>(1.0) - un) * fake.at(n, c, y, x)
    }))
}

/// Mean over the batch of (||grad_x D(x_hat)||_2 - 1)^2. The gradient is a
/// graph node, so the result stays differentiable in D's parameters.
pub fn gradient_penalty<T, F>(g: &mut Graph<T>, x_hat: NodeId, d: &F) -> Result<NodeId>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, NodeId) -> Result<NodeId>,
{
    let scores = d(g, x_hat)?;
    let total = g.sum(scores);
    let grad = g.input_gradient(total, x_hat)?;
    let sq = g.square(grad);
    let per_sample = g.spatial_sum(sq);
    let norm = g.sqrt(per_sample);
    let miss = g.sub_const(norm, num::<T>(1.0));
    let miss2 = g.square(miss);
    Ok(g.mean(miss2))
}

pub struct DLoss {
    pub total: NodeId,
    pub wasserstein: NodeId,
    pub penalty: NodeId,
}

/// L_D = E[D(fake)] - E[D(real)] + gp_lambda * GP(x_hat).
pub fn loss_d<T, F>(
    g: &mut Graph<T>,
    x_real: NodeId,
    x_fake: NodeId,
    x_hat: NodeId,
    gp_lambda: f64,
    d: &F,
) -> Result<DLoss>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, NodeId) -> Result<NodeId>,
{
    let real_scores = d(g, x_real)?;
    let fake_scores = d(g, x_fake)?;
    let e_real = g.mean(real_scores);
    let e_fake = g.mean(fake_scores);
    let wasserstein = g.sub(e_fake, e_real)?;
    let penalty = gradient_penalty(g, x_hat, d)?;
    let scaled = g.scale(penalty, num::<T>(gp_lambda));
    let total = g.add(wasserstein, scaled)?;
    Ok(DLoss { total, wasserstein, penalty })
}

/// L_adv = -E[D(fake)], with the fake staying in-graph so generator
/// parameters receive gradients through D.
pub fn loss_adv<T, F>(g: &mut Graph<T>, fake: NodeId, d: &F) -> Result<NodeId>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, NodeId) -> Result<NodeId>,
{
    let scores = d(g, fake)?;
    let e = g.mean(scores);
    Ok(g.scale(e, num::<T>(-1.0)))
}

/// Perceptual term: fixed-feature distance between output and ground truth
/// plus the distance between the output's own texture features (extracted
/// at input resolution) and the transferred features t3.
pub fn loss_per<T: Scalar>(
    g: &mut Graph<T>,
    m: &Mounted<T>,
    per_ex: &FeatureExtractor<T>,
    i_out: NodeId,
    i_gt: NodeId,
    t3: NodeId,
    lte_prefix: &str,
) -> Result<NodeId> {
    if g.shape(i_out) != g.shape(i_gt) {
        return Err(Error::shape("loss_per", g.shape(i_out), g.shape(i_gt)));
    }
    let f_out = *per_ex.forward(g, i_out)?.last().unwrap();
    let f_gt = *per_ex.forward(g, i_gt)?.last().unwrap();
    let d1 = g.sub(f_out, f_gt)?;
    let sq1 = g.square(d1);
    let term1 = g.mean(sq1);

    let out_s = g.shape(i_out);
    let t_s = g.shape(t3);
    let (in_h, in_w) = (4 * t_s.h, 4 * t_s.w);
    let down = if (out_s.h, out_s.w) == (in_h, in_w) {
        i_out
    } else {
        let map = build_resize_map::<T>(out_s.h, out_s.w, in_h, in_w, ResizeKind::Bicubic).shared();
        g.apply_map(i_out, map)?
    };
    let f_lte = lte_forward(g, m, down, lte_prefix)?[2];
    if g.shape(f_lte) != t_s {
        return Err(Error::shape("loss_per", g.shape(f_lte), t_s));
    }
    let d2 = g.sub(f_lte, t3)?;
    let sq2 = g.square(d2);
    let term2 = g.mean(sq2);
    g.add(term1, term2)
}

/// Texture term: squared distance in the frozen texture feature space.
pub fn loss_tex<T: Scalar>(
    g: &mut Graph<T>,
    tex_ex: &FeatureExtractor<T>,
    i_out: NodeId,
    i_gt: NodeId,
) -> Result<NodeId> {
    if g.shape(i_out) != g.shape(i_gt) {
        return Err(Error::shape("loss_tex", g.shape(i_out), g.shape(i_gt)));
    }
    let f_out = *tex_ex.forward(g, i_out)?.last().unwrap();
    let f_gt = *tex_ex.forward(g, i_gt)?.last().unwrap();
    let d = g.sub(f_out, f_gt)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

pub struct LossParts {
    pub rec: NodeId,
    pub adv: Option<NodeId>,
    pub per: Option<NodeId>,
    pub tex: Option<NodeId>,
}

/// Weighted sum of whatever parts are present; during warmup only the
/// reconstruction term exists.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    parts: &LossParts,
    weights: &LossWeights,
) -> Result<NodeId> {
    let mut total = g.scale(parts.rec, num::<T>(weights.rec));
    for (node, w) in [
        (parts.adv, weights.adv),
        (parts.per, weights.per),
        (parts.tex, weights.tex),
    ] {
        if let Some(n) = node {
            let scaled = g.scale(n, num::<T>(w));
            total = g.add(total, scaled)?;
        }
    }
    Ok(total)
}
