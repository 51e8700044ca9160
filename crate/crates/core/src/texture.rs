//! The multi-scale texture transformer: a learnable texture extractor (LTE)
//! shared across query/key/value images, one exhaustive patch-matching pass
//! at the coarsest scale, texture transfer driven by the matched indices at
//! every scale, and residual soft-attention blending.
//!
//! Matching scores are plain tensors, never graph nodes: gradients reach the
//! LTE only through the transferred values (and losses that use LTE features
//! directly), not through the attention path.


use crate::error::{Error, Result};
use crate::graph::{Graph, Mounted, NodeId, ParamSet};
use crate::image::{build_resize_map, extract_patches, PatchGrid, ResizeKind};
use crate::init::register_conv;
use crate::map::SpatialMap;
use crate::scalar::{num, Scalar};
use crate::tensor::{Shape, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const MATCH_D: usize = 3;
pub const MATCH_STRIDE: usize = 1;
pub const NORM_EPS: f64 = 1e-8;

/// Channel widths of the three extractor stages, finest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LteWidths(pub [usize; 3]);

impl Default for LteWidths {
    fn default() -> Self {
        LteWidths([16, 32, 64])
    }
}

/// Register `<prefix>.stage{1,2,3}.{weight,bias}`; stage 1 keeps resolution,
/// stages 2 and 3 halve it.
pub fn register_lte<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    widths: LteWidths,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<()> {
    let [w1, w2, w3] = widths.0;
    register_conv(params, &format!("{prefix}.stage1"), w1, 3, 3, rng)?;
    register_conv(params, &format!("{prefix}.stage2"), w2, w1, 3, rng)?;
    register_conv(params, &format!("{prefix}.stage3"), w3, w2, 3, rng)?;
    Ok(())
}

fn conv_act<T: Scalar>(
    g: &mut Graph<T>,
    m: &Mounted<T>,
    x: NodeId,
    prefix: &str,
    stride: usize,
) -> Result<NodeId> {
    let w = m.node(&format!("{prefix}.weight"))?;
    let b = m.node(&format!("{prefix}.bias"))?;
    let y = g.conv2d(x, w, Some(b), stride, 1)?;
    g.leaky_relu(y, num::<T>(LEAKY_SLOPE))
}

/// Three feature maps at relative scales 1, 1/2, 1/4 of the input image.
pub fn lte_forward<T: Scalar>(
    g: &mut Graph<T>,
    m: &Mounted<T>,
    img: NodeId,
    prefix: &str,
) -> Result<[NodeId; 3]> {
    let s = g.shape(img);
    if s.c != 3 {
        return Err(Error::invalid("lte_forward", format!("expected 3 channels, got {s}")));
    }
    let s1 = conv_act(g, m, img, &format!("{prefix}.stage1"), 1)?;
    let s2 = conv_act(g, m, s1, &format!("{prefix}.stage2"), 2)?;
    let s3 = conv_act(g, m, s2, &format!("{prefix}.stage3"), 2)?;
    let c = g.shape(s3);
    if c.h < 4 || c.w < 4 {
        return Err(Error::invalid(
            "lte_forward",
            format!("input {}x{} leaves coarsest scale below 4x4", s.h, s.w),
        ));
    }
    Ok([s1, s2, s3])
}

// ---- matching ----

/// Relevance matrix plus the grids it was computed over; hard/soft fields
/// are filled by `hard_attention`.
#[derive(Debug, Clone)]
pub struct AttentionMaps<T> {
    /// (1, 1, num_q_patches, num_k_patches), every entry in [-1, 1].
    pub r: Tensor<T>,
    /// argmax_j r[i, j], ties to the smallest j; empty until hard_attention.
    pub h: Vec<u32>,
    pub q_grid: PatchGrid,
    pub k_grid: PatchGrid,
}

/// Rows of `patches` scaled to unit norm, with a floor of `NORM_EPS` on the
/// norm so flat patches stay zero instead of exploding.
fn normalize_rows<T: Scalar>(patches: &Tensor<T>) -> Tensor<T> {
    let s = patches.shape();
    let row = s.c * s.h * s.w;
    let mut data = patches.data().to_vec();
    let eps = num::<T>(NORM_EPS);
    for i in 0..s.n {
        let chunk = &mut data[i * row..(i + 1) * row];
        let mut sq = T::zero();
        for &v in chunk.iter() {
            sq += v * v;
        }
        let norm = sq.sqrt().max(eps);
        for v in chunk.iter_mut() {
            *v /= norm;
        }
    }
    Tensor::new(s, data).expect("same length")
}

/// R[i, j] = cosine similarity of q patch i and k patch j over d x d x c
/// windows, via one GEMM on the unit-normalized patch matrices.
pub fn compute_relevance<T: Scalar>(
    q_feat: &Tensor<T>,
    k_feat: &Tensor<T>,
    d: usize,
) -> Result<AttentionMaps<T>> {
    let (qs, ks) = (q_feat.shape(), k_feat.shape());
    if qs.c != ks.c {
        return Err(Error::shape("compute_relevance", qs, ks));
    }
    let (qp, q_grid) = extract_patches(q_feat, d, MATCH_STRIDE)?;
    let (kp, k_grid) = extract_patches(k_feat, d, MATCH_STRIDE)?;
    let qn = normalize_rows(&qp);
    let kn = normalize_rows(&kp);
    let (nq, nk) = (q_grid.count(), k_grid.count());
    let row = qs.c * d * d;

    let mut knt = vec![T::zero(); row * nk];
    for j in 0..nk {
        for r in 0..row {
            knt[r * nk + j] = kn.data()[j * row + r];
        }
    }
    let mut r = vec![T::zero(); nq * nk];
    T::gemm(nq, row, nk, qn.data(), &knt, &mut r);
    Ok(AttentionMaps {
        r: Tensor::new(Shape::new(1, 1, nq, nk), r)?,
        h: Vec::new(),
        q_grid,
        k_grid,
    })
}

/// Fill H with per-row argmax indices (ties to the smallest index).
pub fn hard_attention<T: Scalar>(maps: &mut AttentionMaps<T>) {
    let (nq, nk) = (maps.q_grid.count(), maps.k_grid.count());
    let mut h = Vec::with_capacity(nq);
    for i in 0..nq {
        let row = &maps.r.data()[i * nk..(i + 1) * nk];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        h.push(best as u32);
    }
    maps.h = h;
}

/// Per-patch confidence max_j R[i, j].
pub fn soft_scores<T: Scalar>(maps: &AttentionMaps<T>) -> Vec<T> {
    let (nq, nk) = (maps.q_grid.count(), maps.k_grid.count());
    (0..nq)
        .map(|i| {
            let row = &maps.r.data()[i * nk..(i + 1) * nk];
            row.iter().fold(row[0], |a, &b| if b > a { b } else { a })
        })
        .collect()
}

/// Fold the per-patch confidences to a 1-channel spatial map over the query
/// grid by coverage averaging.
pub fn soft_attention<T: Scalar>(maps: &AttentionMaps<T>, q_grid: &PatchGrid) -> Result<Tensor<T>> {
    let scores = soft_scores(maps);
    let vals = Tensor::new(Shape::new(1, 1, q_grid.ny, q_grid.nx), scores)?;
    q_grid.fold_map::<T>().apply(&vals)
}

/// Confidence map folded with scale geometry: patch d*r, stride r, origins
/// scaled by r, over a (q_grid.h * r) x (q_grid.w * r) plane.
pub fn soft_attention_at_scale<T: Scalar>(
    maps: &AttentionMaps<T>,
    r: usize,
) -> Result<Tensor<T>> {
    let g = &maps.q_grid;
    let scaled = PatchGrid::new(g.h * r, g.w * r, g.d * r, g.stride * r)?;
    if scaled.ny != g.ny || scaled.nx != g.nx {
        return Err(Error::invalid(
            "soft_attention",
            format!("scaled grid {}x{} != match grid {}x{}", scaled.ny, scaled.nx, g.ny, g.nx),
        ));
    }
    let scores = soft_scores(maps);
    let vals = Tensor::new(Shape::new(1, 1, g.ny, g.nx), scores)?;
    scaled.fold_map::<T>().apply(&vals)
}

// ---- transfer ----

/// Sparse gather-and-fold: output pixel (qy*r+dy, qx*r+dx) averages the
/// matched value pixels (hy*r+dy, hx*r+dx) over all covering query patches.
pub fn transfer_map<T: Scalar>(
    maps: &AttentionMaps<T>,
    v_h: usize,
    v_w: usize,
) -> Result<SpatialMap<T>> {
    if maps.h.len() != maps.q_grid.count() {
        return Err(Error::invalid("transfer_textures", "hard attention not computed"));
    }
    let q = &maps.q_grid;
    let k = &maps.k_grid;
    if v_h % q.h != 0 || v_w % q.w != 0 || v_h / q.h != v_w / q.w {
        return Err(Error::invalid(
            "transfer_textures",
            format!("value dims {v_h}x{v_w} are not an integer multiple of grid {}x{}", q.h, q.w),
        ));
    }
    let r = v_h / q.h;
    let pd = q.d * r;
    let mut map = SpatialMap::new(v_h, v_w, v_h, v_w);
    for i in 0..q.count() {
        let (qy, qx) = q.origin(i);
        let (hy, hx) = k.origin(maps.h[i] as usize);
        let (qy, qx) = (qy * r, qx * r);
        let (hy, hx) = (hy * r, hx * r);
        for dy in 0..pd {
            for dx in 0..pd {
                map.push((qy + dy) * v_w + qx + dx, (hy + dy) * v_w + hx + dx, T::one());
            }
        }
    }
    map.normalize_rows();
    Ok(map)
}

/// Gather the matched value patches and fold them into one map per scale.
/// Each v_feat must already have the target dims of its scale (an integer
/// multiple r of the matching grid); gradient flows into v_feats only.
pub fn transfer_textures<T: Scalar>(
    g: &mut Graph<T>,
    v_feats: &[NodeId],
    maps: &AttentionMaps<T>,
) -> Result<Vec<NodeId>> {
    v_feats
        .iter()
        .map(|&v| {
            let s = g.shape(v);
            let map = transfer_map(maps, s.h, s.w)?.shared();
            g.apply_map(v, map)
        })
        .collect()
}

// ---- blending ----

/// Tile a (1,1,h,w) map across `c` channels as a constant.
fn broadcast_gate<T: Scalar>(s_map: &Tensor<T>, n: usize, c: usize) -> Tensor<T> {
    let ms = s_map.shape();
    Tensor::from_fn(Shape::new(n, c, ms.h, ms.w), |_, _, y, x| s_map.at(0, 0, y, x))
}

/// out = f + conv(concat(f, t)) * S. With zero-initialized blend conv this
/// is the identity in f, so an untrained gate cannot corrupt the trunk.
pub fn blend<T: Scalar>(
    g: &mut Graph<T>,
    m: &Mounted<T>,
    f: NodeId,
    t: NodeId,
    s_map: &Tensor<T>,
    prefix: &str,
) -> Result<NodeId> {
    let fs = g.shape(f);
    let ts = g.shape(t);
    if fs.n != ts.n || fs.h != ts.h || fs.w != ts.w {
        return Err(Error::shape("blend", fs, ts));
    }
    let ms = s_map.shape();
    if ms.h != fs.h || ms.w != fs.w {
        return Err(Error::shape("blend", fs, ms));
    }
    let cat = g.concat_channels(&[f, t])?;
    let w = m.node(&format!("{prefix}.weight"))?;
    let b = m.node(&format!("{prefix}.bias"))?;
    let y = g.conv2d(cat, w, Some(b), 1, 1)?;
    let gate = g.leaf(broadcast_gate(s_map, fs.n, fs.c));
    let gated = g.mul(y, gate)?;
    g.add(f, gated)
}

// ---- full module ----

/// Everything the backbone needs at its injection points: transferred
/// features and confidence gates per scale, finest first.
pub struct TextureContext<T> {
    pub t: Vec<NodeId>,
    pub s: Vec<Tensor<T>>,
    pub maps: AttentionMaps<T>,
}

/// Runs the extractor on the input frame, the reference, and the
/// bicubic-degraded reference (all sharing weights), matches once at the
/// coarsest scale, and prepares per-scale transferred textures and gates.
pub fn texture_context<T: Scalar>(
    g: &mut Graph<T>,
    m: &Mounted<T>,
    input_img: NodeId,
    ref_img: NodeId,
    lte_prefix: &str,
) -> Result<TextureContext<T>> {
    let in_shape = g.shape(input_img);
    let ref_shape = g.shape(ref_img);
    if ref_shape.h % in_shape.h != 0 || ref_shape.w % in_shape.w != 0 {
        return Err(Error::shape("texture_context", in_shape, ref_shape));
    }
    if in_shape.h % 4 != 0 || in_shape.w % 4 != 0 {
        return Err(Error::invalid(
            "texture_context",
            "input dims must be multiples of 4 so the three scales nest exactly",
        ));
    }

    // K input: reference brought down to input resolution (bicubic).
    let down_map =
        build_resize_map::<T>(ref_shape.h, ref_shape.w, in_shape.h, in_shape.w, ResizeKind::Bicubic)
            .shared();
    let ref_down = g.apply_map(ref_img, down_map)?;

    let q = lte_forward(g, m, input_img, lte_prefix)?;
    let k = lte_forward(g, m, ref_down, lte_prefix)?;
    let v = lte_forward(g, m, ref_img, lte_prefix)?;

    // One matching pass at the coarsest scale, outside the graph.
    let mut maps = compute_relevance(g.value(q[2]), g.value(k[2]), MATCH_D)?;
    hard_attention(&mut maps);

    let mut t_nodes = Vec::with_capacity(3);
    let mut s_maps = Vec::with_capacity(3);
    for scale in 0..3 {
        let q_dims = g.shape(q[scale]);
        let v_dims = g.shape(v[scale]);
        // Value features resized to the scale's target dims before transfer.
        let v_src = if (v_dims.h, v_dims.w) == (q_dims.h, q_dims.w) {
            v[scale]
        } else {
            let rm = build_resize_map::<T>(v_dims.h, v_dims.w, q_dims.h, q_dims.w, ResizeKind::Bicubic)
                .shared();
            g.apply_map(v[scale], rm)?
        };
        let tmap = transfer_map(&maps, q_dims.h, q_dims.w)?.shared();
        t_nodes.push(g.apply_map(v_src, tmap)?);
        let r = q_dims.h / maps.q_grid.h;
        s_maps.push(soft_attention_at_scale(&maps, r)?);
    }
    Ok(TextureContext { t: t_nodes, s: s_maps, maps })
}

/// Blend caller-provided backbone features with the texture context at
/// every scale; blend conv parameters live at `<blend_prefix>.scale{1,2,3}`.
pub fn mstt_forward<T: Scalar>(
    g: &mut Graph<T>,
    m: &Mounted<T>,
    input_img: NodeId,
    ref_img: NodeId,
    f_scales: &[NodeId],
    lte_prefix: &str,
    blend_prefix: &str,
) -> Result<Vec<NodeId>> {
    if f_scales.len() != 3 {
        return Err(Error::invalid("mstt_forward", "expected 3 feature scales"));
    }
    let ctx = texture_context(g, m, input_img, ref_img, lte_prefix)?;
    (0..3)
        .map(|i| {
            blend(
                g,
                m,
                f_scales[i],
                ctx.t[i],
                &ctx.s[i],
                &format!("{blend_prefix}.scale{}", i + 1),
            )
        })
        .collect()
}
