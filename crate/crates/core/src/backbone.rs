//! The generator: a temporal-window stem, stacked residual blocks with
//! texture blending injected at configured depths, multi-point feature
//! fusion, and a sub-pixel upscaling head.
//!
//! Injection indices map to texture scales finest-first: the first
//! injection blends at full feature resolution, later ones reach coarser
//! grids through stride-2 convs and return through pixel shuffles.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mounted, NodeId, ParamSet};
use crate::init::{register_conv, register_conv_zero};
use crate::scalar::{num, Scalar};
use crate::tensor::{Shape, Tensor};
use crate::texture::{register_lte, texture_context, LteWidths, TextureContext, LEAKY_SLOPE};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Temporal radius k; the stem consumes 2k+1 frames.
    pub temporal_radius: usize,
    pub base_channels: usize,
    pub blocks: usize,
    /// Post-block indices (1-based) that receive texture injections,
    /// mapped in order to scales 1 (fine) through 3 (coarse).
    pub injections: Vec<usize>,
    /// Power of two, realized as repeated x2 pixel shuffles.
    pub upscale: usize,
    pub lte_widths: LteWidths,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            temporal_radius: 2,
            base_channels: 32,
            blocks: 8,
            injections: vec![2, 4, 6],
            upscale: 4,
            lte_widths: LteWidths::default(),
        }
    }
}

impl BackboneConfig {
    pub fn window_len(&self) -> usize {
        2 * self.temporal_radius + 1
    }

    pub fn stem_in_channels(&self) -> usize {
        3 * self.window_len()
    }

    fn upscale_stages(&self) -> usize {
        self.upscale.trailing_zeros() as usize
    }

    fn fusion_taps(&self) -> usize {
        2 + self.injections.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.blocks == 0 {
            return Err(Error::invalid("backbone_config", "zero-sized backbone"));
        }
        if !self.upscale.is_power_of_two() {
            return Err(Error::invalid("backbone_config", "upscale must be a power of two"));
        }
        if self.injections.len() > 3 {
            return Err(Error::invalid("backbone_config", "at most three injection scales"));
        }
        for (i, &b) in self.injections.iter().enumerate() {
            if b == 0 || b >= self.blocks {
                return Err(Error::invalid(
                    "backbone_config",
                    "injection indices must lie strictly inside the block stack",
                ));
            }
            if i > 0 && self.injections[i - 1] >= b {
                return Err(Error::invalid(
                    "backbone_config",
                    "injection indices must be strictly increasing",
                ));
            }
        }
        Ok(())
    }
}

/// Registers every generator parameter under stable names. Blend convs are
/// zero so the untrained generator ignores the reference; everything else
/// is fan-in uniform from `rng`.
pub fn register_generator<T: Scalar>(
    params: &mut ParamSet<T>,
    cfg: &BackboneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let c = cfg.base_channels;
    register_lte(params, "lte", cfg.lte_widths, rng)?;
    register_conv(params, "stem", c, cfg.stem_in_channels(), 3, rng)?;
    for b in 1..=cfg.blocks {
        register_conv(params, &format!("block{b}.conv1"), c, c, 3, rng)?;
        register_conv(params, &format!("block{b}.conv2"), c, c, 3, rng)?;
    }
    for (i, _) in cfg.injections.iter().enumerate() {
        let scale = i + 1;
        for j in 1..scale {
            register_conv(params, &format!("inj{scale}.down{j}"), c, c, 3, rng)?;
        }
        register_conv_zero(params, &format!("blend.scale{scale}"), c, c + cfg.lte_widths.0[i], 3)?;
        for j in 1..scale {
            register_conv(params, &format!("inj{scale}.up{j}"), 4 * c, c, 3, rng)?;
        }
    }
    register_conv(params, "fuse", c, cfg.fusion_taps() * c, 1, rng)?;
    for j in 1..=cfg.upscale_stages() {
        register_conv(params, &format!("head.up{j}"), 4 * c, c, 3, rng)?;
    }
    register_conv(params, "head.out", 3, c, 3, rng)?;
    Ok(())
}

/// Closed-form scalar count of `register_generator`'s output.
pub fn generator_param_count(cfg: &BackboneConfig) -> usize {
    let conv = |oc: usize, ic: usize, k: usize| oc * ic * k * k + oc;
    let c = cfg.base_channels;
    let w = cfg.lte_widths.0;
    let mut total = conv(w[0], 3, 3) + conv(w[1], w[0], 3) + conv(w[2], w[1], 3);
    total += conv(c, cfg.stem_in_channels(), 3);
    total += cfg.blocks * 2 * conv(c, c, 3);
    for (i, _) in cfg.injections.iter().enumerate() {
        let scale = i + 1;
        total += (scale - 1) * (conv(c, c, 3) + conv(4 * c, c, 3));
        total += conv(c, c + w[i], 3);
    }
    total += conv(c, cfg.fusion_taps() * c, 1);
    total += cfg.upscale_stages() * conv(4 * c, c, 3);
    total += conv(3, c, 3);
    total
}

fn conv_leaky<T: Scalar>(
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

/// x + conv2(leaky(conv1(x))), shape preserved.
pub fn residual_block<T: Scalar>(
    g: &mut Graph<T>,
    m: &Mounted<T>,
    x: NodeId,
    prefix: &str,
) -> Result<NodeId> {
    let a = conv_leaky(g, m, x, &format!("{prefix}.conv1"), 1)?;
    let w2 = m.node(&format!("{prefix}.conv2.weight"))?;
    let b2 = m.node(&format!("{prefix}.conv2.bias"))?;
    let z = g.conv2d(a, w2, Some(b2), 1, 1)?;
    g.add(x, z)
}

/// One conv + activation taking the stacked frame window to base channels.
pub fn stem<T: Scalar>(
    g: &mut Graph<T>,
    m: &Mounted<T>,
    cfg: &BackboneConfig,
    window: NodeId,
) -> Result<NodeId> {
    let shape = g.shape(window);
    if shape.c != cfg.stem_in_channels() {
        return Err(Error::invalid(
            "stem",
            format!("expected {} window channels, got {}", cfg.stem_in_channels(), shape.c),
        ));
    }
    conv_leaky(g, m, window, "stem", 1)
}

fn inject<T: Scalar>(
    g: &mut Graph<T>,
    m: &Mounted<T>,
    x: NodeId,
    scale: usize,
    ctx: &TextureContext<T>,
) -> Result<NodeId> {
    let mut d = x;
    for j in 1..scale {
        d = conv_leaky(g, m, d, &format!("inj{scale}.down{j}"), 2)?;
    }
    let blended = crate::texture::blend(
        g,
        m,
        d,
        ctx.t[scale - 1],
        &ctx.s[scale - 1],
        &format!("blend.scale{scale}"),
    )?;
    if scale == 1 {
        return Ok(blended);
    }
    let mut u = blended;
    for j in 1..scale {
        let w = m.node(&format!("inj{scale}.up{j}.weight"))?;
        let b = m.node(&format!("inj{scale}.up{j}.bias"))?;
        let y = g.conv2d(u, w, Some(b), 1, 1)?;
        let s = g.pixel_shuffle(y, 2)?;
        u = g.leaky_relu(s, num::<T>(LEAKY_SLOPE))?;
    }
    g.add(x, u)
}

pub struct GeneratorOutput<T> {
    pub out: NodeId,
    /// Present whenever the config has injection points; the loss side
    /// reads transferred features from here.
    pub ctx: Option<TextureContext<T>>,
}

/// Full generator pass for a single window (n = 1). Output is unclamped;
/// inference clamps to [0, 1] after the fact.
pub fn generator_forward<T: Scalar>(
    g: &mut Graph<T>,
    m: &Mounted<T>,
    cfg: &BackboneConfig,
    window: NodeId,
    ref_img: NodeId,
) -> Result<GeneratorOutput<T>> {
    cfg.validate()?;
    let ws = g.shape(window);
    let rs = g.shape(ref_img);
    if ws.n != 1 {
        return Err(Error::invalid("generator_forward", "one window at a time"));
    }
    if ws.h % 4 != 0 || ws.w % 4 != 0 || ws.h < 16 || ws.w < 16 {
        return Err(Error::invalid(
            "generator_forward",
            "window dims must be multiples of 4 and at least 16x16",
        ));
    }
    if rs.h != cfg.upscale * ws.h || rs.w != cfg.upscale * ws.w || rs.c != 3 {
        return Err(Error::shape("generator_forward", ws, rs));
    }

    let ctx = if cfg.injections.is_empty() {
        None
    } else {
        let k = cfg.temporal_radius;
        let center = g.slice_channels(window, 3 * k, 3 * k + 3)?;
        Some(texture_context(g, m, center, ref_img, "lte")?)
    };

    let mut x = stem(g, m, cfg, window)?;
    let mut taps = vec![x];
    let mut next_injection = 0;
    for b in 1..=cfg.blocks {
        x = residual_block(g, m, x, &format!("block{b}"))?;
        if next_injection < cfg.injections.len() && cfg.injections[next_injection] == b {
            let scale = next_injection + 1;
            x = inject(g, m, x, scale, ctx.as_ref().unwrap())?;
            taps.push(x);
            next_injection += 1;
        }
    }
    taps.push(x);

    let cat = g.concat_channels(&taps)?;
    let wf = m.node("fuse.weight")?;
    let bf = m.node("fuse.bias")?;
    let fused = g.conv2d(cat, wf, Some(bf), 1, 0)?;
    let mut y = g.leaky_relu(fused, num::<T>(LEAKY_SLOPE))?;

    for j in 1..=cfg.upscale_stages() {
        let w = m.node(&format!("head.up{j}.weight"))?;
        let b = m.node(&format!("head.up{j}.bias"))?;
        let conv = g.conv2d(y, w, Some(b), 1, 1)?;
        let shuffled = g.pixel_shuffle(conv, 2)?;
        y = g.leaky_relu(shuffled, num::<T>(LEAKY_SLOPE))?;
    }
    let wo = m.node("head.out.weight")?;
    let bo = m.node("head.out.bias")?;
    let out = g.conv2d(y, wo, Some(bo), 1, 1)?;
    Ok(GeneratorOutput { out, ctx })
}

/// Stacks frames t-k ..= t+k along channels, replicating clip edges.
pub fn assemble_window<T: Scalar>(frames: &[Tensor<T>], t: usize, k: usize) -> Result<Tensor<T>> {
    if frames.is_empty() {
        return Err(Error::invalid("assemble_window", "empty clip"));
    }
    if t >= frames.len() {
        return Err(Error::invalid("assemble_window", "frame index out of range"));
    }
    let s = frames[0].shape();
    for f in frames {
        if f.shape() != s || s.n != 1 || s.c != 3 {
            return Err(Error::shape("assemble_window", s, f.shape()));
        }
    }
    let len = 2 * k + 1;
    let plane = s.h * s.w;
    let mut data = Vec::with_capacity(len * 3 * plane);
    for offset in 0..len {
        let idx = (t + offset).saturating_sub(k).min(frames.len() - 1);
        data.extend_from_slice(frames[idx].data());
    }
    Tensor::new(Shape::new(1, 3 * len, s.h, s.w), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grad_check;
    use crate::io::checkpoint::{load_checkpoint, save_checkpoint};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(0.0..1.0))
    }

    fn desk_like(base: usize, blocks: usize) -> BackboneConfig {
        BackboneConfig {
            temporal_radius: 1,
            base_channels: base,
            blocks,
            injections: vec![1, 2, 3],
            upscale: 4,
            lte_widths: LteWidths::default(),
        }
    }

    fn built(cfg: &BackboneConfig, seed: u64) -> ParamSet<f64> {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_generator(&mut params, cfg, &mut rng).unwrap();
        params
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        let mut c = BackboneConfig::default();
        c.injections = vec![2, 2];
        assert!(c.validate().is_err());
        c.injections = vec![8];
        assert!(c.validate().is_err());
        c.injections = vec![2];
        c.upscale = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn stem_channel_contract() {
        let cfg = BackboneConfig { temporal_radius: 0, injections: vec![], ..desk_like(4, 1) };
        let params = built(&cfg, 1);
        let mut g = Graph::new();
        let mounts = params.mount(&mut g);
        let m = Mounted::new(&params, &mounts);
        let x3 = g.leaf(rand_tensor(Shape::new(1, 3, 16, 16), 2));
        let s = stem(&mut g, &m, &cfg, x3).unwrap();
        assert_eq!(g.shape(s), Shape::new(1, 4, 16, 16));
        let x15 = g.leaf(rand_tensor(Shape::new(1, 15, 16, 16), 3));
        assert!(stem(&mut g, &m, &cfg, x15).is_err());
    }

    #[test]
    fn window_assembly_replicates_edges() {
        let frames: Vec<Tensor<f64>> =
            (0..3).map(|i| rand_tensor(Shape::new(1, 3, 4, 4), 10 + i)).collect();
        let w = assemble_window(&frames, 0, 2).unwrap();
        assert_eq!(w.shape(), Shape::new(1, 15, 4, 4));
        let plane = 3 * 16;
        for (slot, want) in [0usize, 0, 0, 1, 2].iter().enumerate() {
            assert_eq!(
                &w.data()[slot * plane..(slot + 1) * plane],
                frames[*want].data(),
                "slot {slot}"
            );
        }
        let w_end = assemble_window(&frames, 2, 2).unwrap();
        for (slot, want) in [0usize, 1, 2, 2, 2].iter().enumerate() {
            assert_eq!(&w_end.data()[slot * plane..(slot + 1) * plane], frames[*want].data());
        }
        assert!(assemble_window(&frames, 3, 2).is_err());
    }

    #[test]
    fn residual_block_identity_and_shape() {
        let cfg = BackboneConfig { injections: vec![], ..desk_like(32, 1) };
        let mut params = built(&cfg, 4);
        for name in ["block1.conv2.weight", "block1.conv2.bias"] {
            let id = params.id_of(name).unwrap();
            let shape = params.get(id).value.shape();
            params.set_value(id, Tensor::zeros(shape)).unwrap();
        }
        let mut g = Graph::new();
        let mounts = params.mount(&mut g);
        let m = Mounted::new(&params, &mounts);
        let x_t = rand_tensor(Shape::new(1, 32, 24, 24), 5);
        let x = g.leaf(x_t.clone());
        let y = residual_block(&mut g, &m, x, "block1").unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 32, 24, 24));
        assert!(g.value(y).bit_eq(&x_t));
    }

    #[test]
    fn residual_block_gradients_match_finite_differences() {
        let report = grad_check(
            &|g, ids| {
                let params = built(&BackboneConfig { injections: vec![], ..desk_like(3, 1) }, 6);
                let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
                let m = Mounted::new_by_names(&names, &ids[1..]);
                let y = residual_block(g, &m, ids[0], "block1")?;
                let sq = g.square(y);
                Ok(g.mean(sq))
            },
            &{
                let params = built(&BackboneConfig { injections: vec![], ..desk_like(3, 1) }, 6);
                let mut inputs = vec![rand_tensor(Shape::new(1, 3, 6, 6), 7)];
                inputs.extend(params.iter().map(|p| p.value.clone()));
                inputs
            },
            1e-5,
            0,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn generator_shapes_and_param_count() {
        let cfg = desk_like(8, 4);
        let params = built(&cfg, 8);
        assert_eq!(params.scalar_count(), generator_param_count(&cfg));
        assert_eq!(ParamSet::<f64>::new().scalar_count(), 0);

        let mut g = Graph::new();
        let mounts = params.mount(&mut g);
        let m = Mounted::new(&params, &mounts);
        let window = g.leaf(rand_tensor(Shape::new(1, 9, 24, 24), 9));
        let r = g.leaf(rand_tensor(Shape::new(1, 3, 96, 96), 10));
        let out = generator_forward(&mut g, &m, &cfg, window, r).unwrap();
        assert_eq!(g.shape(out.out), Shape::new(1, 3, 96, 96));
        assert!(out.ctx.is_some());

        let bad_ref = g.leaf(rand_tensor(Shape::new(1, 3, 48, 48), 11));
        assert!(generator_forward(&mut g, &m, &cfg, window, bad_ref).is_err());
    }

    #[test]
    fn zero_params_give_constant_head_bias() {
        let cfg = desk_like(4, 4);
        let mut params = built(&cfg, 12);
        let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
        for name in &names {
            let id = params.id_of(name).unwrap();
            let shape = params.get(id).value.shape();
            params.set_value(id, Tensor::zeros(shape)).unwrap();
        }
        let bias = Tensor::new(Shape::new(1, 1, 1, 3), vec![0.25, -0.5, 0.125]).unwrap();
        let id = params.id_of("head.out.bias").unwrap();
        params.set_value(id, bias).unwrap();

        let mut g = Graph::new();
        let mounts = params.mount(&mut g);
        let m = Mounted::new(&params, &mounts);
        let window = g.leaf(rand_tensor(Shape::new(1, 9, 16, 16), 13));
        let r = g.leaf(rand_tensor(Shape::new(1, 3, 64, 64), 14));
        let out = generator_forward(&mut g, &m, &cfg, window, r).unwrap();
        let v = g.value(out.out);
        for c in 0..3 {
            let want = [0.25, -0.5, 0.125][c];
            for y in 0..64 {
                for x in 0..64 {
                    assert_eq!(v.at(0, c, y, x), want);
                }
            }
        }
    }

    #[test]
    fn zero_blend_makes_output_reference_independent() {
        let cfg = desk_like(6, 4);
        let params = built(&cfg, 15);
        let window_t = rand_tensor(Shape::new(1, 9, 16, 16), 16);
        let run = |ref_seed: u64| {
            let mut g = Graph::new();
            let mounts = params.mount(&mut g);
            let m = Mounted::new(&params, &mounts);
            let window = g.leaf(window_t.clone());
            let r = g.leaf(rand_tensor(Shape::new(1, 3, 64, 64), ref_seed));
            let out = generator_forward(&mut g, &m, &cfg, window, r).unwrap();
            g.value(out.out).clone()
        };
        assert!(run(17).bit_eq(&run(18)));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_forward() {
        // The checkpoint payload is f32, so bit-exact round-tripping is an
        // f32 property.
        let cfg = desk_like(4, 4);
        let build32 = |seed: u64| {
            let mut params = ParamSet::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            register_generator(&mut params, &cfg, &mut rng).unwrap();
            params
        };
        let params = build32(19);
        let dir = std::env::temp_dir().join(format!("stran_bb_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("gen.stck");
        save_checkpoint(&path, &params.entries()).unwrap();
        let mut reloaded = build32(999);
        reloaded.load_entries(&load_checkpoint::<f32>(&path).unwrap()).unwrap();
        std::fs::remove_dir_all(&dir).ok();

        let window_t = rand_tensor(Shape::new(1, 9, 16, 16), 20).cast::<f32>();
        let ref_t = rand_tensor(Shape::new(1, 3, 64, 64), 21).cast::<f32>();
        let run = |p: &ParamSet<f32>| {
            let mut g = Graph::new();
            let mounts = p.mount(&mut g);
            let m = Mounted::new(p, &mounts);
            let window = g.leaf(window_t.clone());
            let r = g.leaf(ref_t.clone());
            let out = generator_forward(&mut g, &m, &cfg, window, r).unwrap();
            g.value(out.out).clone()
        };
        assert!(run(&params).bit_eq(&run(&reloaded)));
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        // Self-reference at 1x keeps the out-of-graph attention maps
        // locally constant (cos(x, x) == 1 for any perturbation reaching Q
        // and K identically), so central differences see exactly the
        // gradients the tape computes.
        let cfg = BackboneConfig {
            temporal_radius: 1,
            base_channels: 4,
            blocks: 4,
            injections: vec![1, 2, 3],
            upscale: 1,
            lte_widths: LteWidths::default(),
        };
        let params = built(&cfg, 22);
        let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
        let n_params = names.len();
        let center = rand_tensor(Shape::new(1, 3, 16, 16), 23);
        let window = {
            let frames = vec![center.clone(); 3];
            assemble_window(&frames, 1, 1).unwrap()
        };
        let target = rand_tensor(Shape::new(1, 3, 16, 16), 24);
        let mut inputs: Vec<Tensor<f64>> = params.iter().map(|p| p.value.clone()).collect();
        inputs.push(window);

        let report = grad_check(
            &|g, ids| {
                let m = Mounted::new_by_names(&names, &ids[..n_params]);
                let win = ids[n_params];
                let k = 1;
                let r#ref = g.slice_channels(win, 3 * k, 3 * k + 3)?;
                let out = generator_forward(g, &m, &cfg, win, r#ref)?;
                let t = g.leaf(target.clone());
                let d = g.sub(out.out, t)?;
                let a = g.abs(d);
                Ok(g.mean(a))
            },
            &inputs,
            1e-5,
            48,
            41,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "rel err {}", report.max_rel_err);
    }
}
