//! The training step: one critic update (past warmup) followed by one
//! generator update on the weighted objective. Samples run as independent
//! single-window graphs so each gets its own reference and attention maps;
//! gradients are averaged across the batch before the optimizer step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{generator_forward, register_generator, BackboneConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mounted, NodeId, ParamSet};
use crate::loss::{
    discriminator_forward, interpolate, loss_adv, loss_d, loss_per, loss_rec, loss_tex,
    register_discriminator, total_loss, FeatureExtractor, LossParts, LossWeights,
    PER_EXTRACTOR_SEED, TEX_EXTRACTOR_SEED,
};
use crate::optim::{adam_step, AdamState, TrainSchedule};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One training example: a pre-assembled frame window, its ground-truth
/// frame, and the clip's reference image.
#[derive(Debug, Clone)]
pub struct SampleTriple<T> {
    pub window: Tensor<T>,
    pub target: Tensor<T>,
    pub reference: Tensor<T>,
}

/// Streams derived from one base seed stay decoupled across uses.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut x = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        x ^= t.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x ^= x >> 27;
    }
    ChaCha8Rng::seed_from_u64(x)
}

pub struct TrainState<T> {
    pub cfg: BackboneConfig,
    pub weights: LossWeights,
    pub schedule: TrainSchedule,
    pub seed: u64,
    pub g_params: ParamSet<T>,
    pub d_params: ParamSet<T>,
    pub g_opt: AdamState<T>,
    pub d_opt: AdamState<T>,
    pub per_ex: FeatureExtractor<T>,
    pub tex_ex: FeatureExtractor<T>,
    /// Last fully completed epoch (0 before training).
    pub epoch: usize,
    /// Global generator steps taken.
    pub step: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(
        cfg: BackboneConfig,
        weights: LossWeights,
        schedule: TrainSchedule,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        schedule.validate()?;
        let mut g_params = ParamSet::new();
        register_generator(&mut g_params, &cfg, &mut derive_rng(seed, &[0x47]))?;
        let mut d_params = ParamSet::new();
        register_discriminator(&mut d_params, &mut derive_rng(seed, &[0x44]))?;
        let g_opt = AdamState::new(&g_params);
        let d_opt = AdamState::new(&d_params);
        Ok(TrainState {
            cfg,
            weights,
            schedule,
            seed,
            g_params,
            d_params,
            g_opt,
            d_opt,
            per_ex: FeatureExtractor::from_seed("per", PER_EXTRACTOR_SEED),
            tex_ex: FeatureExtractor::from_seed("tex", TEX_EXTRACTOR_SEED),
            epoch: 0,
            step: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepReport {
    pub rec: f64,
    pub adv: f64,
    pub per: f64,
    pub tex: f64,
    pub total: f64,
    pub d_total: f64,
    pub lr: f64,
}

/// Metrics-log line: `epoch,step,l_rec,l_adv,l_per,l_tex,lr`.
pub fn log_line(epoch: usize, step: u64, r: &StepReport) -> String {
    format!(
        "{},{},{:.8},{:.8},{:.8},{:.8},{:.8}",
        epoch, step, r.rec, r.adv, r.per, r.tex, r.lr
    )
}

fn to_f64<T: Scalar>(v: T) -> f64 {
    num_traits::ToPrimitive::to_f64(&v).expect("scalar converts to f64")
}

fn generate_detached<T: Scalar>(state: &TrainState<T>, triple: &SampleTriple<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mounts = state.g_params.mount(&mut g);
    let m = Mounted::new(&state.g_params, &mounts);
    let window = g.leaf(triple.window.clone());
    let r = g.leaf(triple.reference.clone());
    let out = generator_forward(&mut g, &m, &state.cfg, window, r)?;
    Ok(g.value(out.out).clone())
}

fn discriminator_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &[SampleTriple<T>],
    epoch: usize,
    lr: f64,
) -> Result<f64> {
    let fakes: Vec<Tensor<T>> =
        batch.iter().map(|t| generate_detached(state, t)).collect::<Result<_>>()?;
    let reals: Vec<Tensor<T>> = batch.iter().map(|t| t.target.clone()).collect();
    let real = Tensor::stack_batch(&reals)?;
    let fake = Tensor::stack_batch(&fakes)?;
    let mut rng = derive_rng(state.seed, &[0xd15c, epoch as u64, state.step]);
    let u: Vec<f64> = (0..batch.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let x_hat = interpolate(&real, &fake, &u)?;

    let mut g = Graph::new();
    let mounts = state.d_params.mount(&mut g);
    let grads;
    let total;
    {
        let m = Mounted::new(&state.d_params, &mounts);
        let nr = g.leaf(real);
        let nf = g.leaf(fake);
        let nh = g.leaf(x_hat);
        let d = |g: &mut Graph<T>, x: NodeId| discriminator_forward(g, &m, x);
        let dl = loss_d(&mut g, nr, nf, nh, state.weights.gp, &d)?;
        total = to_f64(g.scalar_value(dl.total));
        grads = g.backward(dl.total)?;
    }
    state.d_params.zero_grads();
    state.d_params.accumulate_grads(&g, &grads, &mounts)?;
    adam_step(&mut state.d_params, &mut state.d_opt, lr)?;
    Ok(total)
}

/// One optimization step over a batch. Per-sample graphs keep references
/// and attention maps independent; the critic trains first when the epoch
/// is past warmup.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &[SampleTriple<T>],
    epoch: usize,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::invalid("train_step", "empty batch"));
    }
    let lr = state.schedule.lr(epoch);
    let adversarial = state.schedule.adversarial_active(epoch);
    let mut report = StepReport { lr, ..Default::default() };

    if adversarial {
        report.d_total = discriminator_step(state, batch, epoch, lr)?;
    }

    state.g_params.zero_grads();
    let inv_n = 1.0 / batch.len() as f64;
    for triple in batch {
        let mut g = Graph::new();
        let g_mounts = state.g_params.mount(&mut g);
        let d_mounts = state.d_params.mount(&mut g);
        let grads;
        {
            let m = Mounted::new(&state.g_params, &g_mounts);
            let md = Mounted::new(&state.d_params, &d_mounts);
            let window = g.leaf(triple.window.clone());
            let reference = g.leaf(triple.reference.clone());
            let gen = generator_forward(&mut g, &m, &state.cfg, window, reference)?;
            let gt = g.leaf(triple.target.clone());

            let rec = loss_rec(&mut g, gen.out, gt)?;
            let mut parts = LossParts { rec, adv: None, per: None, tex: None };
            if adversarial {
                let d = |g: &mut Graph<T>, x: NodeId| discriminator_forward(g, &md, x);
                parts.adv = Some(loss_adv(&mut g, gen.out, &d)?);
                let ctx = gen.ctx.as_ref().ok_or_else(|| {
                    Error::invalid("train_step", "perceptual loss needs texture injections")
                })?;
                parts.per = Some(loss_per(&mut g, &m, &state.per_ex, gen.out, gt, ctx.t[2], "lte")?);
                parts.tex = Some(loss_tex(&mut g, &state.tex_ex, gen.out, gt)?);
            }
            let total = total_loss(&mut g, &parts, &state.weights)?;

            report.rec += to_f64(g.scalar_value(parts.rec)) * inv_n;
            if let Some(n) = parts.adv {
                report.adv += to_f64(g.scalar_value(n)) * inv_n;
            }
            if let Some(n) = parts.per {
                report.per += to_f64(g.scalar_value(n)) * inv_n;
            }
            if let Some(n) = parts.tex {
                report.tex += to_f64(g.scalar_value(n)) * inv_n;
            }
            report.total += to_f64(g.scalar_value(total)) * inv_n;

            let scaled = g.scale(total, crate::scalar::num::<T>(inv_n));
            grads = g.backward(scaled)?;
        }
        state.g_params.accumulate_grads(&g, &grads, &g_mounts)?;
    }
    adam_step(&mut state.g_params, &mut state.g_opt, lr)?;
    state.step += 1;
    Ok(report)
}

/// The ratio between target and window resolution, checked for consistency
/// with the reference.
pub fn validate_triple<T: Scalar>(t: &SampleTriple<T>) -> Result<usize> {
    let (w, hr, r) = (t.window.shape(), t.target.shape(), t.reference.shape());
    if w.h == 0 || hr.h % w.h != 0 || hr.w % w.w != 0 || hr.h / w.h != hr.w / w.w {
        return Err(Error::invalid(
            "sample_triple",
            format!("target {}x{} is not an integer multiple of window {}x{}", hr.h, hr.w, w.h, w.w),
        ));
    }
    if hr.c != 3 || r.c != 3 {
        return Err(Error::invalid("sample_triple", "target and reference must have 3 channels"));
    }
    if r.h != hr.h || r.w != hr.w {
        return Err(Error::invalid(
            "sample_triple",
            format!("reference {}x{} does not match target {}x{}", r.h, r.w, hr.h, hr.w),
        ));
    }
    Ok(hr.h / w.h)
}

fn crop<T: Scalar>(t: &Tensor<T>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<T> {
    let s = t.shape();
    Tensor::from_fn(crate::tensor::Shape::new(s.n, s.c, h, w), |n, c, y, x| {
        t.at(n, c, y0 + y, x0 + x)
    })
}

/// Random aligned crop: an LR patch together with the matching factor-scaled
/// regions of the target and the reference.
pub fn crop_triple<T: Scalar>(
    t: &SampleTriple<T>,
    lr_patch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SampleTriple<T>> {
    let factor = validate_triple(t)?;
    let s = t.window.shape();
    let ph = lr_patch.min(s.h);
    let pw = lr_patch.min(s.w);
    if ph % 4 != 0 || pw % 4 != 0 {
        return Err(Error::invalid("crop_triple", "patch dims must be multiples of 4"));
    }
    let y = if s.h > ph { rng.gen_range(0..=s.h - ph) } else { 0 };
    let x = if s.w > pw { rng.gen_range(0..=s.w - pw) } else { 0 };
    Ok(SampleTriple {
        window: crop(&t.window, y, x, ph, pw),
        target: crop(&t.target, factor * y, factor * x, factor * ph, factor * pw),
        reference: crop(&t.reference, factor * y, factor * x, factor * ph, factor * pw),
    })
}

/// Everything a resumed run needs: both parameter sets, both optimizers
/// (moments under `__opt__`), and the epoch/step counters all RNG streams
/// are derived from.
pub fn checkpoint_entries<T: Scalar>(state: &TrainState<T>) -> Vec<(String, Tensor<T>)> {
    let mut entries = state.g_params.entries();
    entries.extend(state.d_params.entries());
    entries.extend(state.g_opt.entries(&state.g_params, "__opt__.g"));
    entries.extend(state.d_opt.entries(&state.d_params, "__opt__.d"));
    let counters = [
        state.epoch as f64,
        state.step as f64,
        state.g_opt.step as f64,
        state.d_opt.step as f64,
    ];
    entries.push((
        "__meta__.counters".into(),
        Tensor::from_vec(1, 1, 1, 4, counters.iter().map(|&x| crate::scalar::num::<T>(x)).collect())
            .expect("counter tensor"),
    ));
    entries.push(("__cfg__.backbone".into(), encode_backbone(&state.cfg)));
    entries
}

pub fn encode_backbone<T: Scalar>(cfg: &BackboneConfig) -> Tensor<T> {
    let mut vals = vec![
        cfg.temporal_radius as f64,
        cfg.base_channels as f64,
        cfg.blocks as f64,
        cfg.upscale as f64,
        cfg.injections.len() as f64,
    ];
    vals.extend(cfg.injections.iter().map(|&i| i as f64));
    let data: Vec<T> = vals.iter().map(|&x| crate::scalar::num::<T>(x)).collect();
    Tensor::from_vec(1, 1, 1, vals.len(), data).expect("cfg tensor")
}

pub fn decode_backbone<T: Scalar>(t: &Tensor<T>) -> Result<BackboneConfig> {
    let get = |i: usize| -> Result<usize> {
        if i >= t.numel() {
            return Err(Error::invalid("decode_backbone", "config entry too short"));
        }
        Ok(to_f64(t.data()[i]) as usize)
    };
    let n_inj = get(4)?;
    let cfg = BackboneConfig {
        temporal_radius: get(0)?,
        base_channels: get(1)?,
        blocks: get(2)?,
        upscale: get(3)?,
        injections: (0..n_inj).map(|i| get(5 + i)).collect::<Result<_>>()?,
        lte_widths: Default::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

impl<T: Scalar> TrainState<T> {
    /// Restore parameters, optimizer moments, and counters from checkpoint
    /// entries. The state must have been built with the same backbone config.
    pub fn load_entries(&mut self, entries: &[(String, Tensor<T>)]) -> Result<()> {
        let cfg_entry = entries
            .iter()
            .find(|(n, _)| n == "__cfg__.backbone")
            .ok_or_else(|| Error::invalid("restore", "checkpoint has no backbone config entry"))?;
        let stored = decode_backbone(&cfg_entry.1)?;
        if stored != self.cfg {
            return Err(Error::invalid(
                "restore",
                format!("checkpoint backbone {:?} does not match configured {:?}", stored, self.cfg),
            ));
        }
        let g_entries: Vec<_> =
            entries.iter().filter(|(n, _)| !n.starts_with("d.") && !n.starts_with("__")).cloned().collect();
        let d_entries: Vec<_> = entries.iter().filter(|(n, _)| n.starts_with("d.")).cloned().collect();
        self.g_params.load_entries(&g_entries)?;
        self.d_params.load_entries(&d_entries)?;
        self.g_opt.load_entries(&self.g_params, "__opt__.g", entries)?;
        self.d_opt.load_entries(&self.d_params, "__opt__.d", entries)?;
        let counters = entries
            .iter()
            .find(|(n, _)| n == "__meta__.counters")
            .ok_or_else(|| Error::invalid("restore", "checkpoint has no counter entry"))?;
        if counters.1.numel() != 4 {
            return Err(Error::invalid("restore", "counter entry must hold 4 values"));
        }
        let c = counters.1.data();
        self.epoch = to_f64(c[0]) as usize;
        self.step = to_f64(c[1]) as u64;
        self.g_opt.step = to_f64(c[2]) as u64;
        self.d_opt.step = to_f64(c[3]) as u64;
        Ok(())
    }
}

/// Epoch driver: seeded shuffle, aligned patch crops, one [`train_step`] per
/// batch. Starts after `state.epoch`, so a restored state resumes exactly
/// where it left off; every random draw is derived from (seed, epoch, step),
/// never from a long-lived generator.
pub fn train_loop<T: Scalar>(
    state: &mut TrainState<T>,
    dataset: &[SampleTriple<T>],
    batch_size: usize,
    lr_patch: usize,
    mut on_step: impl FnMut(&str) -> Result<()>,
    mut on_epoch: impl FnMut(&TrainState<T>, usize) -> Result<()>,
) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::invalid("train_loop", "empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("train_loop", "batch size must be positive"));
    }
    for t in dataset {
        validate_triple(t)?;
    }
    for epoch in state.epoch + 1..=state.schedule.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut derive_rng(state.seed, &[0x5f, epoch as u64]));
        for chunk in order.chunks(batch_size) {
            let mut rng = derive_rng(state.seed, &[0x7a, epoch as u64, state.step]);
            let batch: Vec<SampleTriple<T>> = chunk
                .iter()
                .map(|&i| crop_triple(&dataset[i], lr_patch, &mut rng))
                .collect::<Result<_>>()?;
            let report = train_step(state, &batch, epoch)?;
            on_step(&log_line(epoch, state.step, &report))?;
        }
        state.epoch = epoch;
        on_epoch(state, epoch)?;
    }
    Ok(())
}
