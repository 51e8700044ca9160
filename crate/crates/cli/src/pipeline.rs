//! The four pipeline stages behind the CLI verbs. Everything here is
//! deterministic for fixed arguments and seed: parallel sections fan out
//! over frames but collect in index order, so reruns are byte-identical.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use stran_core::backbone::{assemble_window, generator_forward, register_generator};
use stran_core::graph::{Graph, Mounted, ParamSet};
use stran_core::image::{degrade, DegradeConfig};
use stran_core::io::{load_checkpoint, read_ppm, save_checkpoint, write_ppm};
use stran_core::loss::{FeatureExtractor, METRIC_EXTRACTOR_SEED};
use stran_core::metrics::{feature_distance, format_report, psnr, ssim, MetricRow};
use stran_core::train::{
    checkpoint_entries, decode_backbone, derive_rng, train_loop, SampleTriple, TrainState,
};
use stran_core::{Error, Result, Tensor};

use crate::config::TrainConfig;
use crate::manifest::{degrade_hash, ClipEntry, Manifest};

fn sorted_entries(dir: &Path, dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if dirs && path.is_dir() {
            out.push(path);
        } else if !dirs && path.is_file() && path.extension().is_some_and(|e| e == "ppm") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_stem(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "video".into())
}

pub struct PrepareArgs {
    pub input: PathBuf,
    pub out: PathBuf,
    pub factor: usize,
    pub block: usize,
    pub q: f64,
    pub seed: u64,
}

/// Degrade every clip under `input` and emit a manifest next to the LR
/// frames. The first HR frame of each clip is copied in as the reference.
pub fn cmd_prepare(args: &PrepareArgs) -> Result<PathBuf> {
    let input = args
        .input
        .canonicalize()
        .map_err(|e| Error::io(&args.input, e))?;
    let clip_dirs = sorted_entries(&input, true)?;
    if clip_dirs.is_empty() {
        return Err(Error::invalid("prepare", format!("no clip subdirectories in {}", input.display())));
    }
    let dcfg = DegradeConfig { factor: args.factor, block: args.block, q: args.q, seed: args.seed };
    let hash = degrade_hash(&dcfg);

    let mut manifest = Manifest::default();
    for dir in &clip_dirs {
        let id = file_stem(dir);
        let hr_paths = sorted_entries(dir, false)?;
        if hr_paths.is_empty() {
            return Err(Error::invalid("prepare", format!("clip '{id}' has no .ppm frames")));
        }
        let lr_frames: Vec<Tensor<f32>> = hr_paths
            .par_iter()
            .map(|p| degrade(&read_ppm::<f32>(p)?, &dcfg))
            .collect::<Result<_>>()?;
        let clip_out = args.out.join(&id);
        fs::create_dir_all(&clip_out).map_err(|e| Error::io(&clip_out, e))?;
        let mut frames = Vec::with_capacity(hr_paths.len());
        for (i, lr) in lr_frames.iter().enumerate() {
            let rel = format!("{id}/lr_{i:05}.ppm");
            write_ppm(args.out.join(&rel), lr)?;
            frames.push((PathBuf::from(rel), hr_paths[i].clone()));
        }
        let ref_rel = format!("{id}/ref.ppm");
        fs::copy(&hr_paths[0], args.out.join(&ref_rel)).map_err(|e| Error::io(&hr_paths[0], e))?;
        manifest.clips.push(ClipEntry {
            id,
            reference: PathBuf::from(ref_rel),
            degrade_hash: hash.clone(),
            frames,
        });
    }
    let manifest_path = args.out.join("manifest.txt");
    manifest.write(&manifest_path)?;
    Ok(manifest_path)
}

/// One triple per frame of every clip: the frame's temporal window, its HR
/// ground truth, and the clip reference.
pub fn load_triples(manifest: &Manifest, k: usize) -> Result<Vec<SampleTriple<f32>>> {
    let mut out = Vec::new();
    for clip in &manifest.clips {
        let reference: Tensor<f32> = read_ppm(&clip.reference)?;
        let lr: Vec<Tensor<f32>> =
            clip.frames.par_iter().map(|(lr, _)| read_ppm(lr)).collect::<Result<_>>()?;
        let hr: Vec<Tensor<f32>> =
            clip.frames.par_iter().map(|(_, hr)| read_ppm(hr)).collect::<Result<_>>()?;
        for t in 0..lr.len() {
            out.push(SampleTriple {
                window: assemble_window(&lr, t, k)?,
                target: hr[t].clone(),
                reference: reference.clone(),
            });
        }
    }
    Ok(out)
}

/// Full training run: echoes the config, streams log lines to
/// `train_log.csv`, checkpoints every `ckpt_every` epochs and at the end.
pub fn cmd_train(
    manifest_path: &Path,
    cfg: &TrainConfig,
    out: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    cfg.validate()?;
    // Load and validate all inputs before touching the output directory.
    let manifest = Manifest::load(manifest_path)?;
    let dataset = load_triples(&manifest, cfg.backbone.temporal_radius)?;
    let mut state =
        TrainState::<f32>::new(cfg.backbone.clone(), cfg.weights, cfg.schedule(), cfg.seed)?;
    if let Some(ckpt) = resume {
        state.load_entries(&load_checkpoint::<f32>(ckpt)?)?;
    }

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    print!("{}", cfg.echo());
    let echo_path = out.join("config_echo.txt");
    fs::write(&echo_path, cfg.echo()).map_err(|e| Error::io(&echo_path, e))?;
    let log_path = out.join("train_log.csv");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let ckpt_every = cfg.ckpt_every;
    train_loop(
        &mut state,
        &dataset,
        cfg.batch_size,
        cfg.lr_patch,
        |line| writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e)),
        |s, epoch| {
            if epoch % ckpt_every == 0 && epoch != s.schedule.epochs {
                let p = out.join(format!("ckpt_epoch_{epoch:04}.stck"));
                save_checkpoint(p, &checkpoint_entries(s))
            } else {
                Ok(())
            }
        },
    )?;
    save_checkpoint(out.join("ckpt_final.stck"), &checkpoint_entries(&state))
}

/// Rebuild the generator recorded in a checkpoint.
pub fn load_generator(ckpt: &Path) -> Result<(stran_core::backbone::BackboneConfig, ParamSet<f32>)> {
    let entries = load_checkpoint::<f32>(ckpt)?;
    let cfg_entry = entries
        .iter()
        .find(|(n, _)| n == "__cfg__.backbone")
        .ok_or_else(|| Error::invalid("enhance", "checkpoint has no backbone config entry"))?;
    let cfg = decode_backbone(&cfg_entry.1)?;
    let mut params = ParamSet::new();
    register_generator(&mut params, &cfg, &mut derive_rng(0, &[]))?;
    let g_entries: Vec<_> = entries
        .into_iter()
        .filter(|(n, _)| !n.starts_with("d.") && !n.starts_with("__"))
        .collect();
    params.load_entries(&g_entries)?;
    Ok((cfg, params))
}

/// Run the generator over one clip with a sliding window and write one HR
/// frame per input frame, clamped to [0, 1].
pub fn cmd_enhance(
    manifest_path: &Path,
    ckpt: &Path,
    clip_id: &str,
    out: &Path,
    ref_override: Option<&Path>,
) -> Result<()> {
    let manifest = Manifest::load(manifest_path)?;
    let clip = manifest.clip(clip_id)?;
    let (cfg, params) = load_generator(ckpt)?;
    let reference: Tensor<f32> = read_ppm(ref_override.unwrap_or(&clip.reference))?;
    let lr: Vec<Tensor<f32>> =
        clip.frames.par_iter().map(|(lr, _)| read_ppm(lr)).collect::<Result<_>>()?;

    let enhanced: Vec<Tensor<f32>> = (0..lr.len())
        .into_par_iter()
        .map(|t| {
            let mut g = Graph::new();
            let mounts = params.mount(&mut g);
            let m = Mounted::new(&params, &mounts);
            let window = g.leaf(assemble_window(&lr, t, cfg.temporal_radius)?);
            let r = g.leaf(reference.clone());
            let o = generator_forward(&mut g, &m, &cfg, window, r)?;
            Ok(g.value(o.out).clamp(0.0, 1.0))
        })
        .collect::<Result<_>>()?;

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (t, frame) in enhanced.iter().enumerate() {
        write_ppm(out.join(format!("frame_{t:05}.ppm")), frame)?;
    }
    Ok(())
}

/// Either the directory itself (flat layout) or its subdirectories, one
/// video each.
fn discover_videos(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let subdirs = sorted_entries(dir, true)?;
    let videos: Vec<(String, PathBuf)> = subdirs
        .iter()
        .filter(|d| sorted_entries(d, false).map(|f| !f.is_empty()).unwrap_or(false))
        .map(|d| (file_stem(d), d.clone()))
        .collect();
    if videos.is_empty() {
        Ok(vec![(file_stem(dir), dir.to_path_buf())])
    } else {
        Ok(videos)
    }
}

/// Per-frame PSNR/SSIM/feat_dist against ground truth plus the aggregate
/// line, written to `out`.
pub fn cmd_eval(pred: &Path, gt: &Path, out: &Path) -> Result<()> {
    let videos = discover_videos(pred)?;
    let flat = videos.len() == 1 && videos[0].1 == pred;
    let extractor = FeatureExtractor::<f32>::from_seed("metric", METRIC_EXTRACTOR_SEED);
    let mut rows: Vec<MetricRow> = Vec::new();
    for (vid, pred_dir) in &videos {
        let gt_dir = if flat { gt.to_path_buf() } else { gt.join(vid) };
        let pred_frames = sorted_entries(pred_dir, false)?;
        let gt_frames = sorted_entries(&gt_dir, false)?;
        if pred_frames.len() != gt_frames.len() {
            return Err(Error::invalid(
                "eval",
                format!(
                    "frame count mismatch for '{vid}': pred has {}, gt has {}",
                    pred_frames.len(),
                    gt_frames.len()
                ),
            ));
        }
        let video_rows: Vec<MetricRow> = (0..pred_frames.len())
            .into_par_iter()
            .map(|i| {
                let a: Tensor<f32> = read_ppm(&pred_frames[i])?;
                let b: Tensor<f32> = read_ppm(&gt_frames[i])?;
                Ok(MetricRow {
                    video_id: vid.clone(),
                    frame_idx: i,
                    psnr: psnr(&a, &b, 1.0)?,
                    ssim: ssim(&a, &b)?,
                    feat_dist: feature_distance(&a, &b, &extractor)?,
                })
            })
            .collect::<Result<_>>()?;
        rows.extend(video_rows);
    }
    let report = format!(
        "# feat_dist is an LPIPS stand-in (fixed random features), not comparable to published LPIPS\n{}",
        format_report(&rows)
    );
    fs::write(out, report).map_err(|e| Error::io(out, e))
}
