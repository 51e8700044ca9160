use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stran_cli::config::TrainConfig;
use stran_cli::pipeline::{cmd_enhance, cmd_eval, cmd_prepare, cmd_train, PrepareArgs};
use stran_core::Result;

#[derive(Parser)]
#[command(
    name = "stran",
    version,
    about = "Reference-based video enhancement: texture transfer from one HQ still into a degraded clip"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Degrade clips into paired training data and write a manifest
    Prepare {
        /// Directory of per-clip subdirectories of .ppm frames
        #[arg(long)]
        input: PathBuf,
        /// Output directory for LR frames, references, and manifest.txt
        #[arg(long)]
        out: PathBuf,
        /// Downscale factor
        #[arg(long, default_value_t = 4)]
        factor: usize,
        /// Quantization block size
        #[arg(long, default_value_t = 8)]
        block: usize,
        /// Quantization step (0 = plain downscale)
        #[arg(long, default_value_t = 0.05)]
        q: f64,
        /// Degradation seed recorded in the manifest hash
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a prepared manifest
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Run configuration ('key = value' lines); desk preset when absent
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoints and the loss log
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to resume from
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Enhance one clip with a trained checkpoint
    Enhance {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Clip id from the manifest
        #[arg(long)]
        clip: String,
        /// Output directory for enhanced frames
        #[arg(long)]
        out: PathBuf,
        /// Override the clip's reference image (e.g. a gallery still)
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
    },
    /// Score enhanced frames against ground truth
    Eval {
        /// Directory of predicted frames (flat, or one subdirectory per video)
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth frames with the same layout
        #[arg(long)]
        gt: PathBuf,
        /// Report file to write
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Prepare { input, out, factor, block, q, seed } => {
            let manifest = cmd_prepare(&PrepareArgs { input, out, factor, block, q, seed })?;
            println!("wrote {}", manifest.display());
            Ok(())
        }
        Cmd::Train { manifest, config, out, resume } => {
            let cfg = match config {
                Some(path) => TrainConfig::load(path)?,
                None => TrainConfig::desk(),
            };
            cmd_train(&manifest, &cfg, &out, resume.as_deref())
        }
        Cmd::Enhance { manifest, ckpt, clip, out, reference } => {
            cmd_enhance(&manifest, &ckpt, &clip, &out, reference.as_deref())
        }
        Cmd::Eval { pred, gt, out } => cmd_eval(&pred, &gt, &out),
    }
}

fn main() -> ExitCode {
    // Parse errors exit with the usage code (2) inside clap.
    let cli = Cli::parse();
    if let Ok(threads) = std::env::var("STRAN_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: STRAN_THREADS must be a positive integer, got '{threads}'");
                return ExitCode::from(1);
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
