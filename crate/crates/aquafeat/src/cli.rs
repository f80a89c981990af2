//! Command-line surface: batch enhancement, degradation, dataset
//! generation, training, evaluation, and gradient verification.
//!
//! Every command is deterministic for fixed inputs and seeds; outputs are
//! overwritten atomically and input directories are never mutated. The
//! `AQF_THREADS` environment variable caps the worker count.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::gradsuite::run_suite;
use crate::image_io::{read_image, write_image};
use crate::model::{Model, ModelConfig};
use crate::synth::{degrade, generate_dataset, DatasetSpec, DegradationParams};
use crate::train::{evaluate, train, TrainConfig};

#[derive(Parser)]
#[command(
    name = "aquafeat",
    version,
    about = "Task-guided underwater image enhancement"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enhance every image in a directory with a trained checkpoint
    Enhance {
        /// Checkpoint file
        #[arg(long)]
        ckpt: PathBuf,
        /// Input directory of .ppm/.png images
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory (filenames preserved)
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the synthetic underwater degradation to a directory of images
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optical depth in meters
        #[arg(long, default_value_t = 2.0)]
        depth: f64,
        /// Gaussian noise sigma
        #[arg(long, default_value_t = 0.02)]
        sigma: f64,
        /// Darkening exponent
        #[arg(long, default_value_t = 1.8)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Materialize the synthetic paired dataset
    GenData {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        train: usize,
        #[arg(long, default_value_t = 128)]
        val: usize,
        #[arg(long, default_value_t = 256)]
        test: usize,
        /// Square image size in pixels
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train enhancer and task head jointly on a generated dataset
    Train {
        #[arg(long)]
        root: PathBuf,
        /// Output checkpoint path
        #[arg(long)]
        out: PathBuf,
        /// Baseline mode: bypass the enhancer, train the head alone
        #[arg(long)]
        freeze_enhancer: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Metrics log path (default: checkpoint path with .metrics.tsv)
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Print classification metrics of a checkpoint on one split
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Verify analytic gradients against finite differences, per block
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Entry point shared by the binary and tests. Returns the process exit
/// status: 0 on success, nonzero with a diagnostic on stderr otherwise.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_thread_pool();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(msg) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

fn init_thread_pool() {
    if let Ok(v) = std::env::var("AQF_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                // ignore the error if a pool already exists
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), String> {
    match cmd {
        Command::Enhance { ckpt, input, out } => cmd_enhance(&ckpt, &input, &out),
        Command::Degrade {
            input,
            out,
            depth,
            sigma,
            gamma,
            seed,
        } => cmd_degrade(&input, &out, depth, sigma, gamma, seed),
        Command::GenData {
            root,
            seed,
            train,
            val,
            test,
            size,
        } => {
            let spec = DatasetSpec {
                train,
                val,
                test,
                size,
                ..DatasetSpec::default()
            };
            generate_dataset(&root, seed, &spec).map_err(|e| e.to_string())?;
            println!(
                "dataset written to {} ({} train / {} val / {} test at {}x{})",
                root.display(),
                train,
                val,
                test,
                size,
                size
            );
            Ok(())
        }
        Command::Train {
            root,
            out,
            freeze_enhancer,
            epochs,
            lr,
            batch_size,
            seed,
            log,
        } => cmd_train(&root, &out, freeze_enhancer, epochs, lr, batch_size, seed, log),
        Command::Eval { ckpt, root, split } => {
            let model = load_checkpoint(&ckpt).map_err(|e| e.to_string())?;
            let report = evaluate(&model, &root, &split).map_err(|e| e.to_string())?;
            print!("{}", report.to_kv_text());
            Ok(())
        }
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
    }
}

/// Sorted list of the image files directly inside `dir`.
fn image_files(dir: &Path) -> Result<Vec<PathBuf>, String> {
    let entries = fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("ppm") | Some("png")
                )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(format!("no .ppm or .png images in {}", dir.display()));
    }
    Ok(files)
}

fn cmd_enhance(ckpt: &Path, input: &Path, out: &Path) -> Result<(), String> {
    let model: Model<f32> = load_checkpoint(ckpt).map_err(|e| e.to_string())?;
    let files = image_files(input)?;
    fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    files.par_iter().try_for_each(|path| {
        let img = read_image(path).map_err(|e| e.to_string())?;
        let enhanced = model.enhance_frame(&img).map_err(|e| e.to_string())?;
        let name = path.file_name().expect("listed files have names");
        write_image(&enhanced, &out.join(name)).map_err(|e| e.to_string())
    })?;
    println!("enhanced {} images into {}", files.len(), out.display());
    Ok(())
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

fn cmd_degrade(
    input: &Path,
    out: &Path,
    depth: f64,
    sigma: f64,
    gamma: f64,
    seed: u64,
) -> Result<(), String> {
    let params = DegradationParams {
        depth,
        noise_sigma: sigma,
        gamma,
        ..DegradationParams::default()
    };
    params.validate().map_err(|e| e.to_string())?;
    let files = image_files(input)?;
    fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    files.par_iter().try_for_each(|path| {
        let img = read_image(path).map_err(|e| e.to_string())?;
        let name = path.file_name().expect("listed files have names");
        let file_seed = seed ^ fnv1a(name.to_string_lossy().as_bytes());
        let degraded = degrade(&img, &params, file_seed);
        write_image(&degraded, &out.join(name)).map_err(|e| e.to_string())
    })?;
    println!("degraded {} images into {}", files.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    root: &Path,
    out: &Path,
    freeze_enhancer: bool,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    seed: u64,
    log: Option<PathBuf>,
) -> Result<(), String> {
    let mut cfg = TrainConfig {
        seed,
        freeze_enhancer,
        ..TrainConfig::default()
    };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(l) = lr {
        cfg.lr = l;
    }
    if let Some(b) = batch_size {
        cfg.batch_size = b;
    }
    let outcome = train(&cfg, &ModelConfig::default(), root).map_err(|e| e.to_string())?;
    save_checkpoint(&outcome.model, out).map_err(|e| e.to_string())?;
    let log_path = log.unwrap_or_else(|| out.with_extension("metrics.tsv"));
    fs::write(&log_path, &outcome.log).map_err(|e| format!("{}: {e}", log_path.display()))?;
    println!(
        "checkpoint written to {} (train loss {:.4} -> {:.4}, val accuracy {:.4})",
        out.display(),
        outcome.initial_train_loss,
        outcome.final_train_loss,
        outcome.final_val_accuracy
    );
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<(), String> {
    let reports = run_suite(seed).map_err(|e| e.to_string())?;
    let mut all_ok = true;
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<16} max_rel_err {:>12.3e}  (threshold {:.0e})  {}",
            r.name, r.max_rel_err, r.threshold, verdict
        );
        all_ok &= r.passed();
    }
    if all_ok {
        Ok(())
    } else {
        Err("gradient check failed".into())
    }
}
