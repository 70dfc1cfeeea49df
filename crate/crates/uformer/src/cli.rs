//! The `uformer` command-line surface: build, count, gradcheck, train,
//! eval, and infer. Exit codes: 0 success, 1 verification/training failure,
//! 2 usage or configuration error.

use crate::accounting;
use crate::data::paired_pngs;
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::io::{self, Checkpoint};
use crate::metrics::{
    psnr, quantize_8bit, read_png, rgb_to_y, ssim, tiled_inference, write_png, Image,
};
use crate::model::{build, UformerParams};
use crate::runconfig::{self, RunConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{train_loop, OptimizerState};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "uformer",
    about = "Window-attention U-shaped image restoration: train, evaluate, and account",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Configuration file path, or builtin:{uformer-t,uformer-s,uformer-b,smoke}.
    #[arg(long)]
    config: Option<String>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded deterministic mode.
    #[arg(long)]
    deterministic: bool,
    /// Run the model at f64 instead of f32.
    #[arg(long)]
    f64: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Print the analytic parameter and MAC report for a configuration.
    Count {
        #[command(flatten)]
        common: CommonArgs,
        /// MAC reference height (default 256).
        #[arg(long, default_value_t = accounting::DEFAULT_RESOLUTION)]
        height: usize,
        /// MAC reference width (default 256).
        #[arg(long, default_value_t = accounting::DEFAULT_RESOLUTION)]
        width: usize,
        /// Also write the report as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference verification suite at f64.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Corrupt one adjoint per check to prove the harness notices.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Build a freshly initialized checkpoint.
    Build {
        #[command(flatten)]
        common: CommonArgs,
        /// Where to write the checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train per the configuration, writing checkpoints and a CSV log.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Continue from the configured checkpoint (step counter included).
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on paired clean/degraded PNG trees.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding clean/ and degraded/ subdirectories.
        #[arg(long)]
        input: PathBuf,
        /// Report PSNR/SSIM on the YCbCr luma channel.
        #[arg(long)]
        y_channel: bool,
        /// Tile size for inference (0 = whole image).
        #[arg(long, default_value_t = 0)]
        tile: usize,
        #[arg(long, default_value_t = 0)]
        overlap: usize,
        /// Write per-image metrics as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Restore one PNG with a trained checkpoint.
    Infer {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Tile size (0 = whole image).
        #[arg(long, default_value_t = 0)]
        tile: usize,
        #[arg(long, default_value_t = 0)]
        overlap: usize,
    },
}

/// Parse argv and execute; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with exit code 0
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut rc = match &common.config {
        None => RunConfig::default(),
        Some(spec) => match spec.strip_prefix("builtin:") {
            Some(name) => runconfig::builtin(name).ok_or_else(|| {
                Error::Usage(format!(
                    "unknown builtin config '{name}' (expected uformer-t, uformer-s, uformer-b or smoke)"
                ))
            })?,
            None => runconfig::parse_file(Path::new(spec))?,
        },
    };
    if let Some(seed) = common.seed {
        rc.train.seed = seed;
    }
    rc.deterministic |= common.deterministic;
    rc.use_f64 |= common.f64;
    if rc.deterministic {
        // Cap internal parallelism before any kernel launches.
        std::env::set_var("UFORMER_THREADS", "1");
    }
    Ok(rc)
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Count {
            common,
            height,
            width,
            out,
        } => cmd_count(&common, height, width, out.as_deref()),
        Command::Gradcheck {
            common,
            inject_fault,
        } => cmd_gradcheck(&common, inject_fault),
        Command::Build { common, out } => cmd_build(&common, &out),
        Command::Train { common, resume } => cmd_train(&common, resume),
        Command::Eval {
            common,
            checkpoint,
            input,
            y_channel,
            tile,
            overlap,
            out,
        } => cmd_eval(
            &common,
            &checkpoint,
            &input,
            y_channel,
            tile,
            overlap,
            out.as_deref(),
        ),
        Command::Infer {
            common,
            checkpoint,
            input,
            out,
            tile,
            overlap,
        } => cmd_infer(&common, &checkpoint, &input, &out, tile, overlap),
    }
}

fn cmd_count(common: &CommonArgs, height: usize, width: usize, out: Option<&Path>) -> Result<i32> {
    let rc = load_config(common)?;
    let report = accounting::count_macs(&rc.model, height, width)?;
    print!("{}", report.render());
    if let Some(path) = out {
        std::fs::write(path, report.to_csv())?;
        println!("csv written to {}", path.display());
    }
    Ok(0)
}

fn cmd_gradcheck(common: &CommonArgs, inject_fault: bool) -> Result<i32> {
    let rc = load_config(common)?;
    let fault = if inject_fault { 1e-2 } else { 0.0 };
    let reports = gradcheck::full_suite(rc.train.seed, fault)?;
    let mut all_ok = true;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:>4}  {:<22} max rel err {:.3e} (tolerance {:.0e})",
            r.name, r.max_rel_err, r.tolerance
        );
        all_ok &= r.passed();
    }
    if all_ok {
        println!("gradcheck: all {} checks passed", reports.len());
        Ok(0)
    } else {
        let failing: Vec<&str> = reports
            .iter()
            .filter(|r| !r.passed())
            .map(|r| r.name.as_str())
            .collect();
        eprintln!("gradcheck: FAILED ({})", failing.join(", "));
        Ok(1)
    }
}

fn cmd_build(common: &CommonArgs, out: &Path) -> Result<i32> {
    let rc = load_config(common)?;
    if rc.use_f64 {
        build_checkpoint::<f64>(&rc, out)
    } else {
        build_checkpoint::<f32>(&rc, out)
    }
}

fn build_checkpoint<S: Scalar>(rc: &RunConfig, out: &Path) -> Result<i32> {
    let params = build::<S>(&rc.model, rc.train.seed)?;
    io::save_checkpoint(
        out,
        &Checkpoint {
            config: rc.model.clone(),
            step: 0,
            tensors: io::params_to_tensors(&params),
        },
    )?;
    println!(
        "wrote initialized checkpoint ({} parameters) to {}",
        params.param_count(),
        out.display()
    );
    Ok(0)
}

fn cmd_train(common: &CommonArgs, resume: bool) -> Result<i32> {
    let rc = load_config(common)?;
    if rc.use_f64 {
        run_train::<f64>(&rc, resume)
    } else {
        run_train::<f32>(&rc, resume)
    }
}

fn run_train<S: Scalar>(rc: &RunConfig, resume: bool) -> Result<i32> {
    let ckpt_path = rc
        .checkpoint
        .clone()
        .unwrap_or_else(|| PathBuf::from("uformer.ckpt"));
    let log_path = rc
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("."))
        .join("train_log.csv");

    let (mut params, start) = if resume {
        let mut ck = io::load_checkpoint::<S>(&ckpt_path)?;
        let params = io::params_from_tensors(&ck.config, &mut ck.tensors)?;
        let mut state = OptimizerState::new();
        for (name, t) in &ck.tensors {
            if let Some(stripped) = name.strip_prefix("opt.m.") {
                state.m.insert(stripped.to_string(), t.to_vec());
            } else if let Some(stripped) = name.strip_prefix("opt.v.") {
                state.v.insert(stripped.to_string(), t.to_vec());
            }
        }
        state.step = ck.step;
        println!("resuming from {} at step {}", ckpt_path.display(), ck.step);
        (params, Some((ck.step, state)))
    } else {
        (build::<S>(&rc.model, rc.train.seed)?, None)
    };

    let outcome = train_loop(
        &mut params,
        &rc.train,
        rc.data_dir.as_deref(),
        Some(&ckpt_path),
        Some(&log_path),
        start,
    )?;
    if let Some(last) = outcome.rows.last() {
        let train_psnr = crate::train::pool_psnr(&params, &outcome.pool)?;
        let val_psnr = outcome.rows.iter().rev().find_map(|r| r.val_psnr);
        println!(
            "trained to step {}: loss {:.6}, training psnr {:.2} dB, val psnr {} dB",
            outcome.final_step,
            last.loss,
            train_psnr,
            val_psnr.map_or("-".to_string(), |v| format!("{v:.2}"))
        );
    }
    println!(
        "checkpoint {}, log {}",
        ckpt_path.display(),
        log_path.display()
    );
    Ok(0)
}

fn load_params<S: Scalar>(path: &Path) -> Result<UformerParams<Tensor<S>>> {
    let mut ck = io::load_checkpoint::<S>(path)?;
    io::params_from_tensors(&ck.config, &mut ck.tensors)
}

fn restore_image<S: Scalar>(
    params: &UformerParams<Tensor<S>>,
    img: &Image,
    tile: usize,
    overlap: usize,
) -> Result<Image> {
    let tile = if tile == 0 {
        img.height().max(img.width())
    } else {
        tile
    };
    tiled_inference(params, img, tile, overlap)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    common: &CommonArgs,
    checkpoint: &Path,
    input: &Path,
    y_channel: bool,
    tile: usize,
    overlap: usize,
    out: Option<&Path>,
) -> Result<i32> {
    let rc = load_config(common)?;
    let pairs = paired_pngs(input)?;
    if pairs.is_empty() {
        return Err(Error::Usage(format!(
            "no image pairs under {}",
            input.display()
        )));
    }

    enum AnyParams {
        F32(Box<UformerParams<Tensor<f32>>>),
        F64(Box<UformerParams<Tensor<f64>>>),
    }
    let params = if rc.use_f64 {
        AnyParams::F64(Box::new(load_params::<f64>(checkpoint)?))
    } else {
        AnyParams::F32(Box::new(load_params::<f32>(checkpoint)?))
    };

    let mut csv = String::from("file,psnr,ssim\n");
    let mut sum_psnr = 0.0;
    let mut sum_ssim = 0.0;
    println!(
        "{:<28} {:>10} {:>8}{}",
        "file",
        "psnr",
        "ssim",
        if y_channel { "  (y channel)" } else { "" }
    );
    for (clean_path, degraded_path) in &pairs {
        let clean = read_png(clean_path)?;
        let degraded = read_png(degraded_path)?;
        let restored = match &params {
            AnyParams::F32(p) => restore_image(p, &degraded, tile, overlap)?,
            AnyParams::F64(p) => restore_image(p, &degraded, tile, overlap)?,
        };
        // metrics describe the 8-bit image a consumer would receive
        let restored = quantize_8bit(&restored);
        let (a, b) = if y_channel {
            (rgb_to_y(&restored)?, rgb_to_y(&clean)?)
        } else {
            (restored, clean)
        };
        let p = psnr(&a, &b, 1.0)?;
        let s = ssim(&a, &b)?;
        sum_psnr += p;
        sum_ssim += s;
        let name = clean_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        println!("{name:<28} {p:>10.4} {s:>8.4}");
        csv.push_str(&format!("{name},{p},{s}\n"));
    }
    let n = pairs.len() as f64;
    println!(
        "{:<28} {:>10.4} {:>8.4}",
        "MEAN",
        sum_psnr / n,
        sum_ssim / n
    );
    csv.push_str(&format!("MEAN,{},{}\n", sum_psnr / n, sum_ssim / n));
    if let Some(path) = out {
        std::fs::write(path, csv)?;
    }
    Ok(0)
}

fn cmd_infer(
    common: &CommonArgs,
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    tile: usize,
    overlap: usize,
) -> Result<i32> {
    let rc = load_config(common)?;
    let img = read_png(input)?;
    let restored = if rc.use_f64 {
        let params = load_params::<f64>(checkpoint)?;
        restore_image(&params, &img, tile, overlap)?
    } else {
        let params = load_params::<f32>(checkpoint)?;
        restore_image(&params, &img, tile, overlap)?
    };
    if tile > 0 {
        let ys = crate::metrics::tile_positions(img.height(), tile.min(img.height()), overlap);
        let xs = crate::metrics::tile_positions(img.width(), tile.min(img.width()), overlap);
        println!(
            "restored {}x{} in {} tiles of {}px (overlap {})",
            img.width(),
            img.height(),
            ys.len() * xs.len(),
            tile,
            overlap
        );
    } else {
        println!("restored {}x{} in one pass", img.width(), img.height());
    }
    write_png(out, &restored)?;
    println!("wrote {}", out.display());
    Ok(0)
}
