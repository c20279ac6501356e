use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use uaglnet::autodiff::gradcheck;
use uaglnet::config::Config;
use uaglnet::data::{generate_synthetic_scene, save_image, save_mask, Difficulty, Scene};
use uaglnet::model::count_parameters;
use uaglnet::train::{load_model, Trainer};
use uaglnet::Real;

/// Setting this variable to anything but "0" or "" runs in 64-bit floats.
const F64_ENV: &str = "UAGLNET_F64";

#[derive(Parser)]
#[command(name = "uaglnet", version, about = "Building-footprint segmentation trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Any configuration key as --key=value.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic scenes and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "model.ckpt")]
        out: PathBuf,
        /// Append-only step log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Score a checkpoint on its held-out (or training) split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train_split: bool,
        /// Also write metric=value lines here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Predict a binary mask (PGM) for an image (PPM).
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write local and global uncertainty maps as PGM files.
    ExportUncertainty {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_prefix: String,
        /// Draw no sampling noise; both maps come out all zero.
        #[arg(long)]
        zero_noise: bool,
    },
    /// Print trainable parameter counts per module.
    CountParams {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Compare analytic and finite-difference gradients of every operation.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write synthetic scenes as PPM images and PGM masks.
    Generate {
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0.0)]
        noise_std: f64,
        #[arg(long, default_value_t = 1)]
        degrade: usize,
        #[arg(long)]
        occlusion: bool,
    },
}

fn use_f64() -> bool {
    std::env::var(F64_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

fn train<T: Real>(config: Option<&Path>, out: &Path, log: Option<&Path>, resume: Option<&Path>, rest: &[String]) -> Result<()> {
    let mut trainer = match resume {
        Some(p) => {
            if config.is_some() || !rest.is_empty() {
                bail!("--resume takes its configuration from the checkpoint");
            }
            Trainer::<T>::load(p)?
        }
        None => Trainer::<T>::new(Config::load(config, rest)?)?,
    };
    let mut sink: Box<dyn Write> = match log {
        Some(p) => Box::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .with_context(|| format!("opening log {}", p.display()))?,
        ),
        None => Box::new(io::stdout()),
    };
    let start = Instant::now();
    let records = trainer.run(&mut sink)?;
    trainer.save(out)?;
    if let Some(last) = records.last() {
        eprintln!(
            "trained {} steps in {:.1}s, final loss {:.4}, val IoU {:.4}; wrote {}",
            records.len(),
            start.elapsed().as_secs_f64(),
            last.loss,
            last.val_iou.unwrap_or(f64::NAN),
            out.display()
        );
    }
    Ok(())
}

fn eval<T: Real>(checkpoint: &Path, train_split: bool, report: Option<&Path>, rest: &[String]) -> Result<()> {
    let loaded = load_model::<T>(checkpoint, rest)?;
    let r = loaded.evaluate(train_split)?;
    println!("{r}");
    if let Some(p) = report {
        std::fs::write(p, r.key_values()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn generate(out_dir: &Path, count: usize, seed: u64, size: usize, difficulty: &Difficulty) -> Result<()> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    for i in 0..count {
        let s: Scene<f32> = generate_synthetic_scene(seed + i as u64, size, difficulty)?;
        save_image(out_dir.join(format!("scene{i:04}.ppm")), &s.image)?;
        save_mask(out_dir.join(format!("scene{i:04}_mask.pgm")), &s.mask)?;
    }
    Ok(())
}

fn run<T: Real>(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            out,
            log,
            resume,
            rest,
        } => train::<T>(config.as_deref(), &out, log.as_deref(), resume.as_deref(), &rest.overrides),
        Command::Eval {
            checkpoint,
            train_split,
            report,
            rest,
        } => eval::<T>(&checkpoint, train_split, report.as_deref(), &rest.overrides),
        Command::Predict { checkpoint, image, out } => {
            load_model::<T>(&checkpoint, &[])?.predict_file(&image, &out)?;
            Ok(())
        }
        Command::ExportUncertainty {
            checkpoint,
            image,
            out_prefix,
            zero_noise,
        } => {
            let mut loaded = load_model::<T>(&checkpoint, &[])?;
            loaded.zero_noise = zero_noise;
            loaded.export_uncertainty(&image, &out_prefix)?;
            Ok(())
        }
        Command::CountParams { config, rest } => {
            let cfg = Config::load(config.as_deref(), &rest.overrides)?;
            let (total, parts) = count_parameters(&cfg.model)?;
            for (name, n) in parts {
                println!("{name:<10} {n:>12}");
            }
            println!("{:<10} {total:>12}", "total");
            Ok(())
        }
        Command::Gradcheck { instances, seed } => {
            let mut worst: f64 = 0.0;
            for (name, err) in gradcheck::run_suite(instances, seed)? {
                let verdict = if err < gradcheck::TOLERANCE { "ok" } else { "FAIL" };
                println!("{name:<24} max_rel_err={err:.3e} {verdict}");
                worst = worst.max(err);
            }
            if worst >= gradcheck::TOLERANCE {
                bail!("gradient check failed (worst relative error {worst:.3e})");
            }
            Ok(())
        }
        Command::Generate {
            out_dir,
            count,
            seed,
            size,
            noise_std,
            degrade,
            occlusion,
        } => generate(
            &out_dir,
            count,
            seed,
            size,
            &Difficulty {
                noise_std,
                degrade,
                occlusion,
            },
        ),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if use_f64() {
        run::<f64>(cli.command)
    } else {
        run::<f32>(cli.command)
    }
}
