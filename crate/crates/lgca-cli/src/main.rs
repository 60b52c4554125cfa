//! Command-line driver: train, evaluate, predict, run ablation sweeps, and
//! verify the implementation against its brute-force oracles.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lgca::checkpoint::Checkpoint;
use lgca::config::Config;
use lgca::data::{load_image_rgb, save_color_mask, save_index_mask};
use lgca::eval::{evaluate, predict_mask};
use lgca::model::SegModel;
use lgca::sweep::{ablation_sweep, render_table, AblationAxis};
use lgca::train::{eval_set, train, training_set};

/// Exit code for configuration/input errors, distinct from runtime failures.
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "lgca", version, about = "Local-global class-aware segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file; defaults to the built-in full-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Use the built-in desk profile as the base instead of the defaults.
    #[arg(long)]
    desk: bool,

    /// Override any config key, e.g. --set model.patches=8x8 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config> {
        let mut cfg = if self.desk { Config::desk() } else { Config::default() };
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            cfg.merge(&text).context("parsing config file")?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("override `{kv}` is not KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())
                .with_context(|| format!("applying override `{kv}`"))?;
        }
        cfg.validate().context("invalid configuration")?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint, loss curve and resolved config.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; defaults to <out.root>/<config hash>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes a JSON metrics report.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report destination (default: metrics.json beside the checkpoint).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Proceed even if the checkpoint was trained under a different
        /// config hash.
        #[arg(long)]
        force: bool,
    },
    /// Predict masks for a directory of RGB images.
    Predict {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of input images (PNG).
        #[arg(long)]
        images: PathBuf,
        /// Output directory for index and colorized masks.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train/evaluate a grid of configs along one ablation axis.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// One of structure|cg_layer|atb_factors|patches|heads|loss_weight.
        #[arg(long)]
        axis: String,
        /// Output directory for the table (default: <out.root>/sweep-<axis>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle and invariant suite; exits nonzero on any failure.
    Verify {
        /// Random seed for the generated cases.
        #[arg(long, default_value_t = 12345)]
        seed: u64,
    },
}

fn output_root(cfg: &Config) -> PathBuf {
    std::env::var("LGCA_OUTPUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|_| PathBuf::from(&cfg.out_root))
}

fn cmd_train(config: ConfigArgs, out: Option<PathBuf>) -> Result<()> {
    let cfg = config.resolve()?;
    let data = training_set(&cfg).context("loading training data")?;
    let out_dir = out.unwrap_or_else(|| output_root(&cfg).join(cfg.hash()));
    println!("run {} -> {}", cfg.hash(), out_dir.display());
    let model = SegModel::new(&cfg)?;
    let c = model.complexity(cfg.data.tile, cfg.data.tile);
    println!(
        "model: {} params, {:.3} G multiplies per {}px forward",
        c.params,
        c.macs as f64 / 1e9,
        cfg.data.tile
    );
    println!("training on {} tiles", data.len());
    let outcome = train(&model, &data, &cfg, Some(&out_dir), |step, loss, lr| {
        println!("step {step:6}  loss {loss:.4}  lr {lr:.6}");
    })?;
    if let Some(loss) = outcome.final_loss() {
        println!("final loss {loss:.4}");
    }
    println!("checkpoint: {}", out_dir.join("model.ckpt").display());
    Ok(())
}

fn load_checkpoint_model(cfg: &Config, path: &Path, force: bool) -> Result<SegModel> {
    let ckpt = Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    if ckpt.config_hash != cfg.hash() {
        if force {
            eprintln!(
                "warning: checkpoint config hash {} differs from resolved config {}",
                ckpt.config_hash,
                cfg.hash()
            );
        } else {
            bail!(
                "checkpoint config hash {} does not match resolved config {} (pass --force to proceed)",
                ckpt.config_hash,
                cfg.hash()
            );
        }
    }
    let model = SegModel::new(cfg)?;
    ckpt.apply_to(&model).context("applying checkpoint")?;
    Ok(model)
}

fn cmd_eval(
    config: ConfigArgs,
    checkpoint: PathBuf,
    report: Option<PathBuf>,
    force: bool,
) -> Result<()> {
    let cfg = config.resolve()?;
    let model = load_checkpoint_model(&cfg, &checkpoint, force)?;
    let data = eval_set(&cfg).context("loading evaluation data")?;
    println!("evaluating {} images", data.len());
    let outcome = evaluate(&model, &data, &cfg)?;
    let path = report.unwrap_or_else(|| {
        checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("metrics.json")
    });
    std::fs::write(&path, outcome.report.to_json())
        .with_context(|| format!("writing report {}", path.display()))?;
    println!("{}", outcome.report.summary_line());
    println!("report: {}", path.display());
    Ok(())
}

fn cmd_predict(
    config: ConfigArgs,
    checkpoint: PathBuf,
    images: PathBuf,
    out: PathBuf,
    force: bool,
) -> Result<()> {
    let cfg = config.resolve()?;
    let model = load_checkpoint_model(&cfg, &checkpoint, force)?;
    std::fs::create_dir_all(&out)?;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&images)
        .with_context(|| format!("reading image directory {}", images.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        bail!("no PNG images under {}", images.display());
    }
    let mut done = 0usize;
    for path in entries {
        let stem = path.file_stem().unwrap().to_string_lossy().to_string();
        let image = match load_image_rgb(&path) {
            Ok(img) => img,
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", path.display());
                continue;
            }
        };
        let mask = predict_mask(&model, &image, &cfg)?;
        save_index_mask(&out.join(format!("{stem}_mask.png")), &mask)?;
        save_color_mask(&out.join(format!("{stem}_color.png")), &mask)?;
        done += 1;
    }
    println!("wrote {done} mask pairs to {}", out.display());
    Ok(())
}

fn cmd_sweep(config: ConfigArgs, axis: String, out: Option<PathBuf>) -> Result<()> {
    let cfg = config.resolve()?;
    let axis: AblationAxis = axis.parse()?;
    let out_dir = out.unwrap_or_else(|| output_root(&cfg).join(format!("sweep-{}", axis.name())));
    std::fs::create_dir_all(&out_dir)?;
    let rows = ablation_sweep(axis, &cfg, None, |label| {
        println!("sweep point: {label}");
    })?;
    let table = render_table(axis, &rows);
    print!("{table}");
    std::fs::write(out_dir.join("table.tsv"), &table)?;
    std::fs::write(
        out_dir.join("table.json"),
        serde_json::to_string_pretty(&rows)?,
    )?;
    println!("tables under {}", out_dir.display());
    Ok(())
}

fn cmd_verify(seed: u64) -> Result<()> {
    let reports = lgca::verify::run_suite(seed);
    let mut failed = 0usize;
    for r in &reports {
        println!("{}", r.line());
        if !r.pass {
            failed += 1;
        }
    }
    println!("{} cases, {} failed", reports.len(), failed);
    if failed > 0 {
        bail!("{failed} oracle cases failed");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out } => cmd_train(config, out),
        Command::Eval {
            config,
            checkpoint,
            report,
            force,
        } => cmd_eval(config, checkpoint, report, force),
        Command::Predict {
            config,
            checkpoint,
            images,
            out,
            force,
        } => cmd_predict(config, checkpoint, images, out, force),
        Command::Sweep { config, axis, out } => cmd_sweep(config, axis, out),
        Command::Verify { seed } => cmd_verify(seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            // Configuration and input problems exit 2; runtime failures 1.
            let msg = format!("{e:#}");
            if msg.contains("config")
                || msg.contains("override")
                || msg.contains("loading")
                || msg.contains("reading")
                || msg.contains("empty")
                || msg.contains("no PNG images")
                || msg.contains("unknown ablation axis")
            {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
