use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use ssattn::config::RunConfig;
use ssattn::{cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_train, cmd_visualize};

#[derive(Parser)]
#[command(name = "ssattn", about = "Sparse-sampling attention deraining toolkit", version)]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Random seed (overrides config and SSATTN_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for this run.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a paired synthetic rain dataset.
    GenData {
        /// rs | rd | rds
        #[arg(long)]
        mode: Option<String>,
        /// Number of (clean, rain) pairs.
        #[arg(long)]
        count: Option<usize>,
        /// Square image size in pixels.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train a model on a generated dataset.
    Train {
        /// Mode directory holding manifest.json and the image pairs.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Held-out set evaluated after training.
        #[arg(long)]
        test_data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        crop: Option<usize>,
        /// Ablation switches (comma separated): no-ud, no-rs, ssa-no-ud,
        /// ssa-no-rs, lr-no-ud, lr-no-rs.
        #[arg(long)]
        ablate: Option<String>,
        /// Attention variant in the sampling slot: ssa | wsa | csa | sa.
        #[arg(long)]
        attn: Option<String>,
        /// Grid sweep over a ranking parameter: name=start:end:count.
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Evaluate a checkpoint on a test set (PSNR/SSIM on the Y channel).
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference verification of every primitive and one full block.
    Gradcheck {
        /// Only check ops whose name contains this substring.
        #[arg(long)]
        op: Option<String>,
        /// Corrupt the analytic gradients on purpose; the suite must fail
        /// (negative control for the harness).
        #[arg(long)]
        inject_fault: bool,
    },
    /// Sampling overlays, uncertainty heatmaps, and the derained image.
    Visualize {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
        /// Window index at the chosen stage (row-major).
        #[arg(long)]
        window: Option<usize>,
        /// Decoder stage to trace (0 = coarsest).
        #[arg(long)]
        stage: Option<usize>,
    },
}

fn run() -> Result<bool> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    } else if cfg.out_dir.as_os_str().is_empty() {
        cfg.out_dir = PathBuf::from("runs/out");
    }

    match cli.cmd {
        Cmd::GenData { mode, count, size } => {
            if let Some(m) = mode {
                cfg.gen.config.mode = m.parse()?;
            }
            if let Some(c) = count {
                cfg.gen.count = c;
            }
            if let Some(s) = size {
                cfg.gen.config.width = s;
                cfg.gen.config.height = s;
            }
            let summary = cmd_gen_data(&cfg)?;
            println!(
                "wrote {} pairs to {}",
                summary.count,
                summary.dir.display()
            );
            Ok(true)
        }
        Cmd::Train {
            data,
            test_data,
            steps,
            batch,
            crop,
            ablate,
            attn,
            sweep,
        } => {
            if let Some(d) = data {
                cfg.train.data_dir = d;
            }
            if let Some(d) = test_data {
                cfg.train.test_data_dir = Some(d);
            }
            if let Some(s) = steps {
                cfg.train.params.steps = s;
            }
            if let Some(b) = batch {
                cfg.train.params.batch_size = b;
            }
            if let Some(c) = crop {
                cfg.train.params.crop = c;
            }
            if let Some(a) = ablate {
                cfg.train.ablate = vec![a];
            }
            if let Some(a) = attn {
                cfg.train.attn = a;
            }
            if let Some(s) = sweep {
                cfg.train.sweep = Some(s);
            }
            let summary = cmd_train(&cfg)?;
            println!(
                "trained {} steps, final loss {:.4}, checkpoint {}",
                summary.steps,
                summary.final_loss,
                summary.checkpoint.display()
            );
            if let Some(report) = &summary.eval {
                println!(
                    "test psnr {:.2} dB (baseline {:.2} dB), ssim {:.4}",
                    report.mean_psnr_db, report.mean_baseline_psnr_db, report.mean_ssim
                );
            }
            if let Some(points) = &summary.sweep {
                for p in points {
                    println!(
                        "sweep {}={:.4}: loss {:.4}{}",
                        p.param,
                        p.value,
                        p.final_loss,
                        p.mean_psnr
                            .map(|v| format!(", test psnr {v:.2} dB"))
                            .unwrap_or_default()
                    );
                }
            }
            Ok(true)
        }
        Cmd::Eval { ckpt, data } => {
            if let Some(c) = ckpt {
                cfg.eval.checkpoint = c;
            }
            if let Some(d) = data {
                cfg.eval.data_dir = d;
            }
            let report = cmd_eval(&cfg)?;
            println!(
                "mean psnr {:.2} dB, ssim {:.4}, baseline {:.2} dB over {} images",
                report.mean_psnr_db,
                report.mean_ssim,
                report.mean_baseline_psnr_db,
                report.per_image.len()
            );
            Ok(true)
        }
        Cmd::Gradcheck { op, inject_fault } => {
            let (_, passed) = cmd_gradcheck(op.as_deref(), inject_fault)?;
            Ok(passed)
        }
        Cmd::Visualize {
            ckpt,
            image,
            window,
            stage,
        } => {
            if let Some(c) = ckpt {
                cfg.visualize.checkpoint = c;
            }
            if let Some(i) = image {
                cfg.visualize.image = i;
            }
            if let Some(w) = window {
                cfg.visualize.window = w;
            }
            if let Some(s) = stage {
                cfg.visualize.stage = s;
            }
            let written = cmd_visualize(&cfg)?;
            for p in written {
                println!("wrote {}", p.display());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
