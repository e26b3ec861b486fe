//! `ssattn train`: optimization loop with CSV logging, periodic checkpoints,
//! ablation switches, and parameter sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use ssattn_core::metrics::MetricReport;
use ssattn_core::model::{
    augment_pair, config_digest, random_crop_pair, save_checkpoint, train_step, Adam,
};
use ssattn_core::rng::{rng_from_seed, uniform_usize};

use crate::config::RunConfig;
use crate::dataset::load_pairs;

use super::eval::evaluate_pairs;
use super::{build_model, parse_ablations};

pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub csv: PathBuf,
    pub eval: Option<MetricReport>,
    pub sweep: Option<Vec<SweepPoint>>,
}

pub struct SweepPoint {
    pub param: String,
    pub value: f64,
    pub final_loss: f64,
    pub mean_psnr: Option<f64>,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let mut cfg = cfg.clone();
    let out = cfg.out_dir.clone();
    cfg.finalize(&out)?;

    if let Some(spec) = cfg.train.sweep.clone().filter(|s| !s.is_empty()) {
        return run_sweep(&cfg, &out, &spec);
    }
    run_single(&cfg, &out)
}

fn run_single(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    let pairs = load_pairs(&cfg.train.data_dir)
        .with_context(|| format!("loading training data from {}", cfg.train.data_dir.display()))?;
    if pairs.is_empty() {
        bail!("training set {} is empty", cfg.train.data_dir.display());
    }
    let abl = parse_ablations(&cfg.train.ablate)?;
    let (mut store, model) = build_model(cfg, &cfg.model)?;
    let tcfg = &cfg.train.params;
    let mut adam = Adam::new(&store, tcfg);
    let mut rng = rng_from_seed(cfg.resolved_seed());
    let digest = config_digest(&cfg.model);

    let csv_path = out.join("train_log.csv");
    let mut csv = String::from("step,lr,total_loss,psnr_term,edge_term,udl_term\n");
    let mut final_loss = f64::NAN;

    for step in 0..tcfg.steps {
        let mut batch = Vec::with_capacity(tcfg.batch_size);
        for _ in 0..tcfg.batch_size {
            let idx = uniform_usize(&mut rng, 0, pairs.len() - 1);
            let (rain, clean) = &pairs[idx];
            let (rain, clean) = random_crop_pair(rain, clean, tcfg.crop, &mut rng)?;
            let (rain, clean) = if tcfg.augment {
                augment_pair(&rain, &clean, &mut rng)
            } else {
                (rain, clean)
            };
            batch.push((rain, clean));
        }
        let stats = match train_step(&model, &mut store, &mut adam, &batch, step, tcfg, &abl) {
            Ok(s) => s,
            Err(e) => {
                let diag = format!("training aborted at step {step}: {e}\n");
                std::fs::write(out.join("diagnostics.txt"), &diag)?;
                std::fs::write(&csv_path, &csv)?;
                bail!("{diag}");
            }
        };
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            stats.step, stats.lr, stats.total, stats.psnr_term, stats.edge_term, stats.udl_term
        )?;
        final_loss = stats.total;
        if tcfg.checkpoint_every > 0
            && (step + 1) % tcfg.checkpoint_every == 0
            && step + 1 < tcfg.steps
        {
            save_checkpoint(&out.join(format!("checkpoint_step{}.bin", step + 1)), &store, digest)?;
        }
    }
    std::fs::write(&csv_path, &csv)?;
    let ckpt = out.join("checkpoint.bin");
    save_checkpoint(&ckpt, &store, digest)?;

    let eval = match &cfg.train.test_data_dir {
        Some(dir) => {
            let test_pairs = load_pairs(dir)?;
            let report = evaluate_pairs(&model, &mut store, &test_pairs)?;
            std::fs::write(
                out.join("eval_after_train.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            Some(report)
        }
        None => None,
    };

    Ok(TrainSummary {
        steps: tcfg.steps,
        final_loss,
        checkpoint: ckpt,
        csv: csv_path,
        eval,
        sweep: None,
    })
}

/// `name=start:end:count` over the ranking parameters, one sub-run per grid
/// value, summarized in `sweep_summary.csv`.
fn run_sweep(cfg: &RunConfig, out: &Path, spec: &str) -> Result<TrainSummary> {
    let (param, grid) = parse_sweep(spec)?;
    let mut points = Vec::new();
    let mut last: Option<TrainSummary> = None;
    for value in grid {
        let mut sub = cfg.clone();
        sub.train.sweep = None;
        match param.as_str() {
            "beta" => sub.model.beta = value,
            "gamma" => sub.model.gamma = value,
            "alpha" => sub.model.alpha = value,
            "k" => sub.model.k_fraction = value,
            other => bail!("sweep parameter '{other}' not one of beta|gamma|alpha|k"),
        }
        let sub_out = out.join(format!("sweep_{param}_{value:.4}"));
        sub.out_dir = sub_out.clone();
        let mut sub_finalized = sub.clone();
        sub_finalized.finalize(&sub_out)?;
        let summary = run_single(&sub_finalized, &sub_out)?;
        points.push(SweepPoint {
            param: param.clone(),
            value,
            final_loss: summary.final_loss,
            mean_psnr: summary.eval.as_ref().map(|r| r.mean_psnr_db),
        });
        last = Some(summary);
    }
    let mut csv = String::from("param,value,final_loss,mean_test_psnr\n");
    for p in &points {
        writeln!(
            csv,
            "{},{},{},{}",
            p.param,
            p.value,
            p.final_loss,
            p.mean_psnr.map(|v| v.to_string()).unwrap_or_default()
        )?;
    }
    std::fs::write(out.join("sweep_summary.csv"), csv)?;
    let mut summary = last.expect("sweep grid is nonempty");
    summary.sweep = Some(points);
    Ok(summary)
}

fn parse_sweep(spec: &str) -> Result<(String, Vec<f64>)> {
    let (name, rest) = spec
        .split_once('=')
        .with_context(|| format!("sweep spec '{spec}' is not name=start:end:count"))?;
    let parts: Vec<&str> = rest.split(':').collect();
    if parts.len() != 3 {
        bail!("sweep spec '{spec}' is not name=start:end:count");
    }
    let start: f64 = parts[0].parse()?;
    let end: f64 = parts[1].parse()?;
    let count: usize = parts[2].parse()?;
    if count < 2 {
        bail!("sweep needs at least two grid points");
    }
    let grid = (0..count)
        .map(|i| start + (end - start) * i as f64 / (count - 1) as f64)
        .collect();
    Ok((name.to_string(), grid))
}
