//! `ssattn eval`: PSNR/SSIM on the luminance channel over a test set, plus
//! the degraded-input baseline for the improvement delta.

use std::fmt::Write as _;

use anyhow::{Context, Result};

use ssattn_core::metrics::{psnr, rgb_to_y, ssim, ImageMetrics, MetricReport};
use ssattn_core::model::{config_digest, load_checkpoint, Model};
use ssattn_core::params::ParamStore;
use ssattn_core::tensor::Tensor;

use crate::config::RunConfig;
use crate::dataset::load_pairs;

use super::build_model;

/// Scores every (rain, clean) pair: model output vs clean, and the raw
/// degraded input as baseline. Y-channel metrics throughout.
pub fn evaluate_pairs(
    model: &Model,
    store: &mut ParamStore,
    pairs: &[(Tensor, Tensor)],
) -> Result<MetricReport> {
    let mut per_image = Vec::with_capacity(pairs.len());
    for (i, (rain, clean)) in pairs.iter().enumerate() {
        let derained = model.infer(store, rain)?;
        let dy = rgb_to_y(&derained)?;
        let cy = rgb_to_y(clean)?;
        let ry = rgb_to_y(rain)?;
        per_image.push(ImageMetrics {
            name: format!("{i}"),
            psnr_db: psnr(&dy, &cy, 1.0)?,
            ssim: ssim(&dy, &cy)?,
            baseline_psnr_db: psnr(&ry, &cy, 1.0)?,
        });
    }
    Ok(MetricReport::from_images(per_image))
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricReport> {
    let mut cfg = cfg.clone();
    let out = cfg.out_dir.clone();
    cfg.finalize(&out)?;

    let (mut store, model) = build_model(&cfg, &cfg.model)?;
    load_checkpoint(&cfg.eval.checkpoint, &mut store, config_digest(&cfg.model))
        .with_context(|| format!("loading {}", cfg.eval.checkpoint.display()))?;
    let pairs = load_pairs(&cfg.eval.data_dir)?;
    let report = evaluate_pairs(&model, &mut store, &pairs)?;

    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    let mut csv = String::from("name,psnr_db,ssim,baseline_psnr_db\n");
    for m in &report.per_image {
        writeln!(csv, "{},{},{},{}", m.name, m.psnr_db, m.ssim, m.baseline_psnr_db)?;
    }
    writeln!(
        csv,
        "mean,{},{},{}",
        report.mean_psnr_db, report.mean_ssim, report.mean_baseline_psnr_db
    )?;
    std::fs::write(out.join("report.csv"), csv)?;
    Ok(report)
}
