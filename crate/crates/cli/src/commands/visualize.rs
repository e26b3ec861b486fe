//! `ssattn visualize`: sampling-coordinate overlays, per-stage uncertainty
//! heatmaps, and the derained output.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};

use ssattn_core::attention::IrmAblation;
use ssattn_core::model::{config_digest, load_checkpoint};
use ssattn_core::raingen::clamp01;
use ssattn_core::tensor::{Tape, Tensor};

use crate::config::RunConfig;
use crate::pngio::{load_png, save_png};

use super::build_model;

/// Fixed per-head marker colors for the sampled points.
const HEAD_COLORS: [[f64; 3]; 8] = [
    [1.0, 0.1, 0.1],
    [0.1, 1.0, 0.1],
    [0.2, 0.4, 1.0],
    [1.0, 0.2, 1.0],
    [1.0, 0.9, 0.1],
    [0.1, 1.0, 1.0],
    [1.0, 0.6, 0.2],
    [0.8, 0.8, 0.8],
];

/// Fixed three-stop colormap for the sigma heatmaps.
fn heat_color(v: f64) -> [f64; 3] {
    let stops = [
        (0.0, [0.05, 0.05, 0.35]),
        (0.5, [0.7, 0.15, 0.45]),
        (1.0, [1.0, 0.9, 0.25]),
    ];
    let v = v.clamp(0.0, 1.0);
    for w in stops.windows(2) {
        let (t0, c0) = w[0];
        let (t1, c1) = w[1];
        if v <= t1 {
            let t = (v - t0) / (t1 - t0);
            return [
                c0[0] + t * (c1[0] - c0[0]),
                c0[1] + t * (c1[1] - c0[1]),
                c0[2] + t * (c1[2] - c0[2]),
            ];
        }
    }
    stops[2].1
}

fn put_px(img: &mut Tensor, h: usize, w: usize, y: isize, x: isize, color: [f64; 3]) {
    if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
        return;
    }
    let (y, x) = (y as usize, x as usize);
    let hw = h * w;
    let d = img.data_mut();
    for c in 0..3 {
        d[c * hw + y * w + x] = color[c];
    }
}

pub fn cmd_visualize(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut cfg = cfg.clone();
    let out = cfg.out_dir.clone();
    cfg.finalize(&out)?;

    let (mut store, model) = build_model(&cfg, &cfg.model)?;
    load_checkpoint(&cfg.visualize.checkpoint, &mut store, config_digest(&cfg.model))
        .with_context(|| format!("loading {}", cfg.visualize.checkpoint.display()))?;
    let input = load_png(&cfg.visualize.image)?;
    let (h, w) = (input.shape()[1], input.shape()[2]);

    store.set_frozen(true);
    let mut tape = Tape::new();
    let (fwd, trace) =
        model.forward_traced(&mut tape, &store, &input, &IrmAblation::default(), true)?;
    store.set_frozen(false);

    let stage = cfg.visualize.stage;
    if stage >= fwd.stages.len() {
        bail!(
            "config error: stage {stage} out of range (model has {})",
            fwd.stages.len()
        );
    }
    let mut written = Vec::new();

    // (a) sampling overlay on the input
    let ssa = trace.ssa[stage]
        .as_ref()
        .with_context(|| format!("stage {stage} has no sampling block to trace"))?;
    let (sh, sw) = trace.stage_dims[stage];
    if cfg.visualize.window >= ssa.windows {
        bail!(
            "config error: window {} out of range (stage {stage} has {} windows)",
            cfg.visualize.window,
            ssa.windows
        );
    }
    let scale_y = h as f64 / sh as f64;
    let scale_x = w as f64 / sw as f64;
    let mut overlay = Tensor::new(input.shape().to_vec(), input.data().to_vec())?;
    let win = ssa.window_side;
    let grid_w = sw / win;
    let (wy, wx) = (cfg.visualize.window / grid_w, cfg.visualize.window % grid_w);
    let y0 = (wy * win) as f64 * scale_y;
    let y1 = ((wy + 1) * win) as f64 * scale_y - 1.0;
    let x0 = (wx * win) as f64 * scale_x;
    let x1 = ((wx + 1) * win) as f64 * scale_x - 1.0;
    let outline = [1.0, 1.0, 0.2];
    for y in y0 as isize..=y1 as isize {
        put_px(&mut overlay, h, w, y, x0 as isize, outline);
        put_px(&mut overlay, h, w, y, x1 as isize, outline);
    }
    for x in x0 as isize..=x1 as isize {
        put_px(&mut overlay, h, w, y0 as isize, x, outline);
        put_px(&mut overlay, h, w, y1 as isize, x, outline);
    }
    let n = win * win;
    for head in 0..ssa.heads {
        let color = HEAD_COLORS[head % HEAD_COLORS.len()];
        for t in 0..n {
            let i = ((cfg.visualize.window * ssa.heads + head) * n + t) * 2;
            let px = ssa.coords_px[i] * scale_x;
            let py = ssa.coords_px[i + 1] * scale_y;
            for dy in 0..2isize {
                for dx in 0..2isize {
                    put_px(&mut overlay, h, w, py as isize + dy, px as isize + dx, color);
                }
            }
        }
    }
    let overlay_path = out.join("sampling_overlay.png");
    save_png(&overlay_path, &overlay)?;
    written.push(overlay_path);

    // (b) per-stage uncertainty heatmaps, sigma normalized per image
    for (si, stage_out) in fwd.stages.iter().enumerate() {
        let ls = stage_out.log_sigma.data();
        let sigma: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in &sigma {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = (hi - lo).max(1e-12);
        let (sh, sw) = (stage_out.log_sigma.shape()[1], stage_out.log_sigma.shape()[2]);
        let mut heat = Tensor::zeros(vec![3, sh, sw]);
        {
            let hw = sh * sw;
            let d = heat.data_mut();
            for i in 0..hw {
                let c = heat_color((sigma[i] - lo) / span);
                for ch in 0..3 {
                    d[ch * hw + i] = c[ch];
                }
            }
        }
        let path = out.join(format!("uncertainty_stage{si}.png"));
        save_png(&path, &heat)?;
        written.push(path);
    }

    // (c) the derained output
    let derained_path = out.join("derained.png");
    save_png(&derained_path, &clamp01(&fwd.final_out))?;
    written.push(derained_path);

    Ok(written)
}
