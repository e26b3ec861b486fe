//! Training loop pieces: Adam, the triangular cyclic schedule, paired
//! augmentation, and the single step that ties forward, loss, backward, and
//! the update together.

use serde::{Deserialize, Serialize};

use crate::attention::IrmAblation;
use crate::error::{Error, Result};
use crate::maps;
use crate::params::{ParamId, ParamStore};
use crate::rng::{uniform_usize, SeedRng};
use crate::tensor::{Tape, Tensor};

use super::losses::total_loss;
use super::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub crop: usize,
    pub base_lr: f64,
    pub peak_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda_psnr: f64,
    pub lambda_edge: f64,
    pub lambda_udl: f64,
    pub augment: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            steps: 2000,
            batch_size: 1,
            crop: 64,
            base_lr: 3e-4,
            peak_lr: 3.6e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda_psnr: 1.0,
            lambda_edge: 0.2,
            lambda_udl: 1.0,
            augment: true,
            checkpoint_every: 500,
        }
    }
}

/// Triangular cyclic rate: climbs from `base_lr` to `peak_lr` and back over
/// each period of `steps/4`.
pub fn cyclic_lr(step: usize, cfg: &TrainConfig) -> f64 {
    let period = (cfg.steps / 4).max(1);
    let phase = (step % period) as f64 / period as f64;
    let tri = 1.0 - (2.0 * phase - 1.0).abs();
    cfg.base_lr + (cfg.peak_lr - cfg.base_lr) * tri
}

/// Standard Adam with bias correction, one slot per registered parameter.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Adam {
        let sizes: Vec<usize> = store.iter().map(|(_, _, t)| t.numel()).collect();
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    /// Applies one update from the gradients the tape routed to parameter
    /// slots. Parameters the loss never reached are left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        tape: &Tape,
        grads: &crate::tensor::Gradients,
        lr: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for &(slot, node) in tape.param_nodes() {
            let Some(g) = grads.node(node) else { continue };
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let p = store.value_mut(ParamId(slot)).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Per-step log record.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub psnr_term: f64,
    pub edge_term: f64,
    pub udl_term: f64,
}

/// Horizontal flip and quarter-turn rotation, drawn once and applied
/// identically to both images so the pair stays pixel-aligned.
pub fn augment_pair(rain: &Tensor, clean: &Tensor, rng: &mut SeedRng) -> (Tensor, Tensor) {
    let flip = uniform_usize(rng, 0, 1) == 1;
    let quarter_turns = uniform_usize(rng, 0, 3);
    (
        transform_image(rain, flip, quarter_turns),
        transform_image(clean, flip, quarter_turns),
    )
}

fn transform_image(t: &Tensor, flip: bool, quarter_turns: usize) -> Tensor {
    let s = t.shape();
    let (c, mut h, mut w) = (s[0], s[1], s[2]);
    let mut data = t.data().to_vec();
    if flip {
        let mut out = vec![0.0; data.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[ch * h * w + y * w + x] = data[ch * h * w + y * w + (w - 1 - x)];
                }
            }
        }
        data = out;
    }
    for _ in 0..quarter_turns {
        // clockwise: out(y, x) = in(h-1-x, y), dims swap
        let mut out = vec![0.0; data.len()];
        let (oh, ow) = (w, h);
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    out[ch * oh * ow + y * ow + x] = data[ch * h * w + (h - 1 - x) * w + y];
                }
            }
        }
        data = out;
        h = oh;
        w = ow;
    }
    Tensor::new(vec![c, h, w], data).expect("transform keeps element count")
}

/// Identical random crop from both images.
pub fn random_crop_pair(
    rain: &Tensor,
    clean: &Tensor,
    crop: usize,
    rng: &mut SeedRng,
) -> Result<(Tensor, Tensor)> {
    let s = rain.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if clean.shape() != s {
        return Err(Error::shape("crop pair: image shapes differ"));
    }
    if h < crop || w < crop {
        return Err(Error::shape(format!(
            "crop {crop} larger than image {h}x{w}"
        )));
    }
    if h == crop && w == crop {
        return Ok((
            Tensor::new(s.to_vec(), rain.data().to_vec())?,
            Tensor::new(s.to_vec(), clean.data().to_vec())?,
        ));
    }
    let oy = uniform_usize(rng, 0, h - crop);
    let ox = uniform_usize(rng, 0, w - crop);
    let map = maps::crop(c, h, w, crop, crop, oy, ox);
    let pick = |t: &Tensor| {
        let d = t.data();
        Tensor::new(vec![c, crop, crop], map.iter().map(|&i| d[i]).collect())
    };
    Ok((pick(rain)?, pick(clean)?))
}

/// One optimization step over a batch of (rain, clean) crop pairs.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore,
    adam: &mut Adam,
    batch: &[(Tensor, Tensor)],
    step: usize,
    cfg: &TrainConfig,
    abl: &IrmAblation,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::config("train_step: empty batch"));
    }
    let mut tape = Tape::new();
    let mut total: Option<Tensor> = None;
    let mut psnr_term = 0.0;
    let mut edge_term = 0.0;
    let mut udl_term = 0.0;
    for (i, (rain, clean)) in batch.iter().enumerate() {
        let out = model.forward(&mut tape, store, rain, abl)?;
        let (hp, wp) = out.padded;
        let (h, w) = (clean.shape()[1], clean.shape()[2]);
        let gt_padded = if (hp, wp) == (h, w) {
            Tensor::new(clean.shape().to_vec(), clean.data().to_vec())?
        } else {
            let map = maps::reflect_pad(3, h, w, hp - h, wp - w);
            let d = clean.data();
            Tensor::new(vec![3, hp, wp], map.iter().map(|&j| d[j]).collect())?
        };
        let terms = total_loss(
            &mut tape,
            &out,
            &gt_padded,
            cfg.lambda_psnr,
            cfg.lambda_edge,
            cfg.lambda_udl,
        )?;
        if !terms.total.item()?.is_finite() {
            return Err(Error::domain(format!(
                "non-finite loss at step {step}, batch item {i}: psnr {} edge {} udl {}",
                terms.psnr_term, terms.edge_term, terms.udl_term
            )));
        }
        psnr_term += terms.psnr_term;
        edge_term += terms.edge_term;
        udl_term += terms.udl_term;
        total = Some(match total {
            Some(acc) => tape.add(&acc, &terms.total)?,
            None => terms.total,
        });
    }
    let n = batch.len() as f64;
    let mean = tape.mul_scalar(&total.expect("nonempty batch"), 1.0 / n);
    let total_val = mean.item()?;
    let grads = tape.backward(&mean)?;
    let lr = cyclic_lr(step, cfg);
    adam.step(store, &tape, &grads, lr);
    Ok(StepStats {
        step,
        lr,
        total: total_val,
        psnr_term: psnr_term / n,
        edge_term: edge_term / n,
        udl_term: udl_term / n,
    })
}
