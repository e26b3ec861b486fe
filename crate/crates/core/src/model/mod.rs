//! The toy restoration network: convolutional encoder, vanilla transformer
//! latent, and a decoder of alternating sampling / local-reconstruction
//! blocks with per-stage uncertainty heads.
//!
//! The decoder is the mechanism under study; encoder and latent are declared
//! minimal substitutes. Every stage ends in two zero-initialized 1x1 heads
//! (residual image, log sigma), so a fresh model is the identity map and the
//! first uncertainty estimate is sigma = 1.

mod checkpoint;
mod losses;
mod train;

pub use checkpoint::{config_digest, load_checkpoint, save_checkpoint};
pub use losses::{downsample_area, edge_loss, psnr_loss, total_loss, LossTerms};
pub use train::{augment_pair, cyclic_lr, random_crop_pair, train_step, Adam, StepStats, TrainConfig};

use serde::{Deserialize, Serialize};

use crate::attention::{
    alternating_blocks, AttentionBlockConfig, IrmAblation, IrmBlock, LayerNorm, SamplingVariant,
    SsaTrace,
};
use crate::error::{Error, Result};
use crate::maps;
use crate::params::{init_conv, init_trunc_normal, ParamId, ParamStore};
use crate::rng::SeedRng;
use crate::tensor::{Tape, Tensor};
use crate::uncertainty::UncertaintyMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub levels: usize,
    pub channels: Vec<usize>,
    pub irm_blocks: Vec<usize>,
    pub heads: Vec<usize>,
    pub latent_blocks: usize,
    pub latent_heads: usize,
    pub window_side: usize,
    pub beta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub k_fraction: f64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults; the full-scale reference uses five levels with
    /// channels {16..256}, stage depths {3,6,7,8}, heads {1,2,4,8}, eight
    /// latent blocks, and 8x8 windows.
    fn default() -> ModelConfig {
        ModelConfig {
            levels: 3,
            channels: vec![8, 16, 32],
            irm_blocks: vec![2, 2, 2],
            heads: vec![1, 2, 4],
            latent_blocks: 2,
            latent_heads: 4,
            window_side: 4,
            beta: 0.6,
            gamma: 0.8,
            alpha: 0.2,
            k_fraction: 0.8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0
            || self.channels.len() != self.levels
            || self.irm_blocks.len() != self.levels
            || self.heads.len() != self.levels
        {
            return Err(Error::config(format!(
                "model config: levels {} needs matching channels/irm_blocks/heads lists",
                self.levels
            )));
        }
        if !self.channels.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::config("channels must strictly increase with depth"));
        }
        for (c, h) in self.channels.iter().zip(&self.heads) {
            if c % h != 0 {
                return Err(Error::config(format!("channels {c} not divisible by heads {h}")));
            }
        }
        let top = *self.channels.last().unwrap();
        if top % self.latent_heads != 0 {
            return Err(Error::config(format!(
                "latent channels {top} not divisible by latent heads {}",
                self.latent_heads
            )));
        }
        if self.window_side == 0 || self.latent_blocks == 0 {
            return Err(Error::config("window_side and latent_blocks must be positive"));
        }
        Ok(())
    }

    /// Spatial divisor the input is padded to: window * 2^(levels-1).
    pub fn pad_multiple(&self) -> usize {
        self.window_side << (self.levels - 1)
    }

    fn block_cfg(&self, level: usize) -> AttentionBlockConfig {
        AttentionBlockConfig {
            channels: self.channels[level],
            heads: self.heads[level],
            window_side: self.window_side,
            beta: self.beta,
            gamma: self.gamma,
            alpha: self.alpha,
            k_fraction: self.k_fraction,
        }
    }
}

/// One stage's converted outputs, at that stage's scale.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub derained: Tensor,
    pub log_sigma: Tensor,
}

/// Everything a forward pass produces. Stage outputs live on the padded
/// domain (coarse to fine); `final_out` is cropped back to the input size.
pub struct ForwardOutput {
    pub final_out: Tensor,
    pub stages: Vec<StageOutput>,
    pub padded: (usize, usize),
}

/// Sampling coordinates captured for visualization, one entry per stage
/// (from that stage's first sampling block).
pub struct ForwardTrace {
    pub ssa: Vec<Option<SsaTrace>>,
    pub stage_dims: Vec<(usize, usize)>,
}

struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        rng: &mut SeedRng,
    ) -> Conv {
        Conv {
            w: store.register(format!("{name}_w"), init_conv(vec![c_out, c_in, k, k], rng)),
            b: store.register(format!("{name}_b"), Tensor::zeros(vec![c_out])),
        }
    }

    fn new_zero(store: &mut ParamStore, name: &str, c_out: usize, c_in: usize, k: usize) -> Conv {
        Conv {
            w: store.register(format!("{name}_w"), Tensor::zeros(vec![c_out, c_in, k, k])),
            b: store.register(format!("{name}_b"), Tensor::zeros(vec![c_out])),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let w = store.watch(tape, self.w);
        let b = store.watch(tape, self.b);
        tape.conv2d(x, &w, &b)
    }
}

/// conv -> channel layer norm -> gelu.
struct ConvBlock {
    conv: Conv,
    norm: LayerNorm,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut SeedRng) -> ConvBlock {
        ConvBlock {
            conv: Conv::new(store, &format!("{name}.conv"), channels, channels, 3, rng),
            norm: LayerNorm::new(store, name, channels),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let c = self.conv.forward(tape, store, x)?;
        let n = self.norm.forward(tape, store, &c)?;
        Ok(tape.gelu(&n))
    }
}

/// Pre-norm global multi-head self-attention plus FFN over the latent map.
struct LatentBlock {
    ln1: LayerNorm,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bq: ParamId,
    bk: ParamId,
    bv: ParamId,
    bo: ParamId,
    heads: usize,
    channels: usize,
    ln2: LayerNorm,
    ffn: crate::attention::Ffn,
}

impl LatentBlock {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        heads: usize,
        rng: &mut SeedRng,
    ) -> LatentBlock {
        let mut mat = |store: &mut ParamStore, n: &str| {
            store.register(format!("{prefix}.{n}"), init_trunc_normal(vec![channels, channels], 0.02, rng))
        };
        let wq = mat(store, "wq");
        let wk = mat(store, "wk");
        let wv = mat(store, "wv");
        let wo = store.register(format!("{prefix}.wo"), Tensor::zeros(vec![channels, channels]));
        let bq = store.register(format!("{prefix}.bq"), Tensor::zeros(vec![channels]));
        let bk = store.register(format!("{prefix}.bk"), Tensor::zeros(vec![channels]));
        let bv = store.register(format!("{prefix}.bv"), Tensor::zeros(vec![channels]));
        let bo = store.register(format!("{prefix}.bo"), Tensor::zeros(vec![channels]));
        LatentBlock {
            ln1: LayerNorm::new(store, &format!("{prefix}.n1"), channels),
            wq,
            wk,
            wv,
            wo,
            bq,
            bk,
            bv,
            bo,
            heads,
            channels,
            ln2: LayerNorm::new(store, &format!("{prefix}.n2"), channels),
            ffn: crate::attention::Ffn::new(store, prefix, channels, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let t = h * w;
        let (heads, d) = (self.heads, self.channels / self.heads);

        let xn = self.ln1.forward(tape, store, x)?;
        let flat = tape.reshape(&xn, vec![c, t])?;
        let tokens = tape.swap_last2(&flat)?; // [T, C]

        let project = |tape: &mut Tape, wm: ParamId, bm: ParamId, t_in: &Tensor| -> Result<Tensor> {
            let wt = store.watch(tape, wm);
            let bt = store.watch(tape, bm);
            let y = tape.matmul(t_in, &wt)?;
            tape.add(&y, &bt)
        };
        let q = project(tape, self.wq, self.bq, &tokens)?;
        let k = project(tape, self.wk, self.bk, &tokens)?;
        let v = project(tape, self.wv, self.bv, &tokens)?;
        let split = maps::split_heads(1, t, c, heads);
        let q = tape.gather(&q, split.clone(), vec![heads, t, d])?;
        let k = tape.gather(&k, split.clone(), vec![heads, t, d])?;
        let v = tape.gather(&v, split, vec![heads, t, d])?;

        let kt = tape.swap_last2(&k)?;
        let logits = tape.matmul(&q, &kt)?;
        let scaled = tape.mul_scalar(&logits, 1.0 / (d as f64).sqrt());
        let attn = tape.softmax(&scaled, 2)?;
        let out = tape.matmul(&attn, &v)?; // [heads, T, d]
        let merged = tape.gather(&out, maps::merge_heads(1, t, c, heads), vec![t, c])?;
        let proj = project(tape, self.wo, self.bo, &merged)?;
        let back = tape.swap_last2(&proj)?;
        let attn_map = tape.reshape(&back, vec![c, h, w])?;

        let x1 = tape.add(x, &attn_map)?;
        let x1n = self.ln2.forward(tape, store, &x1)?;
        let f = self.ffn.forward(tape, store, &x1n)?;
        tape.add(&x1, &f)
    }
}

struct Stage {
    up: Option<Conv>,
    reduce: Conv,
    blocks: Vec<IrmBlock>,
    head_img: Conv,
    head_sigma: Conv,
}

pub struct Model {
    pub cfg: ModelConfig,
    variant: SamplingVariant,
    stem: Conv,
    enc_blocks: Vec<Vec<ConvBlock>>,
    down: Vec<Conv>,
    latent: Vec<LatentBlock>,
    stages: Vec<Stage>,
}

impl Model {
    pub fn new(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        variant: SamplingVariant,
        rng: &mut SeedRng,
    ) -> Result<Model> {
        cfg.validate()?;
        let l = cfg.levels;
        let stem = Conv::new(store, "stem", cfg.channels[0], 3, 3, rng);
        let mut enc_blocks = Vec::new();
        let mut down = Vec::new();
        for level in 0..l {
            let c = cfg.channels[level];
            enc_blocks.push(vec![
                ConvBlock::new(store, &format!("enc.l{level}.b0"), c, rng),
                ConvBlock::new(store, &format!("enc.l{level}.b1"), c, rng),
            ]);
            if level + 1 < l {
                down.push(Conv::new(
                    store,
                    &format!("down.l{level}"),
                    cfg.channels[level + 1],
                    c,
                    3,
                    rng,
                ));
            }
        }
        let top = *cfg.channels.last().unwrap();
        let latent = (0..cfg.latent_blocks)
            .map(|i| LatentBlock::new(store, &format!("latent.b{i}"), top, cfg.latent_heads, rng))
            .collect();

        // decoder stages, coarsest first
        let mut stages = Vec::new();
        for level in (0..l).rev() {
            let c = cfg.channels[level];
            let prefix = format!("dec.l{level}");
            let up = if level + 1 < l {
                Some(Conv::new(
                    store,
                    &format!("{prefix}.up"),
                    c,
                    cfg.channels[level + 1],
                    3,
                    rng,
                ))
            } else {
                None
            };
            let reduce = Conv::new(store, &format!("{prefix}.reduce"), c, 2 * c, 3, rng);
            let blocks = alternating_blocks(
                store,
                &prefix,
                cfg.block_cfg(level),
                cfg.irm_blocks[level],
                variant,
                rng,
            )?;
            let head_img = Conv::new_zero(store, &format!("{prefix}.head_img"), 3, c, 1);
            let head_sigma = Conv::new_zero(store, &format!("{prefix}.head_sigma"), 1, c, 1);
            stages.push(Stage {
                up,
                reduce,
                blocks,
                head_img,
                head_sigma,
            });
        }
        Ok(Model {
            cfg: cfg.clone(),
            variant,
            stem,
            enc_blocks,
            down,
            latent,
            stages,
        })
    }

    pub fn variant(&self) -> SamplingVariant {
        self.variant
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Tensor,
        abl: &IrmAblation,
    ) -> Result<ForwardOutput> {
        Ok(self.forward_traced(tape, store, x, abl, false)?.0)
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Tensor,
        abl: &IrmAblation,
        want_trace: bool,
    ) -> Result<(ForwardOutput, ForwardTrace)> {
        let shape = x.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape(format!("model expects [3,H,W], got {shape:?}")));
        }
        let (h, w) = (shape[1], shape[2]);
        let m = self.cfg.pad_multiple();
        let hp = h.div_ceil(m) * m;
        let wp = w.div_ceil(m) * m;
        if hp - h >= h || wp - w >= w {
            return Err(Error::config(format!(
                "input {h}x{w} too small to reflect-pad to a multiple of {m}"
            )));
        }
        let xp = if hp == h && wp == w {
            x.clone()
        } else {
            tape.gather(x, maps::reflect_pad(3, h, w, hp - h, wp - w), vec![3, hp, wp])?
        };

        // encoder
        let mut skips = Vec::with_capacity(self.cfg.levels);
        let mut feat = self.stem.forward(tape, store, &xp)?;
        let mut dims = (hp, wp);
        for level in 0..self.cfg.levels {
            for block in &self.enc_blocks[level] {
                feat = block.forward(tape, store, &feat)?;
            }
            skips.push((feat.clone(), dims));
            if level + 1 < self.cfg.levels {
                let conv = self.down[level].forward(tape, store, &feat)?;
                let c = conv.shape()[0];
                feat = tape.gather(
                    &conv,
                    maps::subsample2(c, dims.0, dims.1),
                    vec![c, dims.0 / 2, dims.1 / 2],
                )?;
                dims = (dims.0 / 2, dims.1 / 2);
            }
        }

        // latent global modeling at the coarsest scale
        for block in &self.latent {
            feat = block.forward(tape, store, &feat)?;
        }

        // decoder, coarsest stage first
        let mut stages_out: Vec<StageOutput> = Vec::with_capacity(self.cfg.levels);
        let mut traces = Vec::with_capacity(self.cfg.levels);
        let mut stage_dims = Vec::with_capacity(self.cfg.levels);
        let mut prev_log_sigma: Option<Tensor> = None;
        for (si, stage) in self.stages.iter().enumerate() {
            let level = self.cfg.levels - 1 - si;
            let (sh, sw) = (hp >> level, wp >> level);
            stage_dims.push((sh, sw));
            let (skip, _) = &skips[level];
            let merged = if let Some(up) = &stage.up {
                let c_in = feat.shape()[0];
                let upsampled = tape.gather(
                    &feat,
                    maps::upsample_nearest(c_in, sh / 2, sw / 2),
                    vec![c_in, sh, sw],
                )?;
                let up_feat = up.forward(tape, store, &upsampled)?;
                tape.concat0(&up_feat, skip)?
            } else {
                tape.concat0(&feat, skip)?
            };
            let mut f = stage.reduce.forward(tape, store, &merged)?;

            // uncertainty for this stage's ranking paths: previous stage's
            // head output upsampled, or the neutral map for the first stage.
            // Bilinear, not nearest: repeated values would tie whole ranking
            // groups and collapse the top-k masks.
            let u = match &prev_log_sigma {
                Some(ls) => {
                    let data = upsample2_bilinear(ls.data(), sh / 2, sw / 2);
                    UncertaintyMap::from_log_sigma(&Tensor::new(vec![1, sh, sw], data)?)?
                }
                None => UncertaintyMap::neutral(vec![1, sh, sw]),
            };

            let mut stage_trace = None;
            for block in &stage.blocks {
                let (out, tr) = block.forward_traced(tape, store, &f, &u, abl, want_trace && stage_trace.is_none())?;
                f = out;
                if stage_trace.is_none() {
                    stage_trace = tr;
                }
            }
            traces.push(stage_trace);

            let residual = stage.head_img.forward(tape, store, &f)?;
            let log_sigma = stage.head_sigma.forward(tape, store, &f)?;
            let base = losses::downsample_area(&plain(&xp)?, 1 << level)?;
            let derained = tape.add(&base, &residual)?;
            stages_out.push(StageOutput {
                derained,
                log_sigma: log_sigma.clone(),
            });
            prev_log_sigma = Some(plain(&stages_out.last().unwrap().log_sigma)?);
            feat = f;
        }

        let final_padded = &stages_out.last().unwrap().derained;
        let final_out = if hp == h && wp == w {
            final_padded.clone()
        } else {
            tape.gather(final_padded, maps::crop(3, hp, wp, h, w, 0, 0), vec![3, h, w])?
        };
        Ok((
            ForwardOutput {
                final_out,
                stages: stages_out,
                padded: (hp, wp),
            },
            ForwardTrace {
                ssa: traces,
                stage_dims,
            },
        ))
    }

    /// Inference: frozen parameters, clamped output, original size.
    pub fn infer(&self, store: &mut ParamStore, x: &Tensor) -> Result<Tensor> {
        let was_frozen = store.frozen();
        store.set_frozen(true);
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, x, &IrmAblation::default());
        store.set_frozen(was_frozen);
        let out = out?;
        Ok(crate::raingen::clamp01(&out.final_out))
    }
}

/// Untracked copy of a tensor's current value.
fn plain(t: &Tensor) -> Result<Tensor> {
    Tensor::new(t.shape().to_vec(), t.data().to_vec())
}

/// 2x bilinear upsampling of a single-channel map at half-pixel centers.
fn upsample2_bilinear(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        let py = ((y as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = (py.floor() as usize).min(h.saturating_sub(2));
        let ty = py - y0 as f64;
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..ow {
            let px = ((x as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = (px.floor() as usize).min(w.saturating_sub(2));
            let tx = px - x0 as f64;
            let x1 = (x0 + 1).min(w - 1);
            out[y * ow + x] = (1.0 - ty) * ((1.0 - tx) * src[y0 * w + x0] + tx * src[y0 * w + x1])
                + ty * ((1.0 - tx) * src[y1 * w + x0] + tx * src[y1 * w + x1]);
        }
    }
    out
}
