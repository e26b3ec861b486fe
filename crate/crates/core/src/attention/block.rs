//! The image reconstruction block: pre-norm residual attention (sampling or
//! local-reconstruction flavored) followed by a vanilla 4x-expansion FFN.

use crate::error::{Error, Result};
use crate::maps;
use crate::params::{init_trunc_normal, ParamId, ParamStore};
use crate::rng::SeedRng;
use crate::tensor::{Tape, Tensor};
use crate::uncertainty::{
    constraint_matrix, correlation_map, modulation_matrix, topk_row_mask, UncertaintyMap,
};

use super::offsets::{transform_coords, OffsetHead};
use super::{AttentionBlockConfig, WindowAttention};

/// Which of the two alternating roles a block plays.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IrmKind {
    /// Global sampling slot (SSA by default).
    Sampling,
    /// Local reconstruction slot.
    Local,
}

/// What fills the sampling slot; everything but `Ssa` exists for the
/// attention-variant ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingVariant {
    /// Learned sparse sampling (the real mechanism).
    Ssa,
    /// Plain window self-attention.
    Wsa,
    /// Channel (transposed) self-attention.
    Csa,
    /// Fixed-interval dilated sampling, no learning.
    Sa,
}

impl std::str::FromStr for SamplingVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<SamplingVariant> {
        match s.to_ascii_lowercase().as_str() {
            "ssa" => Ok(SamplingVariant::Ssa),
            "wsa" => Ok(SamplingVariant::Wsa),
            "csa" => Ok(SamplingVariant::Csa),
            "sa" => Ok(SamplingVariant::Sa),
            other => Err(Error::config(format!("unknown attention variant '{other}'"))),
        }
    }
}

/// Ablation switches mirroring the uncertainty-driven / ranking-strategy
/// rows of the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IrmAblation {
    /// SSA w/o UD: no constraint gating at all.
    pub ssa_no_ud: bool,
    /// SSA w/o RS: gate with the raw (normalized) uncertainty, no ranking.
    pub ssa_no_rs: bool,
    /// LR w/o UD: no logit modulation.
    pub lr_no_ud: bool,
    /// LR w/o RS: modulate by the raw correlation map, no top-k.
    pub lr_no_rs: bool,
}

/// Channel layer norm over `[C,H,W]`, one (gamma, beta) pair per channel.
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
    channels: usize,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> LayerNorm {
        LayerNorm {
            gamma: store.register(format!("{prefix}.ln_g"), Tensor::full(vec![channels, 1, 1], 1.0)),
            beta: store.register(format!("{prefix}.ln_b"), Tensor::zeros(vec![channels, 1, 1])),
            channels,
            eps: 1e-6,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let c = self.channels;
        // channel mean/variance per pixel via a constant 1x1 averaging conv
        let avg_w = Tensor::full(vec![1, c, 1, 1], 1.0 / c as f64);
        let avg_b = Tensor::zeros(vec![1]);
        let mean = tape.conv2d(x, &avg_w, &avg_b)?; // [1,H,W]
        let centered = tape.sub(x, &mean)?;
        let sq = tape.mul(&centered, &centered)?;
        let var = tape.conv2d(&sq, &avg_w, &avg_b)?;
        let var_eps = tape.add_scalar(&var, self.eps);
        let std = tape.sqrt(&var_eps)?;
        let normed = tape.div(&centered, &std)?;
        let g = store.watch(tape, self.gamma);
        let b = store.watch(tape, self.beta);
        let scaled = tape.mul(&normed, &g)?;
        tape.add(&scaled, &b)
    }
}

/// Two 1x1 convolutions with 4x expansion and gelu, vanilla transformer
/// style; the second conv starts at zero.
pub struct Ffn {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Ffn {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut SeedRng) -> Ffn {
        let hidden = channels * 4;
        Ffn {
            w1: store.register(
                format!("{prefix}.ffn_w1"),
                init_trunc_normal(vec![hidden, channels, 1, 1], 0.02, rng),
            ),
            b1: store.register(format!("{prefix}.ffn_b1"), Tensor::zeros(vec![hidden])),
            w2: store.register(format!("{prefix}.ffn_w2"), Tensor::zeros(vec![channels, hidden, 1, 1])),
            b2: store.register(format!("{prefix}.ffn_b2"), Tensor::zeros(vec![channels])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let w1 = store.watch(tape, self.w1);
        let b1 = store.watch(tape, self.b1);
        let w2 = store.watch(tape, self.w2);
        let b2 = store.watch(tape, self.b2);
        let h = tape.conv2d(x, &w1, &b1)?;
        let a = tape.gelu(&h);
        tape.conv2d(&a, &w2, &b2)
    }
}

/// Sampling coordinates of one SSA forward, in pixels, for visualization.
pub struct SsaTrace {
    pub coords_px: Vec<f64>,
    pub windows: usize,
    pub heads: usize,
    pub window_side: usize,
}

/// One pre-norm residual reconstruction block.
pub struct IrmBlock {
    pub kind: IrmKind,
    pub variant: SamplingVariant,
    pub cfg: AttentionBlockConfig,
    ln1: LayerNorm,
    attn: WindowAttention,
    offsets: Option<OffsetHead>,
    ln2: LayerNorm,
    ffn: Ffn,
}

impl IrmBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: AttentionBlockConfig,
        kind: IrmKind,
        variant: SamplingVariant,
        rng: &mut SeedRng,
    ) -> Result<IrmBlock> {
        cfg.validate()?;
        let ln1 = LayerNorm::new(store, &format!("{prefix}.n1"), cfg.channels);
        let attn = WindowAttention::new(store, &format!("{prefix}.attn"), cfg, rng)?;
        let offsets = match (kind, variant) {
            (IrmKind::Sampling, SamplingVariant::Ssa) => Some(OffsetHead::new(
                store,
                &format!("{prefix}.attn"),
                cfg.channels,
                cfg.heads,
                cfg.window_side,
                rng,
            )),
            _ => None,
        };
        let ln2 = LayerNorm::new(store, &format!("{prefix}.n2"), cfg.channels);
        let ffn = Ffn::new(store, prefix, cfg.channels, rng);
        Ok(IrmBlock {
            kind,
            variant,
            cfg,
            ln1,
            attn,
            offsets,
            ln2,
            ffn,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Tensor,
        u: &UncertaintyMap,
        abl: &IrmAblation,
    ) -> Result<Tensor> {
        Ok(self.forward_traced(tape, store, x, u, abl, false)?.0)
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Tensor,
        u: &UncertaintyMap,
        abl: &IrmAblation,
        want_trace: bool,
    ) -> Result<(Tensor, Option<SsaTrace>)> {
        let shape = x.shape().to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.channels {
            return Err(Error::shape(format!(
                "irm block expects [{},H,W], got {shape:?}",
                self.cfg.channels
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        if h % self.cfg.window_side != 0 || w % self.cfg.window_side != 0 {
            return Err(Error::shape(format!(
                "irm block: {h}x{w} not divisible by window {}",
                self.cfg.window_side
            )));
        }

        let xn = self.ln1.forward(tape, store, x)?;
        let mut trace = None;
        let attn_out = match self.kind {
            IrmKind::Local => {
                let modulation = lr_modulation(u, &self.cfg, h, w, abl)?;
                self.attn.lr_forward(tape, store, &xn, modulation.as_ref())?
            }
            IrmKind::Sampling => match self.variant {
                SamplingVariant::Ssa => {
                    let gate = self.sampling_gate(u, abl)?;
                    let head = self.offsets.as_ref().expect("ssa block has an offset head");
                    let field = head.forward(tape, store, &xn, gate.as_ref())?;
                    if want_trace {
                        trace = Some(SsaTrace {
                            coords_px: field.pixel_coords(w / self.cfg.window_side),
                            windows: field.windows,
                            heads: field.heads,
                            window_side: field.window_side,
                        });
                    }
                    let coords = transform_coords(tape, &field, h, w)?;
                    self.attn.ssa_forward(tape, store, &xn, &coords)?
                }
                SamplingVariant::Wsa => self.attn.lr_forward(tape, store, &xn, None)?,
                SamplingVariant::Csa => self.attn.csa_forward(tape, store, &xn)?,
                SamplingVariant::Sa => {
                    let coords = self.fixed_dilated_coords(h, w);
                    self.attn.ssa_forward(tape, store, &xn, &coords)?
                }
            },
        };
        let x1 = tape.add(x, &attn_out)?;
        let x1n = self.ln2.forward(tape, store, &x1)?;
        let f = self.ffn.forward(tape, store, &x1n)?;
        let out = tape.add(&x1, &f)?;
        Ok((out, trace))
    }

    /// Constraint gate for the offset head: ranked `{beta,1}` matrix, raw
    /// normalized uncertainty (no-RS arm), or nothing (no-UD arm).
    fn sampling_gate(&self, u: &UncertaintyMap, abl: &IrmAblation) -> Result<Option<Tensor>> {
        if abl.ssa_no_ud {
            return Ok(None);
        }
        if abl.ssa_no_rs {
            let shape = u.sigma.shape().to_vec();
            let (c, hw) = (shape[0], shape[1] * shape[2]);
            let mut data = u.sigma.data().to_vec();
            for ch in 0..c {
                let chan = &mut data[ch * hw..(ch + 1) * hw];
                let max = chan.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if max > 1e-12 {
                    for v in chan.iter_mut() {
                        *v /= max;
                    }
                } else {
                    chan.fill(1.0);
                }
            }
            return Ok(Some(Tensor::new(shape, data)?));
        }
        let cm = constraint_matrix(u, self.cfg.gamma, self.cfg.beta)?;
        Ok(Some(cm.values))
    }


    /// Constant global lattice for the fixed-interval ablation: every window
    /// and head samples the same dilated grid spanning the whole map, with a
    /// small per-head phase shift.
    fn fixed_dilated_coords(&self, h: usize, w: usize) -> Tensor {
        let win = self.cfg.window_side;
        let heads = self.cfg.heads;
        let p = (h / win) * (w / win);
        let (sx, sy) = (w as f64 / win as f64, h as f64 / win as f64);
        Tensor::from_fn(vec![p, heads, win, win, 2], |i| {
            let pair = i / 2;
            let q = pair % win;
            let r = (pair / win) % win;
            let head = (pair / (win * win)) % heads;
            let phase = head as f64 / heads as f64;
            if i % 2 == 0 {
                let px = (q as f64 + phase) * sx;
                2.0 * px / (w.max(2) - 1) as f64 - 1.0
            } else {
                let py = (r as f64 + phase) * sy;
                2.0 * py / (h.max(2) - 1) as f64 - 1.0
            }
        })
    }
}

/// `[P,1,N,N]` logit modulation for the local-reconstruction path: per
/// window, the top-k row mask of the uncertainty correlation map mapped to
/// the `{1, 1+alpha}` two-point matrix. `None` for the no-UD arm; the no-RS
/// arm modulates by the raw (min-max normalized) correlation instead.
pub fn lr_modulation(
    u: &UncertaintyMap,
    cfg: &AttentionBlockConfig,
    h: usize,
    w: usize,
    abl: &IrmAblation,
) -> Result<Option<Tensor>> {
    if abl.lr_no_ud {
        return Ok(None);
    }
    let win = cfg.window_side;
    let n = win * win;
    let us = u.sigma.shape();
    if us.len() != 3 || us[1] != h || us[2] != w {
        return Err(Error::shape(format!(
            "uncertainty map {us:?} does not cover feature {h}x{w}"
        )));
    }
    let cu = us[0];
    let p = (h / win) * (w / win);
    let part = maps::partition(cu, h, w, win);
    let sled = u.sigma.data();
    let per = cu * n;
    let mut out = vec![0.0; p * n * n];
    for pi in 0..p {
        let patch_data: Vec<f64> = part[pi * per..(pi + 1) * per]
            .iter()
            .map(|&i| sled[i])
            .collect();
        let patch = Tensor::new(vec![cu, win, win], patch_data)?;
        let cr = correlation_map(&patch)?;
        let modulation = if abl.lr_no_rs {
            // raw correlation, min-max normalized per patch, no ranking
            let v = cr.values.data();
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &x in v {
                lo = lo.min(x);
                hi = hi.max(x);
            }
            let span = (hi - lo).max(1e-12);
            Tensor::new(
                vec![n, n],
                v.iter()
                    .map(|&x| -cfg.alpha * ((x - lo) / span) + 1.0 + cfg.alpha)
                    .collect(),
            )?
        } else {
            let mask = topk_row_mask(&cr, cfg.k_fraction)?;
            modulation_matrix(&mask, cfg.alpha)?
        };
        out[pi * n * n..(pi + 1) * n * n].copy_from_slice(modulation.data());
    }
    Ok(Some(Tensor::new(vec![p, 1, n, n], out)?))
}

/// Builds `count` alternating blocks for one stage: SSA, LR, SSA, LR, ...
/// starting with the sampling slot.
pub fn alternating_blocks(
    store: &mut ParamStore,
    prefix: &str,
    cfg: AttentionBlockConfig,
    count: usize,
    variant: SamplingVariant,
    rng: &mut SeedRng,
) -> Result<Vec<IrmBlock>> {
    (0..count)
        .map(|i| {
            let kind = if i % 2 == 0 { IrmKind::Sampling } else { IrmKind::Local };
            IrmBlock::new(store, &format!("{prefix}.b{i}"), cfg, kind, variant, rng)
        })
        .collect()
}
