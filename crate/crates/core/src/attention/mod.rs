//! Window attention machinery: sparse sampling attention with learned global
//! coordinates (SSA), correlation-ranked local reconstruction attention (LR),
//! and the alternating reconstruction block that combines them.
//!
//! Both attention paths work on non-overlapping `w x w` windows. SSA keeps
//! queries local but gathers keys/values by bilinear sampling at learned
//! affine-transformed coordinates over the whole feature map, gated by the
//! uncertainty constraint matrix. LR stays inside the window and multiplies
//! its attention logits by a two-point modulation built from the top-k
//! ranking of the uncertainty correlation map.

mod block;
mod offsets;

pub use block::{
    alternating_blocks, lr_modulation, Ffn, IrmAblation, IrmBlock, IrmKind, LayerNorm,
    SamplingVariant, SsaTrace,
};
pub use offsets::{transform_coords, OffsetHead, SamplingField};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::maps;
use crate::params::{init_trunc_normal, ParamId, ParamStore};
use crate::rng::SeedRng;
use crate::tensor::{Tape, Tensor};

/// Window-attention hyperparameters plus the ranking knobs.
#[derive(Clone, Copy, Debug)]
pub struct AttentionBlockConfig {
    pub channels: usize,
    pub heads: usize,
    pub window_side: usize,
    pub beta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub k_fraction: f64,
}

impl AttentionBlockConfig {
    /// Ranking defaults: beta 0.6, gamma 0.8, alpha 0.2, k 0.8.
    pub fn new(channels: usize, heads: usize, window_side: usize) -> AttentionBlockConfig {
        AttentionBlockConfig {
            channels,
            heads,
            window_side,
            beta: 0.6,
            gamma: 0.8,
            alpha: 0.2,
            k_fraction: 0.8,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn tokens(&self) -> usize {
        self.window_side * self.window_side
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.window_side == 0 {
            return Err(Error::config("attention config: zero extent"));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        Ok(())
    }
}

/// Tiles `[C,H,W]` into `[P,C,w,w]` non-overlapping windows, row-major.
pub fn window_partition(tape: &mut Tape, x: &Tensor, win: usize) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!(
            "window_partition expects [C,H,W], got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h % win != 0 || w % win != 0 {
        return Err(Error::shape(format!(
            "window_partition: {h}x{w} not divisible by window {win}"
        )));
    }
    let p = (h / win) * (w / win);
    tape.gather(x, maps::partition(c, h, w, win), vec![p, c, win, win])
}

/// Exact inverse of [`window_partition`].
pub fn window_merge(tape: &mut Tape, windows: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let shape = windows.shape();
    if shape.len() != 4 || shape[2] != shape[3] {
        return Err(Error::shape(format!(
            "window_merge expects [P,C,w,w], got {shape:?}"
        )));
    }
    let (p, c, win) = (shape[0], shape[1], shape[2]);
    if p * win * win != h * w || h % win != 0 || w % win != 0 {
        return Err(Error::shape(format!(
            "window_merge: {p} windows of {win}x{win} cannot tile {h}x{w}"
        )));
    }
    tape.gather(windows, maps::merge(c, h, w, win), vec![c, h, w])
}

/// Swin-style learnable relative position bias over in-window token pairs.
pub struct RelativePositionBias {
    pub table: ParamId,
    heads: usize,
    window_side: usize,
}

impl RelativePositionBias {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &AttentionBlockConfig,
        rng: &mut SeedRng,
    ) -> RelativePositionBias {
        let span = 2 * cfg.window_side - 1;
        let table = store.register(
            format!("{prefix}.pos_bias"),
            init_trunc_normal(vec![span * span, cfg.heads], 0.02, rng),
        );
        RelativePositionBias {
            table,
            heads: cfg.heads,
            window_side: cfg.window_side,
        }
    }

    /// Expands the table to `[heads, N, N]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore) -> Result<Tensor> {
        let table = store.watch(tape, self.table);
        let n = self.window_side * self.window_side;
        tape.gather(
            &table,
            maps::bias_index(self.window_side, self.heads),
            vec![self.heads, n, n],
        )
    }
}

/// Q/K/V/output projections shared by every attention flavor in a block.
pub struct WindowAttention {
    pub cfg: AttentionBlockConfig,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    pub bias: RelativePositionBias,
}

impl WindowAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: AttentionBlockConfig,
        rng: &mut SeedRng,
    ) -> Result<WindowAttention> {
        cfg.validate()?;
        let c = cfg.channels;
        let mut mat = |store: &mut ParamStore, name: &str| {
            store.register(format!("{prefix}.{name}"), init_trunc_normal(vec![c, c], 0.02, rng))
        };
        let wq = mat(store, "wq");
        let wk = mat(store, "wk");
        let wv = mat(store, "wv");
        // zero-init output projection: a fresh block is the identity
        let wo = store.register(format!("{prefix}.wo"), Tensor::zeros(vec![c, c]));
        let bq = store.register(format!("{prefix}.bq"), Tensor::zeros(vec![c]));
        let bk = store.register(format!("{prefix}.bk"), Tensor::zeros(vec![c]));
        let bv = store.register(format!("{prefix}.bv"), Tensor::zeros(vec![c]));
        let bo = store.register(format!("{prefix}.bo"), Tensor::zeros(vec![c]));
        let bias = RelativePositionBias::new(store, prefix, &cfg, rng);
        Ok(WindowAttention {
            cfg,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            bias,
        })
    }

    fn project(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &Tensor,
        w: ParamId,
        b: ParamId,
    ) -> Result<Tensor> {
        let wt = store.watch(tape, w);
        let bt = store.watch(tape, b);
        let y = tape.matmul(tokens, &wt)?;
        tape.add(&y, &bt)
    }

    /// Window token matrices `[P,N,C]` of a `[C,H,W]` map.
    fn window_tokens(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = dims3(x)?;
        let win = self.cfg.window_side;
        let p = (h / win) * (w / win);
        let n = self.cfg.tokens();
        tape.gather(x, maps::tokens(c, h, w, win), vec![p, n, c])
    }

    /// Sparse sampling attention: queries from the window's own tokens,
    /// keys/values from bilinear samples of the full map at the field's
    /// transformed coordinates (`[P,heads,w,w,2]`, normalized).
    pub fn ssa_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_norm: &Tensor,
        coords: &Tensor,
    ) -> Result<Tensor> {
        let (c, h, w) = dims3(x_norm)?;
        let cfg = &self.cfg;
        let (win, heads, n, d) = (cfg.window_side, cfg.heads, cfg.tokens(), cfg.head_dim());
        let p = (h / win) * (w / win);
        if coords.shape() != [p, heads, win, win, 2] {
            return Err(Error::shape(format!(
                "ssa coords shape {:?} != [{p},{heads},{win},{win},2]",
                coords.shape()
            )));
        }

        // sampled K/V token matrices, one per (window, head)
        let flat_coords = tape.reshape(coords, vec![p * heads, win, win, 2])?;
        let sampled = tape.grid_sample(x_norm, &flat_coords)?; // [P*heads, C, w, w]
        let sampled_tokens = sampled_to_tokens(tape, &sampled, p * heads, c, win)?; // [P*heads*N, C]

        let k_all = self.project(tape, store, &sampled_tokens, self.wk, self.bk)?;
        let v_all = self.project(tape, store, &sampled_tokens, self.wv, self.bv)?;
        // keep each head's own projection columns
        let slice = maps::slice_head_cols(p, heads, n, c);
        let k = tape.gather(&k_all, Arc::clone(&slice), vec![p, heads, n, d])?;
        let v = tape.gather(&v_all, slice, vec![p, heads, n, d])?;

        let q_tokens = self.window_tokens(tape, x_norm)?;
        let q_proj = self.project(tape, store, &q_tokens, self.wq, self.bq)?;
        let q = tape.gather(
            &q_proj,
            maps::split_heads(p, n, c, heads),
            vec![p, heads, n, d],
        )?;

        let out = self.attend(tape, store, &q, &k, &v, None, p)?;
        self.finish(tape, store, &out, c, h, w)
    }

    /// In-window attention; `modulation` (`[P,1,N,N]`) multiplies the scaled
    /// logits before the position bias is added. `None` is plain window
    /// self-attention.
    pub fn lr_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_norm: &Tensor,
        modulation: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (c, h, w) = dims3(x_norm)?;
        let cfg = &self.cfg;
        let (heads, n, d) = (cfg.heads, cfg.tokens(), cfg.head_dim());
        let win = cfg.window_side;
        let p = (h / win) * (w / win);

        let tokens = self.window_tokens(tape, x_norm)?;
        let split = maps::split_heads(p, n, c, heads);
        let q_proj = self.project(tape, store, &tokens, self.wq, self.bq)?;
        let k_proj = self.project(tape, store, &tokens, self.wk, self.bk)?;
        let v_proj = self.project(tape, store, &tokens, self.wv, self.bv)?;
        let q = tape.gather(&q_proj, Arc::clone(&split), vec![p, heads, n, d])?;
        let k = tape.gather(&k_proj, Arc::clone(&split), vec![p, heads, n, d])?;
        let v = tape.gather(&v_proj, split, vec![p, heads, n, d])?;

        let out = self.attend(tape, store, &q, &k, &v, modulation, p)?;
        self.finish(tape, store, &out, c, h, w)
    }

    /// Channel (transposed) attention: logits over projection channels
    /// instead of tokens. Ablation stand-in for the sampling slot.
    pub fn csa_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_norm: &Tensor,
    ) -> Result<Tensor> {
        let (c, h, w) = dims3(x_norm)?;
        let cfg = &self.cfg;
        let (heads, n, d) = (cfg.heads, cfg.tokens(), cfg.head_dim());
        let win = cfg.window_side;
        let p = (h / win) * (w / win);

        let tokens = self.window_tokens(tape, x_norm)?;
        let split = maps::split_heads(p, n, c, heads);
        let q_proj = self.project(tape, store, &tokens, self.wq, self.bq)?;
        let k_proj = self.project(tape, store, &tokens, self.wk, self.bk)?;
        let v_proj = self.project(tape, store, &tokens, self.wv, self.bv)?;
        let q = tape.gather(&q_proj, Arc::clone(&split), vec![p, heads, n, d])?;
        let k = tape.gather(&k_proj, Arc::clone(&split), vec![p, heads, n, d])?;
        let v = tape.gather(&v_proj, split, vec![p, heads, n, d])?;

        let qt = tape.swap_last2(&q)?; // [P,heads,d,N]
        let logits = tape.matmul(&qt, &k)?; // [P,heads,d,d]
        let scaled = tape.mul_scalar(&logits, 1.0 / (n as f64).sqrt());
        let attn = tape.softmax(&scaled, 3)?;
        let vt = tape.swap_last2(&v)?; // [P,heads,d,N]
        let out_t = tape.matmul(&attn, &vt)?; // [P,heads,d,N]
        let out = tape.swap_last2(&out_t)?; // [P,heads,N,d]
        self.finish(tape, store, &out, c, h, w)
    }

    fn attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        modulation: Option<&Tensor>,
        _p: usize,
    ) -> Result<Tensor> {
        let d = self.cfg.head_dim();
        let kt = tape.swap_last2(k)?;
        let logits = tape.matmul(q, &kt)?; // [P,heads,N,N]
        let mut scaled = tape.mul_scalar(&logits, 1.0 / (d as f64).sqrt());
        if let Some(m) = modulation {
            scaled = tape.mul(&scaled, m)?;
        }
        let bias = self.bias.forward(tape, store)?; // [heads,N,N]
        let biased = tape.add(&scaled, &bias)?;
        let attn = tape.softmax(&biased, 3)?;
        tape.matmul(&attn, v) // [P,heads,N,d]
    }

    /// Head merge, output projection, and back to `[C,H,W]`.
    fn finish(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        out: &Tensor,
        c: usize,
        h: usize,
        w: usize,
    ) -> Result<Tensor> {
        let cfg = &self.cfg;
        let win = cfg.window_side;
        let p = (h / win) * (w / win);
        let n = cfg.tokens();
        let merged = tape.gather(
            out,
            maps::merge_heads(p, n, c, cfg.heads),
            vec![p, n, c],
        )?;
        let projected = self.project(tape, store, &merged, self.wo, self.bo)?;
        tape.gather(&projected, maps::untokens(c, h, w, win), vec![c, h, w])
    }
}

fn dims3(x: &Tensor) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("expected [C,H,W], got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

/// `[B,C,w,w] -> [B*N, C]` token layout for projections of sampled features.
fn sampled_to_tokens(
    tape: &mut Tape,
    sampled: &Tensor,
    b: usize,
    c: usize,
    win: usize,
) -> Result<Tensor> {
    let n = win * win;
    // per sample: [C,w,w] -> [N,C]
    let key_map = maps::tokens(c, win, win, win); // single-window token map
    let mut map = Vec::with_capacity(b * n * c);
    for bi in 0..b {
        let base = bi * c * n;
        map.extend(key_map.iter().map(|&i| base + i));
    }
    tape.gather(sampled, Arc::new(map), vec![b * n, c])
}
