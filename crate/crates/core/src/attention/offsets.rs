//! Learned sampling offsets for sparse sampling attention.
//!
//! A small head (3x3 conv, activation, per-window average pool, linear)
//! reads the constraint-gated feature map and emits one affine transform
//! per (window, head, in-window position): a two-component scale and a
//! two-component pixel bias. At construction the linear head is zeroed with
//! its bias set to (scale 1, bias 0), so sampling starts as the identity and
//! only departs from it as the uncertainty branch learns.

use crate::error::{Error, Result};
use crate::maps;
use crate::params::{init_conv, ParamId, ParamStore};
use crate::rng::SeedRng;
use crate::tensor::{Tape, Tensor};

/// Per-window affine sampling transform, batched over windows:
/// `scale` and `bias` are `[P, heads, w, w, 2]`, last axis (x, y).
pub struct SamplingField {
    pub scale: Tensor,
    pub bias: Tensor,
    pub windows: usize,
    pub heads: usize,
    pub window_side: usize,
}

impl SamplingField {
    /// Absolute pixel sampling positions (pre-normalization), laid out like
    /// the field tensors. Used by visualization and traces.
    pub fn pixel_coords(&self, grid_w: usize) -> Vec<f64> {
        let (p, heads, win) = (self.windows, self.heads, self.window_side);
        let scale = self.scale.data();
        let bias = self.bias.data();
        let mut out = vec![0.0; p * heads * win * win * 2];
        for pi in 0..p {
            let (py, px) = (pi / grid_w, pi % grid_w);
            for h in 0..heads {
                for r in 0..win {
                    for q in 0..win {
                        let i = ((((pi * heads) + h) * win + r) * win + q) * 2;
                        let ax = (px * win + q) as f64;
                        let ay = (py * win + r) as f64;
                        out[i] = ax * scale[i] + bias[i];
                        out[i + 1] = ay * scale[i + 1] + bias[i + 1];
                    }
                }
            }
        }
        out
    }
}

/// The offset estimator; constraint gating happens here.
pub struct OffsetHead {
    conv_w: ParamId,
    conv_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    channels: usize,
    heads: usize,
    window_side: usize,
}

impl OffsetHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        heads: usize,
        window_side: usize,
        rng: &mut SeedRng,
    ) -> OffsetHead {
        let feat = heads * window_side * window_side * 4;
        let conv_w = store.register(
            format!("{prefix}.offset_conv_w"),
            init_conv(vec![channels, channels, 3, 3], rng),
        );
        let conv_b = store.register(format!("{prefix}.offset_conv_b"), Tensor::zeros(vec![channels]));
        // zero weights + (1,1,0,0) bias per cell: identity sampling at init
        let head_w = store.register(
            format!("{prefix}.offset_head_w"),
            Tensor::zeros(vec![channels, feat]),
        );
        let head_b = store.register(
            format!("{prefix}.offset_head_b"),
            Tensor::from_fn(vec![feat], |i| if i % 4 < 2 { 1.0 } else { 0.0 }),
        );
        OffsetHead {
            conv_w,
            conv_b,
            head_w,
            head_b,
            channels,
            heads,
            window_side,
        }
    }

    /// Estimates the sampling field from the feature map, elementwise-gated
    /// by `constraint` when given (the uncertainty-driven path).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Tensor,
        constraint: Option<&Tensor>,
    ) -> Result<SamplingField> {
        let shape = x.shape();
        if shape.len() != 3 || shape[0] != self.channels {
            return Err(Error::shape(format!(
                "offset head expects [{},H,W], got {shape:?}",
                self.channels
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let win = self.window_side;
        if h % win != 0 || w % win != 0 {
            return Err(Error::shape(format!(
                "offset head: {h}x{w} not divisible by window {win}"
            )));
        }
        let p = (h / win) * (w / win);

        let gated = match constraint {
            Some(cm) => {
                if cm.shape().len() != 3 || cm.shape()[1..] != shape[1..] {
                    return Err(Error::shape(format!(
                        "constraint shape {:?} incompatible with feature {shape:?}",
                        cm.shape()
                    )));
                }
                tape.mul(x, cm)?
            }
            None => x.clone(),
        };

        let cw = store.watch(tape, self.conv_w);
        let cb = store.watch(tape, self.conv_b);
        let conv = tape.conv2d(&gated, &cw, &cb)?;
        let act = tape.gelu(&conv);

        let windows = tape.gather(&act, maps::partition(c, h, w, win), vec![p, c, win, win])?;
        let pooled = tape.global_avgpool(&windows)?; // [P,C,1,1]
        let desc = tape.reshape(&pooled, vec![p, c])?;

        let hw = store.watch(tape, self.head_w);
        let hb = store.watch(tape, self.head_b);
        let feat = tape.matmul(&desc, &hw)?;
        let feat = tape.add(&feat, &hb)?; // [P, heads*w*w*4]

        let cells = vec![p, self.heads, win, win, 2];
        let scale = tape.gather(
            &feat,
            maps::field_component(p, self.heads, win, 0),
            cells.clone(),
        )?;
        let bias = tape.gather(&feat, maps::field_component(p, self.heads, win, 2), cells)?;
        Ok(SamplingField {
            scale,
            bias,
            windows: p,
            heads: self.heads,
            window_side: win,
        })
    }
}

/// Absolute pixel-center coordinates of every window position, `[P,1,w,w,2]`.
pub fn base_coords(p: usize, grid_w: usize, win: usize) -> Tensor {
    Tensor::from_fn(vec![p, 1, win, win, 2], |i| {
        let pair = i / 2;
        let q = pair % win;
        let r = (pair / win) % win;
        let pi = pair / (win * win);
        let (py, px) = (pi / grid_w, pi % grid_w);
        if i % 2 == 0 {
            (px * win + q) as f64
        } else {
            (py * win + r) as f64
        }
    })
}

/// Applies the affine transform to each position's own absolute coordinate
/// and maps the result to the normalized [-1, 1] span of the full feature
/// map. Out-of-range results are left to the sampler's border clamp.
pub fn transform_coords(
    tape: &mut Tape,
    field: &SamplingField,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let win = field.window_side;
    if h % win != 0 || w % win != 0 {
        return Err(Error::shape(format!(
            "transform_coords: {h}x{w} not divisible by window {win}"
        )));
    }
    let grid_w = w / win;
    let base = base_coords(field.windows, grid_w, win);
    let scaled = tape.mul(&base, &field.scale)?;
    let px = tape.add(&scaled, &field.bias)?;
    // normalized = px * 2/(n-1) - 1, per component
    let denom_x = (w.max(2) - 1) as f64;
    let denom_y = (h.max(2) - 1) as f64;
    let factors = Tensor::new(vec![2], vec![2.0 / denom_x, 2.0 / denom_y])?;
    let stretched = tape.mul(&px, &factors)?;
    Ok(tape.add_scalar(&stretched, -1.0))
}
