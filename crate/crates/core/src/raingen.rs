//! Procedural generator of paired (clean, degraded) rain scenes.
//!
//! A scene composes as `R = (1 - M_r) * (B + S) + eta * D`: clean background
//! `B`, additive streak map `S`, binary raindrop mask `M_r`, raindrop layer
//! `D`, and atmospheric coefficient `eta`. The identity holds exactly on the
//! generated tensors; clamping to `[0,1]` happens only when images are
//! exported.
//!
//! The whole pipeline is a pure function of `(GenConfig, sample index)`:
//! every sample derives its own rng stream, so datasets are reproducible and
//! order-independent.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for_sample, uniform, uniform_usize, SeedRng};
use crate::tensor::Tensor;

/// Which degradations a dataset carries: streaks, drops, or both.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RainMode {
    Rs,
    Rd,
    Rds,
}

impl RainMode {
    pub fn dir_name(&self) -> &'static str {
        match self {
            RainMode::Rs => "rs",
            RainMode::Rd => "rd",
            RainMode::Rds => "rds",
        }
    }
}

impl std::str::FromStr for RainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<RainMode> {
        match s.to_ascii_lowercase().as_str() {
            "rs" => Ok(RainMode::Rs),
            "rd" => Ok(RainMode::Rd),
            "rds" => Ok(RainMode::Rds),
            other => Err(Error::config(format!("unknown rain mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub mode: RainMode,
    pub width: usize,
    pub height: usize,
    pub seed: u64,

    pub background_shapes: [usize; 2],
    pub background_noise_amp: f64,

    pub streak_count: [usize; 2],
    /// Base fall direction in degrees from vertical; shared per scene.
    pub streak_angle_deg: [f64; 2],
    /// Per-streak deviation from the shared direction, degrees.
    pub streak_jitter_deg: f64,
    pub streak_length: [f64; 2],
    pub streak_intensity: [f64; 2],
    /// Radius of the box blur applied along the fall direction, pixels.
    pub streak_blur: usize,

    pub drop_count: [usize; 2],
    pub drop_radius: [f64; 2],
    /// Axis stretch range turning discs into ellipses; [1,1] keeps circles.
    pub drop_ellipticity: [f64; 2],
    pub drop_blur_radius: usize,

    pub eta: [f64; 2],
}

impl Default for GenConfig {
    fn default() -> GenConfig {
        GenConfig {
            mode: RainMode::Rds,
            width: 96,
            height: 96,
            seed: 0,
            background_shapes: [3, 8],
            background_noise_amp: 0.03,
            streak_count: [15, 35],
            streak_angle_deg: [-25.0, 25.0],
            streak_jitter_deg: 8.0,
            streak_length: [8.0, 28.0],
            streak_intensity: [0.2, 0.7],
            streak_blur: 1,
            drop_count: [3, 8],
            drop_radius: [3.0, 9.0],
            drop_ellipticity: [0.8, 1.25],
            drop_blur_radius: 3,
            eta: [0.75, 0.95],
        }
    }
}

impl GenConfig {
    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("image size must be positive"));
        }
        for (name, r) in [
            ("streak_count", &self.streak_count.map(|v| v as f64)),
            ("drop_count", &self.drop_count.map(|v| v as f64)),
        ] {
            if r[0] > r[1] {
                return Err(Error::config(format!("{name} range is empty")));
            }
        }
        for (name, r) in [
            ("streak_length", &self.streak_length),
            ("streak_intensity", &self.streak_intensity),
            ("drop_radius", &self.drop_radius),
            ("eta", &self.eta),
        ] {
            if r[0] > r[1] {
                return Err(Error::config(format!("{name} range is empty")));
            }
        }
        Ok(())
    }
}

/// All parts of one generated scene, pre-clamp.
#[derive(Clone, Debug)]
pub struct RainScene {
    pub background: Tensor,
    pub streaks: Tensor,
    pub drop_mask: Tensor,
    pub drop_layer: Tensor,
    pub eta: f64,
    pub degraded: Tensor,
}

/// Smooth color gradient plus a few random shapes plus low-amplitude value
/// noise, all in `[0,1]`.
pub fn gen_background(cfg: &GenConfig, rng: &mut SeedRng) -> Result<Tensor> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let hw = h * w;
    let mut img = vec![0.0; 3 * hw];

    // gradient between two random colors along a random direction
    let theta = uniform(rng, 0.0, std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let c0: Vec<f64> = (0..3).map(|_| uniform(rng, 0.1, 0.9)).collect();
    let c1: Vec<f64> = (0..3).map(|_| uniform(rng, 0.1, 0.9)).collect();
    let mut pmin = f64::INFINITY;
    let mut pmax = f64::NEG_INFINITY;
    for y in 0..h {
        for x in 0..w {
            let p = dx * x as f64 + dy * y as f64;
            pmin = pmin.min(p);
            pmax = pmax.max(p);
        }
    }
    let span = (pmax - pmin).max(1e-9);
    for y in 0..h {
        for x in 0..w {
            let t = (dx * x as f64 + dy * y as f64 - pmin) / span;
            for c in 0..3 {
                img[c * hw + y * w + x] = c0[c] + t * (c1[c] - c0[c]);
            }
        }
    }

    // random rectangles and discs
    let nshapes = uniform_usize(rng, cfg.background_shapes[0], cfg.background_shapes[1]);
    for _ in 0..nshapes {
        let color: Vec<f64> = (0..3).map(|_| uniform(rng, 0.05, 0.95)).collect();
        let cx = uniform(rng, 0.0, w as f64);
        let cy = uniform(rng, 0.0, h as f64);
        let rx = uniform(rng, 0.05, 0.25) * w as f64;
        let ry = uniform(rng, 0.05, 0.25) * h as f64;
        let is_disc = rng.random::<f64>() < 0.5;
        let x_lo = ((cx - rx).floor().max(0.0)) as usize;
        let x_hi = ((cx + rx).ceil().min(w as f64)) as usize;
        let y_lo = ((cy - ry).floor().max(0.0)) as usize;
        let y_hi = ((cy + ry).ceil().min(h as f64)) as usize;
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let inside = if is_disc {
                    let nx = (x as f64 - cx) / rx;
                    let ny = (y as f64 - cy) / ry;
                    nx * nx + ny * ny <= 1.0
                } else {
                    true
                };
                if inside {
                    for c in 0..3 {
                        img[c * hw + y * w + x] = color[c];
                    }
                }
            }
        }
    }

    // lattice value noise, bilinearly interpolated
    if cfg.background_noise_amp > 0.0 {
        let amp = cfg.background_noise_amp.min(0.05);
        let cell = 8usize;
        let gw = w / cell + 2;
        let gh = h / cell + 2;
        let lattice: Vec<f64> = (0..gw * gh).map(|_| uniform(rng, -1.0, 1.0)).collect();
        for y in 0..h {
            for x in 0..w {
                let fx = x as f64 / cell as f64;
                let fy = y as f64 / cell as f64;
                let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
                let (tx, ty) = (fx - ix as f64, fy - iy as f64);
                let v00 = lattice[iy * gw + ix];
                let v01 = lattice[iy * gw + ix + 1];
                let v10 = lattice[(iy + 1) * gw + ix];
                let v11 = lattice[(iy + 1) * gw + ix + 1];
                let v = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01)
                    + ty * ((1.0 - tx) * v10 + tx * v11);
                for c in 0..3 {
                    img[c * hw + y * w + x] += amp * v;
                }
            }
        }
    }

    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(vec![3, h, w], img)
}

/// Additive streak map: anti-aliased line segments sharing a fall direction
/// (plus per-streak jitter), box-blurred along that direction. Non-negative.
pub fn gen_streaks(cfg: &GenConfig, rng: &mut SeedRng) -> Result<Tensor> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let hw = h * w;
    let mut map = vec![0.0; hw];

    let n = uniform_usize(rng, cfg.streak_count[0], cfg.streak_count[1]);
    let base_angle = uniform(rng, cfg.streak_angle_deg[0], cfg.streak_angle_deg[1]);
    for _ in 0..n {
        let jitter = uniform(rng, -cfg.streak_jitter_deg, cfg.streak_jitter_deg);
        let angle = (base_angle + jitter).to_radians();
        // angle measured from vertical, y growing downward
        let (dx, dy) = (angle.sin(), angle.cos());
        let len = uniform(rng, cfg.streak_length[0], cfg.streak_length[1]);
        let intensity = uniform(rng, cfg.streak_intensity[0], cfg.streak_intensity[1]);
        let x0 = uniform(rng, 0.0, w as f64);
        let y0 = uniform(rng, 0.0, h as f64);
        // splat along the segment at quarter-pixel steps
        let step = 0.25;
        let steps = (len / step).ceil() as usize;
        let per_step = intensity * step;
        for s in 0..steps {
            let px = x0 + dx * step * s as f64;
            let py = y0 + dy * step * s as f64;
            splat_bilinear(&mut map, w, h, px, py, per_step);
        }
    }

    if cfg.streak_blur > 0 && n > 0 {
        let angle = base_angle.to_radians();
        map = directional_box_blur(&map, w, h, angle.sin(), angle.cos(), cfg.streak_blur);
    }

    // same streak brightness on each color channel
    let mut rgb = vec![0.0; 3 * hw];
    for c in 0..3 {
        rgb[c * hw..(c + 1) * hw].copy_from_slice(&map);
    }
    Tensor::new(vec![3, h, w], rgb)
}

fn splat_bilinear(map: &mut [f64], w: usize, h: usize, px: f64, py: f64, v: f64) {
    if px < -1.0 || py < -1.0 || px > w as f64 || py > h as f64 {
        return;
    }
    let x0 = px.floor();
    let y0 = py.floor();
    let tx = px - x0;
    let ty = py - y0;
    for (iy, wy) in [(y0 as isize, 1.0 - ty), (y0 as isize + 1, ty)] {
        for (ix, wx) in [(x0 as isize, 1.0 - tx), (x0 as isize + 1, tx)] {
            if ix >= 0 && (ix as usize) < w && iy >= 0 && (iy as usize) < h {
                map[iy as usize * w + ix as usize] += v * wy * wx;
            }
        }
    }
}

fn directional_box_blur(map: &[f64], w: usize, h: usize, dx: f64, dy: f64, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; map.len()];
    let taps = 2 * r + 1;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for i in 0..taps {
                let off = i as f64 - r as f64;
                let sx = x as f64 + dx * off;
                let sy = y as f64 + dy * off;
                acc += read_bilinear(map, w, h, sx, sy);
            }
            out[y * w + x] = acc / taps as f64;
        }
    }
    out
}

fn read_bilinear(map: &[f64], w: usize, h: usize, px: f64, py: f64) -> f64 {
    if px < -1.0 || py < -1.0 || px > w as f64 || py > h as f64 {
        return 0.0;
    }
    let x0 = px.floor();
    let y0 = py.floor();
    let tx = px - x0;
    let ty = py - y0;
    let mut acc = 0.0;
    for (iy, wy) in [(y0 as isize, 1.0 - ty), (y0 as isize + 1, ty)] {
        for (ix, wx) in [(x0 as isize, 1.0 - tx), (x0 as isize + 1, tx)] {
            if ix >= 0 && (ix as usize) < w && iy >= 0 && (iy as usize) < h {
                acc += map[iy as usize * w + ix as usize] * wy * wx;
            }
        }
    }
    acc
}

fn box_blur_rgb(img: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    if r == 0 {
        return img.to_vec();
    }
    let hw = h * w;
    let mut out = vec![0.0; img.len()];
    let mut tmp = vec![0.0; hw];
    for c in 0..3 {
        let chan = &img[c * hw..(c + 1) * hw];
        // horizontal
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(r);
                let hi = (x + r).min(w - 1);
                let mut acc = 0.0;
                for xx in lo..=hi {
                    acc += chan[y * w + xx];
                }
                tmp[y * w + x] = acc / (hi - lo + 1) as f64;
            }
        }
        // vertical
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            for x in 0..w {
                let mut acc = 0.0;
                for yy in lo..=hi {
                    acc += tmp[yy * w + x];
                }
                out[c * hw + y * w + x] = acc / (hi - lo + 1) as f64;
            }
        }
    }
    out
}

/// Raindrop mask and appearance layer. Drops are stamped ellipses; the layer
/// is a blurred, brightness-lifted copy of the background inside the mask and
/// exactly zero outside it.
pub fn gen_drops(cfg: &GenConfig, background: &Tensor, rng: &mut SeedRng) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let hw = h * w;
    let mut mask = vec![0.0; hw];

    let n = uniform_usize(rng, cfg.drop_count[0], cfg.drop_count[1]);
    for _ in 0..n {
        let radius = uniform(rng, cfg.drop_radius[0], cfg.drop_radius[1]);
        let rx = radius * uniform(rng, cfg.drop_ellipticity[0], cfg.drop_ellipticity[1]);
        let ry = radius * uniform(rng, cfg.drop_ellipticity[0], cfg.drop_ellipticity[1]);
        let cx = uniform(rng, 0.0, w as f64);
        let cy = uniform(rng, 0.0, h as f64);
        let x_lo = ((cx - rx).floor().max(0.0)) as usize;
        let x_hi = ((cx + rx).ceil().min(w as f64)) as usize;
        let y_lo = ((cy - ry).floor().max(0.0)) as usize;
        let y_hi = ((cy + ry).ceil().min(h as f64)) as usize;
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let nx = (x as f64 - cx) / rx;
                let ny = (y as f64 - cy) / ry;
                if nx * nx + ny * ny <= 1.0 {
                    mask[y * w + x] = 1.0;
                }
            }
        }
    }

    let mut layer = vec![0.0; 3 * hw];
    if n > 0 {
        let blurred = box_blur_rgb(background.data(), w, h, cfg.drop_blur_radius);
        for c in 0..3 {
            for i in 0..hw {
                if mask[i] == 1.0 {
                    // crude refraction stand-in: blur plus a brightness lift
                    layer[c * hw + i] = (blurred[c * hw + i] * 1.15 + 0.08).min(1.0);
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![1, h, w], mask)?,
        Tensor::new(vec![3, h, w], layer)?,
    ))
}

/// Exact compositing: `R = (1 - M_r) * (B + S) + eta * D`, no clamping.
pub fn compose(
    background: &Tensor,
    streaks: &Tensor,
    drop_mask: &Tensor,
    drop_layer: &Tensor,
    eta: f64,
) -> Result<Tensor> {
    let shape = background.shape();
    if streaks.shape() != shape || drop_layer.shape() != shape {
        return Err(Error::shape("compose: RGB part shapes differ"));
    }
    if drop_mask.shape().len() != 3
        || drop_mask.shape()[0] != 1
        || drop_mask.shape()[1..] != shape[1..]
    {
        return Err(Error::shape("compose: mask must be [1,H,W] matching the scene"));
    }
    let hw = shape[1] * shape[2];
    let (b, s, m, d) = (
        background.data(),
        streaks.data(),
        drop_mask.data(),
        drop_layer.data(),
    );
    let mut r = vec![0.0; 3 * hw];
    for c in 0..3 {
        for i in 0..hw {
            r[c * hw + i] = (1.0 - m[i]) * (b[c * hw + i] + s[c * hw + i]) + eta * d[c * hw + i];
        }
    }
    Tensor::new(shape.to_vec(), r)
}

/// Generates the `index`-th scene of a dataset run.
pub fn generate_scene(cfg: &GenConfig, index: u64) -> Result<RainScene> {
    cfg.validate()?;
    let mut rng = rng_for_sample(cfg.seed, index);
    let background = gen_background(cfg, &mut rng)?;
    let streaks = match cfg.mode {
        RainMode::Rd => Tensor::zeros(vec![3, cfg.height, cfg.width]),
        _ => gen_streaks(cfg, &mut rng)?,
    };
    let (drop_mask, drop_layer) = match cfg.mode {
        RainMode::Rs => (
            Tensor::zeros(vec![1, cfg.height, cfg.width]),
            Tensor::zeros(vec![3, cfg.height, cfg.width]),
        ),
        _ => gen_drops(cfg, &background, &mut rng)?,
    };
    let eta = uniform(&mut rng, cfg.eta[0], cfg.eta[1]);
    let degraded = compose(&background, &streaks, &drop_mask, &drop_layer, eta)?;
    Ok(RainScene {
        background,
        streaks,
        drop_mask,
        drop_layer,
        eta,
        degraded,
    })
}

/// Export clamp: training keeps pre-clamp values, files get `[0,1]`.
pub fn clamp01(t: &Tensor) -> Tensor {
    Tensor::from_fn(t.shape().to_vec(), |i| t.data()[i].clamp(0.0, 1.0))
}
