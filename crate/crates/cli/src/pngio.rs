//! 8-bit RGB PNG import/export for `[3,H,W]` tensors in `[0,1]`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use image::{Rgb, RgbImage};
use ssattn_core::tensor::Tensor;

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[3,H,W]` (or `[1,H,W]`, replicated to gray) tensor as PNG.
pub fn save_png(path: &Path, t: &Tensor) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || (s[0] != 3 && s[0] != 1) {
        bail!("save_png expects [3,H,W] or [1,H,W], got {s:?}");
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let hw = h * w;
    let d = t.data();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let px = if c == 3 {
                [quantize(d[i]), quantize(d[hw + i]), quantize(d[2 * hw + i])]
            } else {
                let g = quantize(d[i]);
                [g, g, g]
            };
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Reads a PNG into a `[3,H,W]` tensor in `[0,1]`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * hw + i] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact_on_quantized_values() {
        let t = Tensor::from_fn(vec![3, 5, 7], |i| (i % 256) as f64 / 255.0);
        let path = std::env::temp_dir().join(format!("ssattn-pngio-{}.png", std::process::id()));
        save_png(&path, &t).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        std::fs::remove_file(&path).ok();
    }
}
