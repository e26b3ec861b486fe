//! Evaluation metrics on the luminance channel: PSNR and SSIM.
//!
//! Full-range BT.601 luma; SSIM uses the canonical 11x11 Gaussian window
//! (std 1.5) with K1 = 0.01, K2 = 0.03 at dynamic range 1, averaged over the
//! valid (unpadded) region.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const PSNR_CAP_DB: f64 = 100.0;

/// Per-image scores plus the aggregate means reported by evaluation runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_baseline_psnr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
    /// PSNR of the degraded input against the clean target.
    pub baseline_psnr_db: f64,
}

impl MetricReport {
    pub fn from_images(per_image: Vec<ImageMetrics>) -> MetricReport {
        let n = per_image.len().max(1) as f64;
        let mean_psnr_db = per_image.iter().map(|m| m.psnr_db).sum::<f64>() / n;
        let mean_ssim = per_image.iter().map(|m| m.ssim).sum::<f64>() / n;
        let mean_baseline_psnr_db =
            per_image.iter().map(|m| m.baseline_psnr_db).sum::<f64>() / n;
        MetricReport {
            per_image,
            mean_psnr_db,
            mean_ssim,
            mean_baseline_psnr_db,
        }
    }
}

/// Full-range BT.601 luma: `Y = 0.299 R + 0.587 G + 0.114 B`.
pub fn rgb_to_y(img: &Tensor) -> Result<Tensor> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape(format!("rgb_to_y expects [3,H,W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let hw = h * w;
    let d = img.data();
    let mut y = vec![0.0; hw];
    for i in 0..hw {
        y[i] = 0.299 * d[i] + 0.587 * d[hw + i] + 0.114 * d[2 * hw + i];
    }
    Tensor::new(vec![1, h, w], y)
}

/// Peak signal-to-noise ratio in decibels, capped at 100 dB.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "psnr shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut mse = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        mse += d * d;
    }
    mse /= a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid-region separable Gaussian filter.
fn gauss_filter_valid(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let k = gaussian_kernel();
    let r = SSIM_WINDOW - 1;
    let (oh, ow) = (h - r, w - r);
    // horizontal pass
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * img[y * w + x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity of two single-channel images in `[0,1]`.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape(format!("ssim shapes differ: {sa:?} vs {sb:?}")));
    }
    let (h, w) = match sa.len() {
        3 if sa[0] == 1 => (sa[1], sa[2]),
        2 => (sa[0], sa[1]),
        _ => return Err(Error::shape(format!("ssim expects [1,H,W] or [H,W], got {sa:?}"))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let x = a.data();
    let y = b.data();
    let n = h * w;
    let xx: Vec<f64> = (0..n).map(|i| x[i] * x[i]).collect();
    let yy: Vec<f64> = (0..n).map(|i| y[i] * y[i]).collect();
    let xy: Vec<f64> = (0..n).map(|i| x[i] * y[i]).collect();

    let (mu_x, oh, ow) = gauss_filter_valid(x, h, w);
    let (mu_y, _, _) = gauss_filter_valid(y, h, w);
    let (m_xx, _, _) = gauss_filter_valid(&xx, h, w);
    let (m_yy, _, _) = gauss_filter_valid(&yy, h, w);
    let (m_xy, _, _) = gauss_filter_valid(&xy, h, w);

    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut acc = 0.0;
    for i in 0..oh * ow {
        let var_x = m_xx[i] - mu_x[i] * mu_x[i];
        let var_y = m_yy[i] - mu_y[i] * mu_y[i];
        let cov = m_xy[i] - mu_x[i] * mu_y[i];
        let num = (2.0 * mu_x[i] * mu_y[i] + c1) * (2.0 * cov + c2);
        let den = (mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + c1) * (var_x + var_y + c2);
        acc += num / den;
    }
    Ok(acc / (oh * ow) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from_seed, uniform};

    #[test]
    fn luma_coefficients() {
        let white = Tensor::full(vec![3, 1, 1], 1.0);
        assert!((rgb_to_y(&white).unwrap().data()[0] - 1.0).abs() < 1e-15);

        let black = Tensor::zeros(vec![3, 1, 1]);
        assert_eq!(rgb_to_y(&black).unwrap().data()[0], 0.0);

        let red = Tensor::new(vec![3, 1, 1], vec![1.0, 0.0, 0.0]).unwrap();
        assert!((rgb_to_y(&red).unwrap().data()[0] - 0.299).abs() < 1e-15);
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::full(vec![1, 4, 4], 0.3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);

        let b = Tensor::full(vec![1, 4, 4], 1.3);
        assert!((psnr(&a, &b, 1.0).unwrap() - 0.0).abs() < 1e-12);

        let c = Tensor::full(vec![1, 4, 4], 0.4);
        assert!((psnr(&a, &c, 1.0).unwrap() - 20.0).abs() < 1e-10);

        let d = Tensor::zeros(vec![1, 2, 2]);
        assert!(psnr(&a, &d, 1.0).is_err());
    }

    #[test]
    fn psnr_monotone_in_noise() {
        let mut rng = rng_from_seed(2);
        let a = Tensor::from_fn(vec![1, 8, 8], |_| uniform(&mut rng, 0.0, 1.0));
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let mut rng2 = rng_from_seed(3);
            let b = Tensor::from_fn(vec![1, 8, 8], |i| {
                a.data()[i] + amp * uniform(&mut rng2, -1.0, 1.0)
            });
            let p = psnr(&a, &b, 1.0).unwrap();
            assert!(p < last, "psnr must fall as noise grows");
            last = p;
        }
    }

    #[test]
    fn ssim_self_is_one() {
        let mut rng = rng_from_seed(4);
        let a = Tensor::from_fn(vec![1, 16, 16], |_| uniform(&mut rng, 0.0, 1.0));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_symmetry_and_near_identity() {
        let mut rng = rng_from_seed(6);
        let a = Tensor::from_fn(vec![1, 16, 16], |_| uniform(&mut rng, 0.0, 1.0));
        let mut rng2 = rng_from_seed(7);
        let b = Tensor::from_fn(vec![1, 16, 16], |i| {
            a.data()[i] + 1e-4 * uniform(&mut rng2, -1.0, 1.0)
        });
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab > 0.999, "tiny noise keeps ssim near 1, got {ab}");
    }

    #[test]
    fn ssim_constant_images() {
        // mu_x = 0, mu_y = 1, zero variances: value reduces to C1/(1+C1)
        let a = Tensor::zeros(vec![1, 12, 12]);
        let b = Tensor::full(vec![1, 12, 12], 1.0);
        let got = ssim(&a, &b).unwrap();
        let c1 = SSIM_K1 * SSIM_K1;
        let expected = c1 / (1.0 + c1);
        assert!((got - expected).abs() < 1e-12, "got {got}, want {expected}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::zeros(vec![1, 8, 8]);
        assert!(matches!(ssim(&a, &a), Err(Error::Shape(_))));
    }
}
