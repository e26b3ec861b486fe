//! Training objective: negated-PSNR data term, edge-consistency term, and
//! per-stage Laplace uncertainty supervision.

use crate::error::{Error, Result};
use crate::maps;
use crate::tensor::{Tape, Tensor};
use crate::uncertainty::udl_loss;

use super::ForwardOutput;

/// Loss of `-PSNR` form: `10 * log10(MSE + 1e-12)` with peak 1, so perfect
/// prediction bottoms out at -120 dB.
pub fn psnr_loss(tape: &mut Tape, pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "psnr_loss shapes differ: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let diff = tape.sub(pred, gt)?;
    let sq = tape.mul(&diff, &diff)?;
    let mse = tape.mean_all(&sq)?;
    let mse_floored = tape.add_scalar(&mse, 1e-12);
    let log = tape.ln(&mse_floored)?;
    Ok(tape.mul_scalar(&log, 10.0 / std::f64::consts::LN_10))
}

/// Mean absolute difference of horizontal plus vertical forward-difference
/// gradients; shift-invariant structure term standing in for a perceptual
/// loss.
pub fn edge_loss(tape: &mut Tape, pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "edge_loss shapes differ: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let s = pred.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("edge_loss expects [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);

    let grad_term = |tape: &mut Tape, a: &Tensor, b: &Tensor, horiz: bool| -> Result<Tensor> {
        let (oh, ow, oy, ox) = if horiz { (h, w - 1, 0, 1) } else { (h - 1, w, 1, 0) };
        let hi_map = maps::crop(c, h, w, oh, ow, oy, ox);
        let lo_map = maps::crop(c, h, w, oh, ow, 0, 0);
        let shape = vec![c, oh, ow];
        let a_hi = tape.gather(a, hi_map.clone(), shape.clone())?;
        let a_lo = tape.gather(a, lo_map.clone(), shape.clone())?;
        let b_hi = tape.gather(b, hi_map, shape.clone())?;
        let b_lo = tape.gather(b, lo_map, shape)?;
        let da = tape.sub(&a_hi, &a_lo)?;
        let db = tape.sub(&b_hi, &b_lo)?;
        let d = tape.sub(&da, &db)?;
        let ad = tape.abs(&d);
        tape.mean_all(&ad)
    };
    let hx = grad_term(tape, pred, gt, true)?;
    let vy = grad_term(tape, pred, gt, false)?;
    tape.add(&hx, &vy)
}

/// Block-mean downsampling by an integer factor (area average).
pub fn downsample_area(t: &Tensor, factor: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("downsample_area expects [C,H,W], got {s:?}")));
    }
    if factor == 1 {
        return Tensor::new(s.to_vec(), t.data().to_vec());
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!(
            "downsample_area: {h}x{w} not divisible by {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let data = t.data();
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += data[ch * h * w + (y * factor + dy) * w + x * factor + dx];
                    }
                }
                out[(ch * oh + y) * ow + x] = acc * inv;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Scalar loss tensor plus the logged component values.
pub struct LossTerms {
    pub total: Tensor,
    pub psnr_term: f64,
    pub edge_term: f64,
    pub udl_term: f64,
}

/// `l1 * psnr + l2 * edge + l3 * sum_stages udl`, with the ground truth
/// area-averaged to each stage scale.
pub fn total_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    gt_padded: &Tensor,
    lambda_psnr: f64,
    lambda_edge: f64,
    lambda_udl: f64,
) -> Result<LossTerms> {
    let final_padded = &out
        .stages
        .last()
        .ok_or_else(|| Error::shape("forward output has no stages"))?
        .derained;
    if gt_padded.shape() != final_padded.shape() {
        return Err(Error::shape(format!(
            "total_loss: gt {:?} vs padded output {:?}",
            gt_padded.shape(),
            final_padded.shape()
        )));
    }
    let p = psnr_loss(tape, final_padded, gt_padded)?;
    let e = edge_loss(tape, final_padded, gt_padded)?;
    let psnr_term = p.item()?;
    let edge_term = e.item()?;

    let pw = tape.mul_scalar(&p, lambda_psnr);
    let ew = tape.mul_scalar(&e, lambda_edge);
    let mut total = tape.add(&pw, &ew)?;

    let (hp, _) = (gt_padded.shape()[1], gt_padded.shape()[2]);
    let mut udl_term = 0.0;
    for stage in &out.stages {
        let sh = stage.derained.shape()[1];
        let factor = hp / sh;
        let gt_s = downsample_area(gt_padded, factor)?;
        let u = udl_loss(tape, &stage.derained, &gt_s, &stage.log_sigma)?;
        udl_term += u.item()?;
        let uw = tape.mul_scalar(&u, lambda_udl);
        total = tape.add(&total, &uw)?;
    }
    Ok(LossTerms {
        total,
        psnr_term,
        edge_term,
        udl_term,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from_seed, uniform};

    #[test]
    fn psnr_loss_examples() {
        let mut tape = Tape::new();
        let a = Tensor::full(vec![3, 4, 4], 0.4);
        // zero mse: floored at -120 dB
        let l = psnr_loss(&mut tape, &a, &a).unwrap();
        assert!((l.item().unwrap() + 120.0).abs() < 1e-9);

        // mse 1 -> 0
        let b = Tensor::full(vec![3, 4, 4], 1.4);
        let l = psnr_loss(&mut tape, &a, &b).unwrap();
        assert!(l.item().unwrap().abs() < 1e-9);

        // mse 0.01 -> -20
        let c = Tensor::full(vec![3, 4, 4], 0.5);
        let l = psnr_loss(&mut tape, &a, &c).unwrap();
        assert!((l.item().unwrap() + 20.0).abs() < 1e-9);
    }

    #[test]
    fn edge_loss_examples() {
        let mut tape = Tape::new();
        let mut rng = rng_from_seed(1);
        let a = Tensor::from_fn(vec![3, 4, 4], |_| uniform(&mut rng, 0.0, 1.0));
        // identical images: zero
        let l = edge_loss(&mut tape, &a, &a).unwrap();
        assert_eq!(l.item().unwrap(), 0.0);

        // constant shift leaves gradients unchanged
        let shifted = Tensor::from_fn(vec![3, 4, 4], |i| a.data()[i] + 0.25);
        let l = edge_loss(&mut tape, &shifted, &a).unwrap();
        assert!(l.item().unwrap().abs() < 1e-15);

        // zero prediction against a vertical step edge: direct differencing
        let step = Tensor::from_fn(vec![3, 4, 4], |i| if i % 4 >= 2 { 1.0 } else { 0.0 });
        let zero = Tensor::zeros(vec![3, 4, 4]);
        let l = edge_loss(&mut tape, &zero, &step).unwrap();
        // horizontal gradient of the step: |0,1,0| per row; mean over 3*4*3
        // entries = 12/36; vertical gradients are all zero
        assert!((l.item().unwrap() - 12.0 / 36.0).abs() < 1e-12);
    }

    #[test]
    fn downsample_area_means_blocks() {
        let t = Tensor::from_fn(vec![1, 4, 4], |i| i as f64);
        let d = downsample_area(&t, 2).unwrap();
        assert_eq!(d.shape(), &[1, 2, 2]);
        assert_eq!(d.data(), &[2.5, 4.5, 10.5, 12.5]);
        let same = downsample_area(&t, 1).unwrap();
        assert_eq!(same.data(), t.data());
    }

    fn fake_forward(pred: Tensor, log_sigma: Tensor) -> crate::model::ForwardOutput {
        let final_out = Tensor::new(pred.shape().to_vec(), pred.data().to_vec()).unwrap();
        crate::model::ForwardOutput {
            final_out,
            stages: vec![crate::model::StageOutput {
                derained: pred,
                log_sigma,
            }],
            padded: (4, 4),
        }
    }

    #[test]
    fn total_loss_weight_zeroing() {
        let mut rng = rng_from_seed(3);
        let gt = Tensor::from_fn(vec![3, 4, 4], |_| uniform(&mut rng, 0.0, 1.0));
        let pred = Tensor::from_fn(vec![3, 4, 4], |i| gt.data()[i] + 0.1);
        let ls = Tensor::full(vec![1, 4, 4], 0.2);

        // lambda2 = lambda3 = 0 reduces to the psnr term alone
        let mut tape = Tape::new();
        let out = fake_forward(pred.clone(), ls.clone());
        let terms = total_loss(&mut tape, &out, &gt, 1.0, 0.0, 0.0).unwrap();
        let p = psnr_loss(&mut tape, &pred, &gt).unwrap();
        assert!((terms.total.item().unwrap() - p.item().unwrap()).abs() < 1e-15);

        // perfect prediction with sigma = 1: -120 * lambda1 exactly
        let mut tape = Tape::new();
        let out = fake_forward(
            Tensor::new(gt.shape().to_vec(), gt.data().to_vec()).unwrap(),
            Tensor::zeros(vec![1, 4, 4]),
        );
        let terms = total_loss(&mut tape, &out, &gt, 1.0, 0.2, 1.0).unwrap();
        assert!((terms.total.item().unwrap() + 120.0).abs() < 1e-9);
    }

    #[test]
    fn total_loss_matches_hand_summed_components() {
        let mut rng = rng_from_seed(5);
        let gt = Tensor::from_fn(vec![3, 4, 4], |_| uniform(&mut rng, 0.0, 1.0));
        let pred = Tensor::from_fn(vec![3, 4, 4], |_| uniform(&mut rng, 0.0, 1.0));
        let ls = Tensor::from_fn(vec![1, 4, 4], |_| uniform(&mut rng, -0.3, 0.3));
        let (l1, l2, l3) = (1.0, 0.2, 1.0);

        let mut tape = Tape::new();
        let out = fake_forward(pred.clone(), ls.clone());
        let total = total_loss(&mut tape, &out, &gt, l1, l2, l3)
            .unwrap()
            .total
            .item()
            .unwrap();

        // recompute each component independently and sum
        let mut t2 = Tape::new();
        let p = psnr_loss(&mut t2, &pred, &gt).unwrap().item().unwrap();
        let e = edge_loss(&mut t2, &pred, &gt).unwrap().item().unwrap();
        let u = crate::uncertainty::udl_loss(&mut t2, &pred, &gt, &ls)
            .unwrap()
            .item()
            .unwrap();
        let hand = l1 * p + l2 * e + l3 * u;
        assert!((total - hand).abs() < 1e-12, "{total} vs {hand}");
    }
}
