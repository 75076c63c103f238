//! Image and mask quality metrics.

use crate::error::Result;
use crate::filtering::psnr_from_mse;
use crate::objectives::ssim;
use crate::types::{BinaryMask, ImageBuffer};

/// PSNR in dB on unit range, capped at 100 dB for identical images.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.check_same_shape(b)?;
    let se: f64 = a
        .rgb
        .iter()
        .zip(&b.rgb)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(psnr_from_mse(se / a.rgb.len() as f64))
}

pub fn image_ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    ssim(&a.cast::<f64>(), &b.cast::<f64>())
}

/// Counts of predicted-excluded vs ground-truth distractor pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MaskCounts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl MaskCounts {
    /// `pred` bits are supervision flags (0 = excluded); `gt` bits mark distractors.
    pub fn of(pred: &BinaryMask, gt: &BinaryMask) -> Self {
        let mut c = Self::default();
        for (&keep, &dist) in pred.bits.iter().zip(&gt.bits) {
            match (!keep, dist) {
                (true, true) => c.true_pos += 1,
                (true, false) => c.false_pos += 1,
                (false, true) => c.false_neg += 1,
                _ => {}
            }
        }
        c
    }

    pub fn add(&mut self, o: MaskCounts) {
        self.true_pos += o.true_pos;
        self.false_pos += o.false_pos;
        self.false_neg += o.false_neg;
    }

    /// Both regions empty gives 1.
    pub fn iou(&self) -> f64 {
        let union = self.true_pos + self.false_pos + self.false_neg;
        if union == 0 {
            1.0
        } else {
            self.true_pos as f64 / union as f64
        }
    }

    /// Empty prediction gives 1.
    pub fn precision(&self) -> f64 {
        let p = self.true_pos + self.false_pos;
        if p == 0 {
            1.0
        } else {
            self.true_pos as f64 / p as f64
        }
    }

    /// Empty ground truth gives 1.
    pub fn recall(&self) -> f64 {
        let g = self.true_pos + self.false_neg;
        if g == 0 {
            1.0
        } else {
            self.true_pos as f64 / g as f64
        }
    }
}

/// IoU between the predicted excluded region and the ground-truth distractor region.
pub fn mask_iou(pred: &BinaryMask, gt_distractor: &BinaryMask) -> f64 {
    MaskCounts::of(pred, gt_distractor).iou()
}

/// Mean of per-view IoUs.
pub fn mean_mask_iou(pred: &[BinaryMask], gt: &[&BinaryMask]) -> f64 {
    let s: f64 = pred.iter().zip(gt).map(|(p, g)| mask_iou(p, g)).sum();
    s / pred.len().max(1) as f64
}
