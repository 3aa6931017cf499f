//! Evaluation metrics: depth error statistics, PSNR, Gaussian-weighted SSIM
//! and occupancy-grid overlap scores.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::img::{DepthMap, ImageBuf};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    /// Percent of pixels with max(p/g, g/p) < 1.25.
    pub delta1: f64,
    /// Percent under 1.25^2.
    pub delta2: f64,
    /// Percent under 1.25^3.
    pub delta3: f64,
    pub evaluated: usize,
}

/// Standard monocular-depth error set over pixels where ground truth exists
/// (zero marks no ground truth). Both maps are clamped to `cap` before
/// comparison; the delta thresholds use strict less-than.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, cap: f64) -> Result<DepthMetrics> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::ShapeMismatch(format!(
            "depth {}x{} vs ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    if !(cap > 0.0) {
        return Err(Error::Config(format!("depth cap {cap} must be positive")));
    }
    let mut abs_rel = 0.0;
    let mut sq_rel = 0.0;
    let mut se = 0.0;
    let mut se_log = 0.0;
    let mut d = [0usize; 3];
    let mut n = 0usize;
    for (p0, g0) in pred.data.iter().zip(&gt.data) {
        if *g0 == DepthMap::NONE {
            continue;
        }
        let g = g0.min(cap);
        let p = p0.min(cap).max(1e-9);
        n += 1;
        abs_rel += (p - g).abs() / g;
        sq_rel += (p - g) * (p - g) / g;
        se += (p - g) * (p - g);
        se_log += (p.ln() - g.ln()) * (p.ln() - g.ln());
        let ratio = (p / g).max(g / p);
        let mut bound = 1.25;
        for dk in d.iter_mut() {
            if ratio < bound {
                *dk += 1;
            }
            bound *= 1.25;
        }
    }
    if n == 0 {
        return Err(Error::EmptyValidSet("no ground-truth depth pixels".into()));
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (se / nf).sqrt(),
        rmse_log: (se_log / nf).sqrt(),
        delta1: 100.0 * d[0] as f64 / nf,
        delta2: 100.0 * d[1] as f64 / nf,
        delta3: 100.0 * d[2] as f64 / nf,
        evaluated: n,
    })
}

/// Peak signal-to-noise ratio in dB, capped at 100 for near-zero error.
pub fn psnr(mse: f64, peak: f64) -> f64 {
    if mse < 1e-10 {
        return 100.0;
    }
    10.0 * (peak * peak / mse).log10()
}

pub fn image_mse(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let n = a.data.len() as f64;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; SSIM_WIN * SSIM_WIN] {
    let mut k = [0.0; SSIM_WIN * SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    let mut sum = 0.0;
    for r in 0..SSIM_WIN {
        for q in 0..SSIM_WIN {
            let dr = r as f64 - c;
            let dq = q as f64 - c;
            let v = (-(dr * dr + dq * dq) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            k[r * SSIM_WIN + q] = v;
            sum += v;
        }
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Mean structural similarity over an 11x11 Gaussian window (sigma 1.5),
/// computed per channel on fully interior windows and averaged. Symmetric in
/// its arguments.
pub fn ssim(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let half = SSIM_WIN / 2;
    if a.width < SSIM_WIN || a.height < SSIM_WIN {
        return Err(Error::Config(format!(
            "image {}x{} smaller than the {SSIM_WIN}x{SSIM_WIN} window",
            a.width, a.height
        )));
    }
    let kernel = ssim_kernel();
    let mut total = 0.0;
    for ch in 0..3 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for cy in half..a.height - half {
            for cx in half..a.width - half {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for r in 0..SSIM_WIN {
                    for q in 0..SSIM_WIN {
                        let w = kernel[r * SSIM_WIN + q];
                        let x = a.pixel(cx + q - half, cy + r - half)[ch];
                        let y = b.pixel(cx + q - half, cy + r - half)[ch];
                        mu_a += w * x;
                        mu_b += w * y;
                        aa += w * x * x;
                        bb += w * y * y;
                        ab += w * x * y;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let s = ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
                sum += s;
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    Ok(total / 3.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OccMetrics {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    /// Set when any denominator was zero and the score was defined as 0.
    pub degenerate: bool,
}

/// Voxel-overlap scores between binary occupancy grids of equal length.
/// Zero-denominator cases score 0 and set the degenerate flag.
pub fn occ_metrics(pred: &[bool], gt: &[bool]) -> Result<OccMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} voxels vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fne = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => {}
        }
    }
    let mut degenerate = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let iou = ratio(tp, tp + fp + fne);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fne);
    Ok(OccMetrics {
        iou,
        precision,
        recall,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn depth_from(vals: &[f64], w: usize, h: usize) -> DepthMap {
        let mut d = DepthMap::new(w, h);
        for y in 0..h {
            for x in 0..w {
                d.set(x, y, vals[y * w + x]);
            }
        }
        d
    }

    /// Brute-force twin written from the metric definitions directly.
    fn depth_oracle(pred: &[f64], gt: &[f64], cap: f64) -> DepthMetrics {
        let pairs: Vec<(f64, f64)> = pred
            .iter()
            .zip(gt)
            .filter(|(_, g)| **g != 0.0)
            .map(|(p, g)| (p.min(cap).max(1e-9), g.min(cap)))
            .collect();
        let n = pairs.len() as f64;
        let frac = |k: i32| {
            100.0
                * pairs
                    .iter()
                    .filter(|(p, g)| (p / g).max(g / p) < 1.25f64.powi(k))
                    .count() as f64
                / n
        };
        DepthMetrics {
            abs_rel: pairs.iter().map(|(p, g)| (p - g).abs() / g).sum::<f64>() / n,
            sq_rel: pairs.iter().map(|(p, g)| (p - g) * (p - g) / g).sum::<f64>() / n,
            rmse: (pairs.iter().map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / n).sqrt(),
            rmse_log: (pairs
                .iter()
                .map(|(p, g)| (p.ln() - g.ln()).powi(2))
                .sum::<f64>()
                / n)
                .sqrt(),
            delta1: frac(1),
            delta2: frac(2),
            delta3: frac(3),
            evaluated: pairs.len(),
        }
    }

    #[test]
    fn depth_metrics_match_oracle_on_random_maps() {
        let mut rng = crate::nn::stream_rng(2, 900, 0);
        for _ in 0..20 {
            let w = 9;
            let h = 7;
            let gt: Vec<f64> = (0..w * h)
                .map(|_| {
                    if rng.gen::<f64>() < 0.15 {
                        0.0
                    } else {
                        rng.gen_range(0.5..60.0)
                    }
                })
                .collect();
            let pred: Vec<f64> = gt
                .iter()
                .map(|g| {
                    let base = if *g == 0.0 { 5.0 } else { *g };
                    base * rng.gen_range(0.6..1.6)
                })
                .collect();
            let got = depth_metrics(&depth_from(&pred, w, h), &depth_from(&gt, w, h), 50.0)
                .unwrap();
            let want = depth_oracle(&pred, &gt, 50.0);
            assert_eq!(got.evaluated, want.evaluated);
            assert!((got.abs_rel - want.abs_rel).abs() < 1e-10);
            assert!((got.sq_rel - want.sq_rel).abs() < 1e-10);
            assert!((got.rmse - want.rmse).abs() < 1e-10);
            assert!((got.rmse_log - want.rmse_log).abs() < 1e-10);
            assert_eq!(got.delta1, want.delta1);
            assert_eq!(got.delta2, want.delta2);
            assert_eq!(got.delta3, want.delta3);
        }
    }

    #[test]
    fn depth_worked_examples() {
        let gt: Vec<f64> = (0..12).map(|i| 2.0 + i as f64).collect();
        let p12: Vec<f64> = gt.iter().map(|g| 1.2 * g).collect();
        let m = depth_metrics(&depth_from(&p12, 4, 3), &depth_from(&gt, 4, 3), 80.0).unwrap();
        assert_relative_eq!(m.abs_rel, 0.2, epsilon = 1e-12);
        assert_eq!(m.delta1, 100.0);

        let p13: Vec<f64> = gt.iter().map(|g| 1.3 * g).collect();
        let m = depth_metrics(&depth_from(&p13, 4, 3), &depth_from(&gt, 4, 3), 80.0).unwrap();
        assert_eq!(m.delta1, 0.0);
        assert_eq!(m.delta2, 100.0);
    }

    #[test]
    fn delta_is_scale_symmetric() {
        let gt: Vec<f64> = (0..6).map(|i| 1.0 + i as f64).collect();
        let up: Vec<f64> = gt.iter().map(|g| 1.2 * g).collect();
        let down: Vec<f64> = gt.iter().map(|g| g / 1.2).collect();
        let a = depth_metrics(&depth_from(&up, 3, 2), &depth_from(&gt, 3, 2), 80.0).unwrap();
        let b = depth_metrics(&depth_from(&down, 3, 2), &depth_from(&gt, 3, 2), 80.0).unwrap();
        assert_eq!(a.delta1, b.delta1);
        assert_eq!(a.delta2, b.delta2);
    }

    #[test]
    fn cap_applies_to_both_maps() {
        let gt = vec![70.0];
        let pred = vec![90.0];
        // both clamp to 50: a perfect score despite the raw 20 m error
        let m = depth_metrics(&depth_from(&pred, 1, 1), &depth_from(&gt, 1, 1), 50.0).unwrap();
        assert_eq!(m.abs_rel, 0.0);
    }

    #[test]
    fn no_valid_pixels_is_an_error() {
        let z = vec![0.0; 4];
        let p = vec![1.0; 4];
        assert!(depth_metrics(&depth_from(&p, 2, 2), &depth_from(&z, 2, 2), 50.0).is_err());
    }

    #[test]
    fn psnr_examples() {
        assert_relative_eq!(psnr(0.01, 1.0), 20.0, epsilon = 1e-12);
        assert_eq!(psnr(0.0, 1.0), 100.0);
        assert_eq!(psnr(1e-11, 1.0), 100.0);
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let mut rng = crate::nn::stream_rng(2, 901, 0);
        let mut a = ImageBuf::new(16, 14);
        let mut b = ImageBuf::new(16, 14);
        for v in a.data.iter_mut() {
            *v = rng.gen::<f64>();
        }
        for (i, v) in b.data.iter_mut().enumerate() {
            *v = (a.data[i] + 0.2 * rng.gen::<f64>()).min(1.0);
        }
        assert_relative_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab < 1.0);
    }

    #[test]
    fn ssim_constant_offset_hand_value() {
        // constant images: var = cov = 0, so
        // ssim = (2 mu_a mu_b + C1)(C2) / ((mu_a^2 + mu_b^2 + C1)(C2))
        let mut a = ImageBuf::new(12, 12);
        let mut b = ImageBuf::new(12, 12);
        for v in a.data.iter_mut() {
            *v = 0.4;
        }
        for v in b.data.iter_mut() {
            *v = 0.6;
        }
        let want = (2.0 * 0.4 * 0.6 + SSIM_C1) / (0.4 * 0.4 + 0.6 * 0.6 + SSIM_C1);
        assert_relative_eq!(ssim(&a, &b).unwrap(), want, epsilon = 1e-9);
    }

    #[test]
    fn occ_metrics_match_counting_oracle() {
        let mut rng = crate::nn::stream_rng(2, 902, 0);
        for _ in 0..50 {
            let n = 64;
            let pred: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < 0.4).collect();
            let gt: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < 0.4).collect();
            let m = occ_metrics(&pred, &gt).unwrap();
            let tp = pred.iter().zip(&gt).filter(|(p, g)| **p && **g).count() as f64;
            let fp = pred.iter().zip(&gt).filter(|(p, g)| **p && !**g).count() as f64;
            let fne = pred.iter().zip(&gt).filter(|(p, g)| !**p && **g).count() as f64;
            if tp + fp + fne > 0.0 {
                assert!((m.iou - tp / (tp + fp + fne)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn occ_zero_denominators_flagged() {
        let m = occ_metrics(&[false, false], &[false, false]).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.iou, 0.0);
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.recall, 0.0);

        let m = occ_metrics(&[false, true], &[false, false]).unwrap();
        assert!(m.degenerate); // recall denominator empty
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.iou, 0.0);
    }

    #[test]
    fn psnr_of_identical_images_is_capped() {
        let a = ImageBuf::new(8, 8);
        assert_eq!(psnr(image_mse(&a, &a).unwrap(), 1.0), 100.0);
    }
}
