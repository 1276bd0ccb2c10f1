//! Evaluation metrics between inverted and true velocity models:
//! relative l2 error, SNR, and SSIM.

use ndarray::Array2;

use crate::error::{FwiError, Result};

/// SSIM sliding window half-width: 7x7 uniform windows.
const SSIM_HALF: isize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub snr_db: f64,
    pub ssim: f64,
    pub rel_l2: f64,
}

/// Computes all three metrics of an estimate against the truth.
pub fn evaluate(estimate: &Array2<f64>, truth: &Array2<f64>) -> Result<MetricReport> {
    Ok(MetricReport {
        snr_db: snr(estimate, truth)?,
        ssim: ssim(estimate, truth)?,
        rel_l2: rel_l2(estimate, truth)?,
    })
}

fn check(estimate: &Array2<f64>, truth: &Array2<f64>) -> Result<()> {
    if estimate.dim() != truth.dim() {
        return Err(FwiError::shape(format!(
            "estimate {:?} vs truth {:?}",
            estimate.dim(),
            truth.dim()
        )));
    }
    Ok(())
}

fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// ||estimate - truth|| / ||truth|| (Frobenius norms).
pub fn rel_l2(estimate: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    check(estimate, truth)?;
    let denom = frob(truth);
    if denom == 0.0 {
        return Err(FwiError::invalid("truth", "zero norm"));
    }
    Ok(frob(&(estimate - truth)) / denom)
}

/// 10 log10(||truth||^2 / ||estimate - truth||^2) in dB; +infinity when
/// the estimate is exact.
pub fn snr(estimate: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    let rel = rel_l2(estimate, truth)?;
    if rel == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-20.0 * rel.log10())
}

/// Mean structural similarity over 7x7 uniform sliding windows with
/// mirror padding. The dynamic range L is fixed from the TRUE model so
/// the metric is comparable across methods; c1 = (0.01 L)^2,
/// c2 = (0.03 L)^2.
pub fn ssim(estimate: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    check(estimate, truth)?;
    let (nz, nx) = truth.dim();
    let window = (2 * SSIM_HALF + 1) as usize;
    if nz < window || nx < window {
        return Err(FwiError::shape(format!(
            "model {nz}x{nx} smaller than the {window}x{window} SSIM window"
        )));
    }
    let t_min = truth.iter().cloned().fold(f64::MAX, f64::min);
    let t_max = truth.iter().cloned().fold(f64::MIN, f64::max);
    let range = if t_max > t_min { t_max - t_min } else { 1.0 };
    let c1 = (0.01 * range) * (0.01 * range);
    let c2 = (0.03 * range) * (0.03 * range);

    // Mirror (symmetric) padding: index -1 reflects to 0, n to n-1.
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - 1 - i;
        }
        i as usize
    };

    let count = (window * window) as f64;
    let mut total = 0.0;
    for ci in 0..nz as isize {
        for cj in 0..nx as isize {
            let mut sum_a = 0.0;
            let mut sum_b = 0.0;
            let mut sum_aa = 0.0;
            let mut sum_bb = 0.0;
            let mut sum_ab = 0.0;
            for di in -SSIM_HALF..=SSIM_HALF {
                for dj in -SSIM_HALF..=SSIM_HALF {
                    let a = estimate[(reflect(ci + di, nz), reflect(cj + dj, nx))];
                    let b = truth[(reflect(ci + di, nz), reflect(cj + dj, nx))];
                    sum_a += a;
                    sum_b += b;
                    sum_aa += a * a;
                    sum_bb += b * b;
                    sum_ab += a * b;
                }
            }
            let mu_a = sum_a / count;
            let mu_b = sum_b / count;
            let var_a = sum_aa / count - mu_a * mu_a;
            let var_b = sum_bb / count - mu_b * mu_b;
            let cov = sum_ab / count - mu_a * mu_b;
            total += (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        }
    }
    Ok(total / (nz * nx) as f64)
}
