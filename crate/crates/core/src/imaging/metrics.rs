//! Full-reference quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;

/// PSNR reported for bit-identical inputs, where the true value diverges.
pub const PSNR_IDENTICAL_DB: f64 = 300.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio in dB for unit-range images:
/// `10 * log10(1 / mse)`, or [`PSNR_IDENTICAL_DB`] when `mse == 0`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::shape(format!(
            "psnr needs matching shapes, got {:?} vs {:?}",
            a.data().dim(),
            b.data().dim()
        )));
    }
    let n = a.data().len() as f64;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_IDENTICAL_DB);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean structural similarity on luma, 11x11 Gaussian window (sigma 1.5),
/// averaged over fully-inside window positions.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::shape(format!(
            "ssim needs matching shapes, got {:?} vs {:?}",
            a.data().dim(),
            b.data().dim()
        )));
    }
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let x = a.to_luma();
    let y = b.to_luma();
    let x = x.data();
    let y = y.data();
    let weights = gaussian_window();

    let mut total = 0.0;
    let mut count = 0usize;
    for i0 in 0..=(h - SSIM_WINDOW) {
        for j0 in 0..=(w - SSIM_WINDOW) {
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (di, row) in weights.iter().enumerate() {
                for (dj, &wgt) in row.iter().enumerate() {
                    let xv = x[(i0 + di, j0 + dj, 0)];
                    let yv = y[(i0 + di, j0 + dj, 0)];
                    mx += wgt * xv;
                    my += wgt * yv;
                    mxx += wgt * xv * xv;
                    myy += wgt * yv * yv;
                    mxy += wgt * xv * yv;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cxy = mxy - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn gaussian_window() -> [[f64; SSIM_WINDOW]; SSIM_WINDOW] {
    let mut w = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            *v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            sum += *v;
        }
    }
    for row in w.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    w
}

/// PSNR and SSIM of one image pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
}

/// Computes both metrics at once.
pub fn metric_report(a: &ImageTensor, b: &ImageTensor) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr: psnr(a, b)?,
        ssim: ssim(a, b)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_of_identical_images_is_the_sentinel() {
        let img = ImageTensor::from_fn(8, 8, 3, |i, j, k| ((i + j + k) % 4) as f64 / 3.0).unwrap();
        assert_eq!(psnr(&img, &img).unwrap(), PSNR_IDENTICAL_DB);
    }

    #[test]
    fn psnr_uniform_offset_oracle() {
        // |a - b| = 0.1 everywhere: mse = 0.01, psnr = 10 log10(100) = 20 dB.
        let a = ImageTensor::constant(16, 16, 3, 0.3).unwrap();
        let b = ImageTensor::constant(16, 16, 3, 0.4).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = ImageTensor::constant(8, 8, 3, 0.5).unwrap();
        let b = ImageTensor::constant(8, 9, 3, 0.5).unwrap();
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let img = ImageTensor::from_fn(16, 16, 3, |i, j, k| ((i * j + k) % 9) as f64 / 8.0).unwrap();
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_pair_oracle() {
        // Zero variance reduces SSIM to (2ab + C1) / (a^2 + b^2 + C1).
        let a = ImageTensor::constant(16, 16, 1, 0.0).unwrap();
        let b = ImageTensor::constant(16, 16, 1, 1.0).unwrap();
        let want = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let a = ImageTensor::from_fn(13, 17, 3, |i, j, k| ((i * 5 + j * 3 + k) % 11) as f64 / 10.0)
            .unwrap();
        let b = ImageTensor::from_fn(13, 17, 3, |i, j, k| ((i + j * 7 + k * 2) % 13) as f64 / 12.0)
            .unwrap();
        let s1 = ssim(&a, &b).unwrap();
        let s2 = ssim(&b, &a).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&s1));
    }

    #[test]
    fn ssim_rejects_images_smaller_than_window() {
        let a = ImageTensor::constant(10, 16, 1, 0.5).unwrap();
        let b = ImageTensor::constant(10, 16, 1, 0.5).unwrap();
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn gaussian_window_is_normalized_and_peaked_at_center() {
        let w = gaussian_window();
        let sum: f64 = w.iter().flatten().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let center = w[5][5];
        assert!(w.iter().flatten().all(|&v| v <= center));
    }

    #[test]
    fn metric_report_carries_both_values() {
        let a = ImageTensor::constant(12, 12, 3, 0.2).unwrap();
        let b = ImageTensor::constant(12, 12, 3, 0.3).unwrap();
        let r = metric_report(&a, &b).unwrap();
        assert!((r.psnr - psnr(&a, &b).unwrap()).abs() < 1e-12);
        assert!((r.ssim - ssim(&a, &b).unwrap()).abs() < 1e-12);
    }
}
