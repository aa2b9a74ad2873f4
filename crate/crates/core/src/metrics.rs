//! Image quality metrics on magnitude images.

use crate::cimage::RealImage;
use crate::error::{dim, invalid, Result};

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check(rec: &RealImage, gt: &RealImage) -> Result<f64> {
    if (rec.h, rec.w) != (gt.h, gt.w) {
        return dim(format!(
            "metric inputs differ: {}x{} vs {}x{}",
            rec.h, rec.w, gt.h, gt.w
        ));
    }
    let peak = gt.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak <= 0.0 {
        return invalid("ground truth has zero range");
    }
    Ok(peak)
}

/// `||rec - gt|| / ||gt||`.
pub fn nrmse(rec: &RealImage, gt: &RealImage) -> Result<f64> {
    check(rec, gt)?;
    let num: f64 = rec
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let den: f64 = gt.data.iter().map(|b| b * b).sum();
    Ok((num / den).sqrt())
}

/// `20 log10(max|gt| / rmse)`, capped at [`PSNR_CAP`].
pub fn psnr(rec: &RealImage, gt: &RealImage) -> Result<f64> {
    let peak = check(rec, gt)?;
    let mse = rec
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / gt.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((20.0 * (peak / mse.sqrt()).log10()).min(PSNR_CAP))
}

/// Mean structural similarity over all fully contained 7x7 windows, with
/// sample (co)variances and dynamic range `max|gt|`.
pub fn ssim(rec: &RealImage, gt: &RealImage) -> Result<f64> {
    let range = check(rec, gt)?;
    let win = SSIM_WINDOW;
    if rec.h < win || rec.w < win {
        return dim(format!("SSIM needs images of at least {win}x{win}"));
    }
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    let n = (win * win) as f64;
    let cov_norm = n / (n - 1.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=rec.h - win {
        for c0 in 0..=rec.w - win {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + win {
                for c in c0..c0 + win {
                    let x = rec.at(r, c);
                    let y = gt.at(r, c);
                    sx += x;
                    sy += y;
                    sxx += x * x;
                    syy += y * y;
                    sxy += x * y;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = cov_norm * (sxx / n - mx * mx);
            let vy = cov_norm * (syy / n - my * my);
            let vxy = cov_norm * (sxy / n - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * vxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> RealImage {
        RealImage::new(h, w, (0..h * w).map(|i| f(i / w, i % w)).collect()).unwrap()
    }

    #[test]
    fn identical_images() {
        let a = img(16, 16, |r, c| ((r * 7 + c * 3) % 11) as f64 / 10.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert_eq!(nrmse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn flat_offset_ssim_is_luminance_term() {
        let (v, c) = (0.5, 0.1);
        let gt = img(8, 8, |_, _| v);
        let rec = img(8, 8, |_, _| v + c);
        let c1 = (K1 * v).powi(2);
        let want = (2.0 * v * (v + c) + c1) / (v * v + (v + c).powi(2) + c1);
        let got = ssim(&rec, &gt).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} {want}");
        assert!(got < 1.0);
    }

    #[test]
    fn psnr_matches_direct_loop() {
        let gt = img(8, 8, |r, c| (r + c) as f64 / 14.0);
        let rec = img(8, 8, |r, c| {
            (r + c) as f64 / 14.0 + if (r + c) % 2 == 0 { 0.01 } else { -0.02 }
        });
        let mut se = 0.0;
        let mut peak: f64 = 0.0;
        let mut g2 = 0.0;
        for i in 0..64 {
            se += (rec.data[i] - gt.data[i]).powi(2);
            peak = peak.max(gt.data[i]);
            g2 += gt.data[i].powi(2);
        }
        let want = 20.0 * (peak / (se / 64.0).sqrt()).log10();
        assert!((psnr(&rec, &gt).unwrap() - want).abs() < 1e-12);
        // consistency with NRMSE: psnr = 20 log10(peak sqrt(N) / ||gt||) - 20 log10(nrmse)
        let e = nrmse(&rec, &gt).unwrap();
        let alt = 20.0 * (peak * 8.0 / g2.sqrt()).log10() - 20.0 * e.log10();
        assert!((psnr(&rec, &gt).unwrap() - alt).abs() < 1e-10);
        assert!(psnr(&rec, &img(8, 8, |_, _| 0.0)).is_err());
    }
}
