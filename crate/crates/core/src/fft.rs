//! Centered, orthonormal 2-D DFT.
//!
//! `Y[k, l] = 1/sqrt(HW) * sum x[i, j] exp(-2 pi i ((k - H/2)(i - H/2)/H + (l - W/2)(j - W/2)/W))`
//!
//! i.e. `fftshift(fft2(ifftshift(x))) / sqrt(HW)` with DC at `(H/2, W/2)`.
//! For even sizes the shifts reduce to a checkerboard sign flip before and
//! after an ordinary FFT, times a global sign `(-1)^(H/2 + W/2)`.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::cimage::CImage;
use crate::error::{dim, invalid, Result};

#[derive(Clone)]
pub struct Fft2c {
    h: usize,
    w: usize,
    fwd_rows: Arc<dyn Fft<f64>>,
    fwd_cols: Arc<dyn Fft<f64>>,
    inv_rows: Arc<dyn Fft<f64>>,
    inv_cols: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl std::fmt::Debug for Fft2c {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2c({}x{})", self.h, self.w)
    }
}

pub fn check_fft_dims(h: usize, w: usize) -> Result<()> {
    if h < 4 || w < 4 || h % 2 != 0 || w % 2 != 0 {
        return invalid(format!("centered FFT needs even dims >= 4, got {h}x{w}"));
    }
    Ok(())
}

impl Fft2c {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        check_fft_dims(h, w)?;
        let mut planner = FftPlanner::new();
        let sign = if (h / 2 + w / 2) % 2 == 0 { 1.0 } else { -1.0 };
        Ok(Self {
            h,
            w,
            fwd_rows: planner.plan_fft_forward(w),
            fwd_cols: planner.plan_fft_forward(h),
            inv_rows: planner.plan_fft_inverse(w),
            inv_cols: planner.plan_fft_inverse(h),
            scale: sign / ((h * w) as f64).sqrt(),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    fn run(&self, buf: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.h, self.w);
        assert_eq!(buf.len(), h * w);
        checkerboard(buf, w, 1.0);
        let (rows, cols) = if inverse {
            (&self.inv_rows, &self.inv_cols)
        } else {
            (&self.fwd_rows, &self.fwd_cols)
        };
        rows.process(buf);
        let mut t = vec![Complex64::new(0.0, 0.0); h * w];
        transpose(buf, &mut t, h, w);
        cols.process(&mut t);
        transpose(&t, buf, w, h);
        checkerboard(buf, w, self.scale);
    }

    /// In-place forward transform of an `h x w` buffer.
    pub fn forward_inplace(&self, buf: &mut [Complex64]) {
        self.run(buf, false);
    }

    pub fn inverse_inplace(&self, buf: &mut [Complex64]) {
        self.run(buf, true);
    }

    pub fn forward(&self, x: &CImage) -> Result<CImage> {
        self.check(x)?;
        let mut out = x.clone();
        self.run(out.data_mut(), false);
        Ok(out)
    }

    pub fn inverse(&self, k: &CImage) -> Result<CImage> {
        self.check(k)?;
        let mut out = k.clone();
        self.run(out.data_mut(), true);
        Ok(out)
    }

    fn check(&self, x: &CImage) -> Result<()> {
        if x.dims() != (self.h, self.w) {
            return dim(format!(
                "FFT planned for {}x{}, got {}x{}",
                self.h,
                self.w,
                x.h(),
                x.w()
            ));
        }
        Ok(())
    }
}

fn checkerboard(buf: &mut [Complex64], w: usize, scale: f64) {
    for (i, v) in buf.iter_mut().enumerate() {
        let (r, c) = (i / w, i % w);
        *v *= if (r + c) % 2 == 0 { scale } else { -scale };
    }
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

pub fn fft2c(x: &CImage) -> Result<CImage> {
    Fft2c::new(x.h(), x.w())?.forward(x)
}

pub fn ifft2c(k: &CImage) -> Result<CImage> {
    Fft2c::new(k.h(), k.w())?.inverse(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_maps_to_center_bin() {
        let x = CImage::from_fn(4, 4, |_, _| Complex64::new(1.0, 0.0));
        let k = fft2c(&x).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let v = k.at(r, c);
                if (r, c) == (2, 2) {
                    assert!((v - Complex64::new(4.0, 0.0)).norm() < 1e-12, "{v}");
                } else {
                    assert!(v.norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn odd_dims_rejected() {
        assert!(fft2c(&CImage::zeros(5, 4)).is_err());
        assert!(fft2c(&CImage::zeros(2, 2)).is_err());
        assert!(Fft2c::new(6, 10).is_ok());
    }
}
