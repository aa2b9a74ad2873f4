use num_complex::Complex64;
use scanmask_autodiff::Tensor;

use crate::error::{dim, Result};

/// Complex image, row-major `h x w` (rows are the readout axis, columns
/// the phase-encode axis).
#[derive(Debug, Clone, PartialEq)]
pub struct CImage {
    h: usize,
    w: usize,
    data: Vec<Complex64>,
}

impl CImage {
    pub fn new(h: usize, w: usize, data: Vec<Complex64>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return dim(format!(
                "{h}x{w} image needs {} values, got {}",
                h * w,
                data.len()
            ));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![Complex64::new(0.0, 0.0); h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> Complex64) -> Self {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Self { h, w, data }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn at(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.w + c]
    }

    pub fn same_dims(&self, other: &CImage) -> bool {
        self.dims() == other.dims()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    /// Real inner product `Re <self, other>`.
    pub fn dot_re(&self, other: &CImage) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data
            .iter()
            .all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub fn magnitude(&self) -> RealImage {
        RealImage {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| v.norm()).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> CImage {
        CImage {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Planar two-channel tensor `[2, h, w]` (real plane, then imaginary).
    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(vec![2, self.h, self.w], self.to_planar()).expect("consistent dims")
    }

    pub fn to_planar(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.data.len());
        v.extend(self.data.iter().map(|c| c.re));
        v.extend(self.data.iter().map(|c| c.im));
        v
    }

    pub fn from_planar(h: usize, w: usize, planar: &[f64]) -> Result<Self> {
        let n = h * w;
        if planar.len() != 2 * n {
            return dim(format!("planar buffer of {} for {h}x{w}", planar.len()));
        }
        let data = (0..n)
            .map(|i| Complex64::new(planar[i], planar[n + i]))
            .collect();
        Ok(Self { h, w, data })
    }

    /// Interleaved `[re, im, re, im, ...]` storage.
    pub fn to_interleaved(&self) -> Vec<f64> {
        self.data.iter().flat_map(|c| [c.re, c.im]).collect()
    }

    pub fn from_interleaved(h: usize, w: usize, v: &[f64]) -> Result<Self> {
        if v.len() != 2 * h * w {
            return dim(format!("interleaved buffer of {} for {h}x{w}", v.len()));
        }
        let data = v
            .chunks_exact(2)
            .map(|c| Complex64::new(c[0], c[1]))
            .collect();
        Ok(Self { h, w, data })
    }
}

/// Real-valued image (magnitudes, error maps).
#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl RealImage {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return dim(format!(
                "{h}x{w} image needs {} values, got {}",
                h * w,
                data.len()
            ));
        }
        Ok(Self { h, w, data })
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}
