//! Multi-coil Cartesian encoding `y_c = M F S_c x` and its adjoint.

use std::sync::Arc;

use num_complex::Complex64;
use scanmask_autodiff::LinearOp;

use crate::cimage::{CImage, RealImage};
use crate::error::{dim, invalid, Result};
use crate::fft::Fft2c;
use crate::mask::{band_range, SamplingMask};

const SOS_TOL: f64 = 1e-6;

/// Coil sensitivity maps, normalized so that `sum_c |S_c|^2 = 1` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SensMaps {
    maps: Vec<CImage>,
}

impl SensMaps {
    /// Wraps maps that are already sum-of-squares normalized.
    pub fn new(maps: Vec<CImage>) -> Result<Self> {
        Self::check_shapes(&maps)?;
        let s = Self { maps };
        let dev = s.max_sos_deviation();
        if dev > SOS_TOL {
            return invalid(format!(
                "coil maps are not SOS-normalized (max deviation {dev:e})"
            ));
        }
        Ok(s)
    }

    /// Normalizes raw profiles pixelwise. Pixels where every coil is zero
    /// get a unit first coil.
    pub fn normalized(mut maps: Vec<CImage>) -> Result<Self> {
        Self::check_shapes(&maps)?;
        let n = maps[0].data().len();
        for p in 0..n {
            let sos: f64 = maps
                .iter()
                .map(|m| m.data()[p].norm_sqr())
                .sum::<f64>()
                .sqrt();
            if sos > 0.0 {
                for m in maps.iter_mut() {
                    m.data_mut()[p] /= sos;
                }
            } else {
                maps[0].data_mut()[p] = Complex64::new(1.0, 0.0);
            }
        }
        Ok(Self { maps })
    }

    fn check_shapes(maps: &[CImage]) -> Result<()> {
        let Some(first) = maps.first() else {
            return invalid("need at least one coil");
        };
        if maps.iter().any(|m| !m.same_dims(first)) {
            return dim("coil maps differ in size");
        }
        Ok(())
    }

    pub fn max_sos_deviation(&self) -> f64 {
        let n = self.maps[0].data().len();
        (0..n)
            .map(|p| {
                let s: f64 = self.maps.iter().map(|m| m.data()[p].norm_sqr()).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn coils(&self) -> usize {
        self.maps.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.maps[0].dims()
    }

    pub fn map(&self, c: usize) -> &CImage {
        &self.maps[c]
    }

    pub fn maps(&self) -> &[CImage] {
        &self.maps
    }
}

/// Per-coil k-space, `C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCoilKSpace {
    coils: Vec<CImage>,
}

impl MultiCoilKSpace {
    pub fn new(coils: Vec<CImage>) -> Result<Self> {
        let Some(first) = coils.first() else {
            return invalid("need at least one coil");
        };
        if coils.iter().any(|c| !c.same_dims(first)) {
            return dim("coil k-spaces differ in size");
        }
        Ok(Self { coils })
    }

    pub fn coils(&self) -> &[CImage] {
        &self.coils
    }

    pub fn coils_mut(&mut self) -> &mut [CImage] {
        &mut self.coils
    }

    pub fn n_coils(&self) -> usize {
        self.coils.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.coils[0].dims()
    }

    pub fn dot_re(&self, other: &MultiCoilKSpace) -> f64 {
        self.coils
            .iter()
            .zip(&other.coils)
            .map(|(a, b)| a.dot_re(b))
            .sum()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.coils.iter().map(|c| c.norm_sqr()).sum()
    }
}

fn mask_columns(buf: &mut [Complex64], w: usize, mask: &SamplingMask) {
    for (i, v) in buf.iter_mut().enumerate() {
        if !mask.is_sampled(i % w) {
            *v = Complex64::new(0.0, 0.0);
        }
    }
}

/// Encoding operator bound to one set of coil maps, with cached FFT plans.
#[derive(Debug, Clone)]
pub struct Encoder {
    maps: Arc<SensMaps>,
    fft: Fft2c,
}

impl Encoder {
    pub fn new(maps: &SensMaps) -> Result<Self> {
        Self::shared(Arc::new(maps.clone()))
    }

    pub fn shared(maps: Arc<SensMaps>) -> Result<Self> {
        let (h, w) = maps.dims();
        let fft = Fft2c::new(h, w)?;
        Ok(Self { maps, fft })
    }

    pub fn maps(&self) -> &SensMaps {
        &self.maps
    }

    pub fn fft(&self) -> &Fft2c {
        &self.fft
    }

    fn check_image(&self, x: &CImage) -> Result<()> {
        if x.dims() != self.maps.dims() {
            return dim(format!(
                "image {:?} vs coil maps {:?}",
                x.dims(),
                self.maps.dims()
            ));
        }
        Ok(())
    }

    fn check_mask(&self, m: Option<&SamplingMask>) -> Result<()> {
        if let Some(m) = m {
            let w = self.maps.dims().1;
            if m.n_pe() != w {
                return dim(format!("mask has {} lines, grid has {w} columns", m.n_pe()));
            }
        }
        Ok(())
    }

    /// `M F (S_c x)` per coil; `None` means full sampling.
    pub fn forward(&self, x: &CImage, mask: Option<&SamplingMask>) -> Result<MultiCoilKSpace> {
        self.check_image(x)?;
        self.check_mask(mask)?;
        let w = x.w();
        let coils = self
            .maps
            .maps()
            .iter()
            .map(|s| {
                let mut buf: Vec<Complex64> =
                    s.data().iter().zip(x.data()).map(|(a, b)| a * b).collect();
                self.fft.forward_inplace(&mut buf);
                if let Some(m) = mask {
                    mask_columns(&mut buf, w, m);
                }
                CImage::new(x.h(), w, buf).expect("dims")
            })
            .collect();
        MultiCoilKSpace::new(coils)
    }

    /// `sum_c conj(S_c) F^H (M y_c)`.
    pub fn adjoint(&self, y: &MultiCoilKSpace, mask: Option<&SamplingMask>) -> Result<CImage> {
        if y.n_coils() != self.maps.coils() || y.dims() != self.maps.dims() {
            return dim(format!(
                "k-space {}x{:?} vs maps {}x{:?}",
                y.n_coils(),
                y.dims(),
                self.maps.coils(),
                self.maps.dims()
            ));
        }
        self.check_mask(mask)?;
        let (h, w) = self.maps.dims();
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
        for (s, yc) in self.maps.maps().iter().zip(y.coils()) {
            buf.copy_from_slice(yc.data());
            if let Some(m) = mask {
                mask_columns(&mut buf, w, m);
            }
            self.fft.inverse_inplace(&mut buf);
            for ((o, b), sv) in out.iter_mut().zip(&buf).zip(s.data()) {
                *o += sv.conj() * b;
            }
        }
        CImage::new(h, w, out)
    }

    /// Normal operator `A^H M A x` (mask applied once, it is idempotent).
    pub fn normal(&self, x: &CImage, mask: &SamplingMask) -> Result<CImage> {
        self.check_image(x)?;
        self.check_mask(Some(mask))?;
        let (h, w) = x.dims();
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        self.normal_into(x.data(), mask, &mut out);
        CImage::new(h, w, out)
    }

    /// Unchecked normal operator on raw buffers, accumulating into `out`
    /// after zeroing it.
    pub(crate) fn normal_into(&self, x: &[Complex64], mask: &SamplingMask, out: &mut [Complex64]) {
        let w = self.maps.dims().1;
        out.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        let mut buf = vec![Complex64::new(0.0, 0.0); x.len()];
        for s in self.maps.maps() {
            for ((b, sv), xv) in buf.iter_mut().zip(s.data()).zip(x) {
                *b = sv * xv;
            }
            self.fft.forward_inplace(&mut buf);
            mask_columns(&mut buf, w, mask);
            self.fft.inverse_inplace(&mut buf);
            for ((o, b), sv) in out.iter_mut().zip(&buf).zip(s.data()) {
                *o += sv.conj() * b;
            }
        }
    }
}

/// Zero-filled image as a linear function of a (relaxed) line mask:
/// `m -> sum_c conj(S_c) F^H (m . y_c)`, mapping `[n_pe]` to a planar
/// `[2, H, W]` image. Gradients of an image loss reach the mask through it.
pub struct MaskedAdjointOp {
    enc: Encoder,
    y: MultiCoilKSpace,
}

impl MaskedAdjointOp {
    pub fn new(enc: Encoder, y: MultiCoilKSpace) -> Result<Self> {
        if y.n_coils() != enc.maps.coils() || y.dims() != enc.maps.dims() {
            return dim("k-space does not match coil maps");
        }
        Ok(Self { enc, y })
    }
}

impl LinearOp<f64> for MaskedAdjointOp {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.y.dims().1]
    }

    fn output_shape(&self) -> Vec<usize> {
        let (h, w) = self.y.dims();
        vec![2, h, w]
    }

    fn apply(&self, m: &[f64]) -> Vec<f64> {
        let (h, w) = self.y.dims();
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
        for (s, yc) in self.enc.maps.maps().iter().zip(self.y.coils()) {
            for (i, (b, v)) in buf.iter_mut().zip(yc.data()).enumerate() {
                *b = v * m[i % w];
            }
            self.enc.fft.inverse_inplace(&mut buf);
            for ((o, b), sv) in out.iter_mut().zip(&buf).zip(s.data()) {
                *o += sv.conj() * b;
            }
        }
        CImage::new(h, w, out).expect("dims").to_planar()
    }

    fn adjoint(&self, g: &[f64]) -> Vec<f64> {
        let (h, w) = self.y.dims();
        let g = CImage::from_planar(h, w, g).expect("dims");
        let mut out = vec![0.0; w];
        let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
        for (s, yc) in self.enc.maps.maps().iter().zip(self.y.coils()) {
            for ((b, sv), gv) in buf.iter_mut().zip(s.data()).zip(g.data()) {
                *b = sv * gv;
            }
            self.enc.fft.forward_inplace(&mut buf);
            for (i, (b, v)) in buf.iter().zip(yc.data()).enumerate() {
                out[i % w] += (v.conj() * b).re;
            }
        }
        out
    }
}

/// `x -> A^H M A x + lambda x` on planar `[2, H, W]` images. Symmetric
/// positive definite for `lambda > 0`.
pub struct NormalOp {
    enc: Encoder,
    mask: SamplingMask,
    lambda: f64,
}

impl NormalOp {
    pub fn new(enc: Encoder, mask: SamplingMask, lambda: f64) -> Result<Self> {
        enc.check_mask(Some(&mask))?;
        Ok(Self { enc, mask, lambda })
    }

    pub fn apply_complex(&self, x: &[Complex64], out: &mut [Complex64]) {
        self.enc.normal_into(x, &self.mask, out);
        for (o, v) in out.iter_mut().zip(x) {
            *o += v * self.lambda;
        }
    }
}

impl LinearOp<f64> for NormalOp {
    fn input_shape(&self) -> Vec<usize> {
        let (h, w) = self.enc.maps.dims();
        vec![2, h, w]
    }

    fn output_shape(&self) -> Vec<usize> {
        self.input_shape()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (h, w) = self.enc.maps.dims();
        let x = CImage::from_planar(h, w, x).expect("dims");
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        self.apply_complex(x.data(), &mut out);
        CImage::new(h, w, out).expect("dims").to_planar()
    }

    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        self.apply(y)
    }
}

pub fn forward(x: &CImage, maps: &SensMaps, mask: &SamplingMask) -> Result<MultiCoilKSpace> {
    Encoder::new(maps)?.forward(x, Some(mask))
}

pub fn adjoint(y: &MultiCoilKSpace, maps: &SensMaps, mask: &SamplingMask) -> Result<CImage> {
    Encoder::new(maps)?.adjoint(y, Some(mask))
}

/// Zeroes every phase-encode column whose mask bit is 0.
pub fn apply_mask(k: &MultiCoilKSpace, mask: &SamplingMask) -> Result<MultiCoilKSpace> {
    let (_, w) = k.dims();
    if mask.n_pe() != w {
        return dim(format!(
            "mask has {} lines, k-space has {w} columns",
            mask.n_pe()
        ));
    }
    let mut out = k.clone();
    for c in out.coils_mut() {
        mask_columns(c.data_mut(), w, mask);
    }
    Ok(out)
}

/// Coil-averaged k-space cropped to the centered `width` columns.
pub fn extract_lowfreq(y: &MultiCoilKSpace, width: usize) -> Result<CImage> {
    let (h, w) = y.dims();
    if width == 0 || width > w || width % 2 != 0 {
        return invalid(format!(
            "low-frequency width must be even and within 1..={w}, got {width}"
        ));
    }
    let cols = band_range(w, width);
    let inv_c = 1.0 / y.n_coils() as f64;
    let mut out = Vec::with_capacity(h * width);
    for r in 0..h {
        for c in cols.clone() {
            let s: Complex64 = y.coils().iter().map(|k| k.at(r, c)).sum();
            out.push(s * inv_c);
        }
    }
    CImage::new(h, width, out)
}

/// Pixelwise root sum of squares over coils.
pub fn sos_combine(imgs: &[CImage]) -> Result<RealImage> {
    let Some(first) = imgs.first() else {
        return invalid("sos_combine needs at least one coil image");
    };
    if imgs.iter().any(|i| !i.same_dims(first)) {
        return dim("coil images differ in size");
    }
    let n = first.data().len();
    let data = (0..n)
        .map(|p| {
            imgs.iter()
                .map(|i| i.data()[p].norm_sqr())
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    RealImage::new(first.h(), first.w(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn sos_examples() {
        let a = CImage::from_fn(1, 2, |_, j| c(3.0 * (j + 1) as f64, 0.0));
        let b = CImage::from_fn(1, 2, |_, _| c(0.0, 4.0));
        let s = sos_combine(&[a.clone(), b]).unwrap();
        assert!((s.data[0] - 5.0).abs() < 1e-15);
        let single = sos_combine(&[a.clone()]).unwrap();
        assert_eq!(single.data, vec![3.0, 6.0]);
        assert!(sos_combine(&[]).is_err());
    }

    #[test]
    fn lowfreq_examples() {
        let k1 = CImage::from_fn(4, 8, |r, j| c(r as f64, j as f64));
        let y = MultiCoilKSpace::new(vec![k1.clone()]).unwrap();
        assert_eq!(extract_lowfreq(&y, 8).unwrap(), k1);
        let y2 = MultiCoilKSpace::new(vec![k1.clone(), k1.clone()]).unwrap();
        assert_eq!(
            extract_lowfreq(&y2, 4).unwrap(),
            extract_lowfreq(&y, 4).unwrap()
        );
        let neg = k1.scaled(-1.0);
        let y3 = MultiCoilKSpace::new(vec![k1, neg]).unwrap();
        assert!(extract_lowfreq(&y3, 4).unwrap().norm() == 0.0);
        assert!(extract_lowfreq(&y, 10).is_err());
        assert!(extract_lowfreq(&y, 3).is_err());
    }

    #[test]
    fn maps_must_be_normalized() {
        let m = CImage::from_fn(4, 4, |_, _| c(0.5, 0.0));
        assert!(SensMaps::new(vec![m.clone()]).is_err());
        let s = SensMaps::normalized(vec![m.clone(), m]).unwrap();
        assert!(s.max_sos_deviation() < 1e-15);
    }
}
