//! Synthetic multi-coil data: ellipse phantoms, coil profiles, noise and
//! the on-disk dataset layout.

mod dataset;

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cimage::CImage;
use crate::encoding::{MultiCoilKSpace, SensMaps};
use crate::error::{invalid, Result};

pub use dataset::{
    build_dataset, record_seed, DatasetConfig, DatasetManifest, ScanRecord, Split, MANIFEST_FILE,
};

/// Default width of the smoothing kernel applied to phantoms, in pixels.
pub const PHANTOM_SMOOTHING: f64 = 0.7;

/// Ellipse in normalized coordinates: the image spans `[-1, 1]` on both axes,
/// `cx` along columns and `cy` along rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
    pub amp: Complex64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn pixel_coord(i: usize, n: usize) -> f64 {
    (2.0 * i as f64 + 1.0) / n as f64 - 1.0
}

/// Sums the ellipse amplitudes at every pixel center.
pub fn render_ellipses(h: usize, w: usize, ellipses: &[Ellipse]) -> CImage {
    CImage::from_fn(h, w, |r, c| {
        let (x, y) = (pixel_coord(c, w), pixel_coord(r, h));
        ellipses
            .iter()
            .filter(|e| e.contains(x, y))
            .map(|e| e.amp)
            .sum()
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with zero padding. `sigma <= 0` is a no-op.
pub fn gaussian_smooth(img: &CImage, sigma: f64) -> CImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let rad = (k.len() / 2) as isize;
    let (h, w) = img.dims();
    let pass = |src: &CImage, along_rows: bool| {
        CImage::from_fn(h, w, |r, c| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (t, &kv) in k.iter().enumerate() {
                let d = t as isize - rad;
                let (rr, cc) = if along_rows {
                    (r as isize, c as isize + d)
                } else {
                    (r as isize + d, c as isize)
                };
                if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                    acc += src.at(rr as usize, cc as usize) * kv;
                }
            }
            acc
        })
    };
    pass(&pass(img, true), false)
}

fn normalize_max(img: &CImage) -> CImage {
    let m = img.data().iter().map(|v| v.norm()).fold(0.0, f64::max);
    if m > 0.0 {
        img.scaled(1.0 / m)
    } else {
        img.clone()
    }
}

/// Draws `n` random ellipses. The first one is large and roughly centered
/// so every phantom has a body; the rest are scattered inside it.
pub fn random_ellipses(n: usize, rng: &mut impl Rng) -> Vec<Ellipse> {
    (0..n)
        .map(|i| {
            let (cx, cy, a, b) = if i == 0 {
                (
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                    rng.random_range(0.55..0.8),
                    rng.random_range(0.65..0.9),
                )
            } else {
                (
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(0.05..0.35),
                    rng.random_range(0.05..0.35),
                )
            };
            let mag = if i == 0 {
                rng.random_range(0.6..1.0)
            } else {
                rng.random_range(-0.5..0.5)
            };
            let phase = rng.random_range(-PI..PI);
            Ellipse {
                cx,
                cy,
                a,
                b,
                theta: rng.random_range(0.0..PI),
                amp: Complex64::from_polar(mag, phase),
            }
        })
        .collect()
}

/// Random complex ellipse phantom, smoothed and scaled to unit peak
/// magnitude. Deterministic per seed.
pub fn generate_phantom(h: usize, w: usize, n_ellipses: usize, seed: u64) -> Result<CImage> {
    if n_ellipses == 0 {
        return invalid("phantom needs at least one ellipse");
    }
    if h == 0 || w == 0 {
        return invalid("phantom dims must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ellipses = random_ellipses(n_ellipses, &mut rng);
    let img = gaussian_smooth(&render_ellipses(h, w, &ellipses), PHANTOM_SMOOTHING);
    Ok(normalize_max(&img))
}

/// Smooth coil profiles: Gaussian bumps centered around the border with
/// linear phase ramps, normalized to unit sum of squares at every pixel.
pub fn simulate_coil_maps(c: usize, h: usize, w: usize, seed: u64) -> Result<SensMaps> {
    if c == 0 {
        return invalid("need at least one coil");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let maps = (0..c)
        .map(|k| {
            let angle = 2.0 * PI * k as f64 / c as f64 + rng.random_range(-0.3..0.3);
            let radius = rng.random_range(1.0..1.4);
            let (cx, cy) = (radius * angle.cos(), radius * angle.sin());
            let width = rng.random_range(0.7..1.1);
            let (kx, ky) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
            let phi = rng.random_range(-PI..PI);
            CImage::from_fn(h, w, |r, col| {
                let (x, y) = (pixel_coord(col, w), pixel_coord(r, h));
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                let mag = (-d2 / (2.0 * width * width)).exp();
                Complex64::from_polar(mag, phi + kx * x + ky * y)
            })
        })
        .collect();
    SensMaps::normalized(maps)
}

/// Adds circular complex Gaussian noise with standard deviation `sigma`
/// per real component to every entry.
pub fn add_noise(y: &MultiCoilKSpace, sigma: f64, seed: u64) -> Result<MultiCoilKSpace> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return invalid(format!("noise sigma must be >= 0, got {sigma}"));
    }
    let mut out = y.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for coil in out.coils_mut() {
        for v in coil.data_mut() {
            let re = normal.sample(&mut rng);
            let im = normal.sample(&mut rng);
            *v += Complex64::new(re, im);
        }
    }
    Ok(out)
}
