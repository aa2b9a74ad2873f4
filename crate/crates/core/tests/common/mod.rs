//! Dense oracles and random draws shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scanmask::mask::uniform_random_mask_with_band;
use scanmask::{CImage, MultiCoilKSpace, SamplingMask, SensMaps};

type C = Complex64;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> CImage {
    let data = (0..h * w)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    CImage::new(h, w, data).unwrap()
}

pub fn rand_maps(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> SensMaps {
    SensMaps::normalized((0..c).map(|_| rand_image(rng, h, w)).collect()).unwrap()
}

pub fn rand_kspace(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> MultiCoilKSpace {
    MultiCoilKSpace::new((0..c).map(|_| rand_image(rng, h, w)).collect()).unwrap()
}

pub fn rand_mask(rng: &mut ChaCha8Rng, w: usize) -> SamplingMask {
    let band = 2 * rng.random_range(0..=w / 4);
    let budget = rng.random_range(band.max(1)..=w);
    uniform_random_mask_with_band(w, budget, band, rng.random()).unwrap()
}

/// Dense centered orthonormal DFT, built directly from its definition.
pub fn dense_dft(x: &CImage) -> CImage {
    let (h, w) = x.dims();
    let s = 1.0 / ((h * w) as f64).sqrt();
    CImage::from_fn(h, w, |k, l| {
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..h {
            for j in 0..w {
                let ph = -2.0
                    * PI
                    * ((k as f64 - h as f64 / 2.0) * (i as f64 - h as f64 / 2.0) / h as f64
                        + (l as f64 - w as f64 / 2.0) * (j as f64 - w as f64 / 2.0) / w as f64);
                acc += x.at(i, j) * Complex64::from_polar(1.0, ph);
            }
        }
        acc * s
    })
}

pub fn dense_idft(y: &CImage) -> CImage {
    // unitary: inverse is the conjugate transform
    let conj = CImage::from_fn(y.h(), y.w(), |r, c| y.at(r, c).conj());
    let t = dense_dft(&conj);
    CImage::from_fn(y.h(), y.w(), |r, c| t.at(r, c).conj())
}

pub fn max_diff(a: &CImage, b: &CImage) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(u, v)| (u - v).norm())
        .fold(0.0, f64::max)
}

/// Dense `sum_c (M F S_c)^H (M F S_c)` as an `n x n` complex matrix, `n = HW`.
pub fn dense_normal(maps: &SensMaps, mask: &SamplingMask) -> Vec<Vec<C>> {
    let (h, w) = maps.dims();
    let n = h * w;
    let s = 1.0 / (n as f64).sqrt();
    let f = |k: usize, i: usize| {
        let (kr, kc, ir, ic) = (k / w, k % w, i / w, i % w);
        let ph = -2.0
            * PI
            * ((kr as f64 - h as f64 / 2.0) * (ir as f64 - h as f64 / 2.0) / h as f64
                + (kc as f64 - w as f64 / 2.0) * (ic as f64 - w as f64 / 2.0) / w as f64);
        C::from_polar(s, ph)
    };
    let mut out = vec![vec![C::new(0.0, 0.0); n]; n];
    for sm in maps.maps() {
        // E[k][i] = m(k) F[k][i] S[i]
        let e: Vec<Vec<C>> = (0..n)
            .map(|k| {
                (0..n)
                    .map(|i| {
                        if mask.is_sampled(k % w) {
                            f(k, i) * sm.data()[i]
                        } else {
                            C::new(0.0, 0.0)
                        }
                    })
                    .collect()
            })
            .collect();
        for i in 0..n {
            for j in 0..n {
                let mut acc = C::new(0.0, 0.0);
                for row in &e {
                    acc += row[i].conj() * row[j];
                }
                out[i][j] += acc;
            }
        }
    }
    out
}

/// Gaussian elimination with partial pivoting.
pub fn dense_solve(mut a: Vec<Vec<C>>, mut b: Vec<C>) -> Vec<C> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].norm().total_cmp(&a[j][col].norm()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                let v = a[col][c];
                a[r][c] -= f * v;
            }
            let v = b[col];
            b[r] -= f * v;
        }
    }
    let mut x = vec![C::new(0.0, 0.0); n];
    for r in (0..n).rev() {
        let mut acc = b[r];
        for c in r + 1..n {
            acc -= a[r][c] * x[c];
        }
        x[r] = acc / a[r][r];
    }
    x
}
