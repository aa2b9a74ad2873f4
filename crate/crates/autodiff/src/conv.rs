//! im2col / col2im kernels for single-example 2-D convolution.

use crate::Real;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let n_out = g.col_cols();
    let mut cols = vec![T::zero(); g.col_rows() * n_out];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oi in 0..g.h_out {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    let out = &mut dst[oi * g.w_out..(oi + 1) * g.w_out];
                    for (oj, o) in out.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            *o = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds `cols` back into an image-shaped buffer.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n_out = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oi in 0..g.h_out {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    let s = &src[oi * g.w_out..(oi + 1) * g.w_out];
                    for (oj, &v) in s.iter().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
