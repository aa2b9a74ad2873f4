use std::sync::Arc;

use num_complex::Complex64;
use scanmask_autodiff::{Graph, LinearOp, Var};

use crate::cimage::CImage;
use crate::encoding::{Encoder, NormalOp};
use crate::error::{dim, invalid, Error, Result};
use crate::mask::SamplingMask;

#[derive(Debug, Clone, PartialEq)]
pub struct CgResult {
    pub x: CImage,
    /// Residual norm before the first iteration and after each one.
    pub residual_norms: Vec<f64>,
}

impl CgResult {
    pub fn iterations(&self) -> usize {
        self.residual_norms.len() - 1
    }
}

fn dot(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(u, v)| u.re * v.re + u.im * v.im)
        .sum()
}

/// Conjugate gradients from zero on a symmetric positive definite
/// operator, stopping once `||r|| <= tol ||b||` or after `iters` steps.
pub fn cg(
    apply: impl Fn(&[Complex64], &mut [Complex64]),
    b: &CImage,
    iters: usize,
    tol: f64,
) -> Result<CgResult> {
    if !b.is_finite() {
        return Err(Error::Numeric("non-finite right-hand side".into()));
    }
    let n = b.data().len();
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    let mut r = b.data().to_vec();
    let mut p = r.clone();
    let mut ap = vec![Complex64::new(0.0, 0.0); n];
    let mut rs = dot(&r, &r);
    let target = tol * rs.sqrt();
    let mut norms = vec![rs.sqrt()];
    for _ in 0..iters {
        if rs.sqrt() <= target || rs == 0.0 {
            break;
        }
        apply(&p, &mut ap);
        let alpha = rs / dot(&p, &ap);
        for i in 0..n {
            x[i] += p[i] * alpha;
            r[i] -= ap[i] * alpha;
        }
        let rs_new = dot(&r, &r);
        let beta = rs_new / rs;
        for i in 0..n {
            p[i] = r[i] + p[i] * beta;
        }
        rs = rs_new;
        if !rs.is_finite() {
            return Err(Error::Numeric("conjugate gradients diverged".into()));
        }
        norms.push(rs.sqrt());
    }
    Ok(CgResult {
        x: CImage::new(b.h(), b.w(), x)?,
        residual_norms: norms,
    })
}

/// Solves `(A^H M A + lambda I) x = rhs + lambda z`.
pub fn cg_solve(
    enc: &Encoder,
    mask: &SamplingMask,
    rhs: &CImage,
    z: &CImage,
    lambda: f64,
    iters: usize,
    tol: f64,
) -> Result<CgResult> {
    if !(lambda > 0.0) || !(tol > 0.0) {
        return invalid(format!(
            "need lambda > 0 and tol > 0, got {lambda} and {tol}"
        ));
    }
    if !rhs.same_dims(z) || rhs.dims() != enc.maps().dims() {
        return dim("cg_solve: image dims disagree");
    }
    if !rhs.is_finite() || !z.is_finite() {
        return Err(Error::Numeric("cg_solve: non-finite input".into()));
    }
    let op = NormalOp::new(enc.clone(), mask.clone(), lambda)?;
    let b = CImage::new(
        rhs.h(),
        rhs.w(),
        rhs.data()
            .iter()
            .zip(z.data())
            .map(|(r, q)| r + q * lambda)
            .collect(),
    )?;
    cg(|p, out| op.apply_complex(p, out), &b, iters, tol)
}

/// The same iteration recorded on a graph, so gradients flow through every
/// step into `b` (unrolled differentiation). `b` is a planar `[2, H, W]`
/// image.
pub fn cg_graph(
    g: &mut Graph<f64>,
    op: Arc<dyn LinearOp<f64>>,
    b: Var,
    iters: usize,
    tol: f64,
) -> Result<Var> {
    if g.value(b).data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite right-hand side".into()));
    }
    let mut x: Option<Var> = None;
    let mut r = b;
    let mut p = b;
    let mut rs = g.dot(r, r)?;
    let target = tol * g.value(rs).item().sqrt();
    for _ in 0..iters {
        let rs_v = g.value(rs).item();
        if rs_v.sqrt() <= target || rs_v == 0.0 {
            break;
        }
        let ap = g.linear(p, op.clone())?;
        let pap = g.dot(p, ap)?;
        let alpha = g.div_scalar(rs, pap)?;
        let step = g.mul_scalar(p, alpha)?;
        x = Some(match x {
            Some(x) => g.add(x, step)?,
            None => step,
        });
        let d = g.mul_scalar(ap, alpha)?;
        r = g.sub(r, d)?;
        let rs_new = g.dot(r, r)?;
        if !g.value(rs_new).item().is_finite() {
            return Err(Error::Numeric("conjugate gradients diverged".into()));
        }
        let beta = g.div_scalar(rs_new, rs)?;
        let bp = g.mul_scalar(p, beta)?;
        p = g.add(r, bp)?;
        rs = rs_new;
    }
    Ok(match x {
        Some(x) => x,
        None => g.scale(b, 0.0),
    })
}
