use std::path::Path;
use std::sync::Arc;

use scanmask_autodiff::{Graph, LinearOp, Var};

use super::cg::cg_graph;
use super::unet::{UNetConfig, UNetLite};
use crate::cimage::CImage;
use crate::encoding::{Encoder, MultiCoilKSpace, NormalOp, SensMaps};
use crate::error::{invalid, Result};
use crate::mask::SamplingMask;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoDLConfig {
    /// Number of data-consistency (x) updates.
    pub k: usize,
    pub lambda_dc: f64,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub unet: UNetConfig,
}

impl Default for MoDLConfig {
    fn default() -> Self {
        Self {
            k: 3,
            lambda_dc: 0.05,
            cg_iters: 10,
            cg_tol: 1e-6,
            unet: UNetConfig::default(),
        }
    }
}

impl MoDLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return invalid("MoDL needs k >= 1");
        }
        if !(self.lambda_dc > 0.0) || !(self.cg_tol > 0.0) {
            return invalid("MoDL needs lambda_dc > 0 and cg_tol > 0");
        }
        Ok(())
    }
}

/// Data-consistency pieces for one scan and mask.
pub struct DcProblem {
    pub op: Arc<NormalOp>,
    /// Zero-filled image `A^H M y`, planar.
    pub zero_filled: Vec<f64>,
    pub h: usize,
    pub w: usize,
}

impl DcProblem {
    pub fn new(
        y: &MultiCoilKSpace,
        maps: &SensMaps,
        mask: &SamplingMask,
        lambda: f64,
    ) -> Result<Self> {
        let enc = Encoder::new(maps)?;
        let zf = enc.adjoint(y, Some(mask))?;
        let (h, w) = zf.dims();
        Ok(Self {
            op: Arc::new(NormalOp::new(enc, mask.clone(), lambda)?),
            zero_filled: zf.to_planar(),
            h,
            w,
        })
    }
}

/// Records the unrolled reconstruction: `x_0 = z_0 = A^H M y`, then
/// `x_{n+1} = CG(A^H M A + lambda I, A^H M y + lambda z_n)` and
/// `z_{n+1} = D(x_{n+1})`, returning `x_K`.
pub fn modl_graph(
    g: &mut Graph<f64>,
    cfg: &MoDLConfig,
    dc: &DcProblem,
    mut denoise: impl FnMut(&mut Graph<f64>, Var) -> Result<Var>,
) -> Result<Var> {
    cfg.validate()?;
    let shape = vec![2, dc.h, dc.w];
    let zf = g.constant(scanmask_autodiff::Tensor::new(
        shape,
        dc.zero_filled.clone(),
    )?);
    let op: Arc<dyn LinearOp<f64>> = dc.op.clone();
    let mut z = zf;
    let mut x = zf;
    for n in 0..cfg.k {
        let lz = g.scale(z, cfg.lambda_dc);
        let b = g.add(zf, lz)?;
        x = cg_graph(g, op.clone(), b, cfg.cg_iters, cfg.cg_tol)?;
        if n + 1 < cfg.k {
            z = denoise(g, x)?;
        }
    }
    Ok(x)
}

/// MoDL with a shared [`UNetLite`] denoiser.
#[derive(Debug, Clone)]
pub struct MoDL {
    pub cfg: MoDLConfig,
    pub denoiser: UNetLite,
}

impl MoDL {
    pub fn new(cfg: MoDLConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            denoiser: UNetLite::new(cfg.unet, seed)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<f64>, vars: &[Var], dc: &DcProblem) -> Result<Var> {
        modl_graph(g, &self.cfg, dc, |g, x| self.denoiser.forward(g, vars, x))
    }

    pub fn reconstruct(
        &self,
        y: &MultiCoilKSpace,
        maps: &SensMaps,
        mask: &SamplingMask,
    ) -> Result<CImage> {
        let dc = DcProblem::new(y, maps, mask, self.cfg.lambda_dc)?;
        let mut g = Graph::new();
        let vars = self.denoiser.params.bind(&mut g, false);
        let x = self.forward(&mut g, &vars, &dc)?;
        CImage::from_planar(dc.h, dc.w, g.value(x).data())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.denoiser.save(path)
    }

    pub fn load(cfg: MoDLConfig, path: &Path) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            denoiser: UNetLite::load(cfg.unet, path)?,
        })
    }
}

/// MoDL with an arbitrary graph-level denoiser.
pub fn modl_reconstruct(
    cfg: &MoDLConfig,
    y: &MultiCoilKSpace,
    maps: &SensMaps,
    mask: &SamplingMask,
    denoise: impl FnMut(&mut Graph<f64>, Var) -> Result<Var>,
) -> Result<CImage> {
    let dc = DcProblem::new(y, maps, mask, cfg.lambda_dc)?;
    let mut g = Graph::new();
    let x = modl_graph(&mut g, cfg, &dc, denoise)?;
    CImage::from_planar(dc.h, dc.w, g.value(x).data())
}
