//! Reconstruction: zero-filled adjoint, a small encoder-decoder network and
//! an unrolled model-based reconstructor with conjugate-gradient data
//! consistency.

mod cg;
mod modl;
mod unet;

pub use cg::{cg, cg_graph, cg_solve, CgResult};
pub use modl::{modl_graph, modl_reconstruct, DcProblem, MoDL, MoDLConfig};
pub use unet::{UNetConfig, UNetLite};

use scanmask_autodiff::{Graph, Var};

use crate::cimage::CImage;
use crate::encoding::{apply_mask, Encoder, MultiCoilKSpace, SensMaps};
use crate::error::{dim, invalid, Result};
use crate::mask::SamplingMask;

/// `A^H M y`.
pub fn zero_filled(y: &MultiCoilKSpace, maps: &SensMaps, mask: &SamplingMask) -> Result<CImage> {
    let masked = apply_mask(y, mask)?;
    Encoder::new(maps)?.adjoint(&masked, Some(mask))
}

pub fn unet_reconstruct(
    net: &UNetLite,
    y: &MultiCoilKSpace,
    maps: &SensMaps,
    mask: &SamplingMask,
) -> Result<CImage> {
    net.apply(&zero_filled(y, maps, mask)?)
}

/// `||x_gt - x_rec|| / ||x_gt||` over both channels.
pub fn nrmse(x_rec: &CImage, x_gt: &CImage) -> Result<f64> {
    if !x_rec.same_dims(x_gt) {
        return dim("nrmse: image dims differ");
    }
    let den = x_gt.norm_sqr();
    if den == 0.0 {
        return invalid("nrmse: ground truth is zero");
    }
    let num: f64 = x_rec
        .data()
        .iter()
        .zip(x_gt.data())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    Ok((num / den).sqrt())
}

/// Differentiable form of [`nrmse`] for a planar `[2, H, W]` variable.
pub fn nrmse_loss(g: &mut Graph<f64>, x_rec: Var, x_gt: &CImage) -> Result<Var> {
    Ok(g.nrmse(x_rec, &x_gt.to_planar())?)
}
