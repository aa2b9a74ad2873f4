use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scanmask_autodiff::{Graph, ParamSet, Var};

use crate::cimage::CImage;
use crate::error::{dim, invalid, Result};
use crate::nn::{add_conv, add_zero_conv, Bound};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    /// Channels after the first stage; doubled at the second.
    pub base: usize,
    pub kernel: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { base: 8, kernel: 3 }
    }
}

/// Two-level encoder-decoder on planar `[2, H, W]` images with skip
/// concatenations and a global residual connection. The output layer starts
/// at zero, so an untrained network is the identity.
#[derive(Debug, Clone)]
pub struct UNetLite {
    pub cfg: UNetConfig,
    pub params: ParamSet<f64>,
}

impl UNetLite {
    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self> {
        if cfg.base == 0 || cfg.kernel % 2 == 0 {
            return invalid("UNetLite needs base >= 1 and an odd kernel");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, k) = (cfg.base, cfg.kernel);
        let mut p = ParamSet::new();
        add_conv(&mut p, "enc1", 2, c, k, &mut rng);
        add_conv(&mut p, "enc2", c, 2 * c, k, &mut rng);
        add_conv(&mut p, "mid", 2 * c, 2 * c, k, &mut rng);
        add_conv(&mut p, "dec2", 4 * c, c, k, &mut rng);
        add_conv(&mut p, "dec1", 2 * c, c, k, &mut rng);
        add_zero_conv(&mut p, "out", c, 2, k);
        Ok(Self { cfg, params: p })
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return dim(format!("UNetLite needs dims divisible by 4, got {h}x{w}"));
        }
        Ok(())
    }

    /// Records the network on `g` with parameters already bound as `vars`.
    pub fn forward(&self, g: &mut Graph<f64>, vars: &[Var], x: Var) -> Result<Var> {
        let s = g.value(x).shape().to_vec();
        if s.len() != 3 || s[0] != 2 {
            return dim(format!("UNetLite expects [2, H, W], got {s:?}"));
        }
        self.check_input(s[1], s[2])?;
        let b = Bound {
            params: &self.params,
            vars,
        };
        let s1 = b.conv(g, "enc1", x, true)?;
        let p1 = g.avg_pool2(s1)?;
        let s2 = b.conv(g, "enc2", p1, true)?;
        let p2 = g.avg_pool2(s2)?;
        let m = b.conv(g, "mid", p2, true)?;
        let u2 = g.upsample2(m)?;
        let c2 = g.concat(u2, s2)?;
        let d2 = b.conv(g, "dec2", c2, true)?;
        let u1 = g.upsample2(d2)?;
        let c1 = g.concat(u1, s1)?;
        let d1 = b.conv(g, "dec1", c1, true)?;
        let o = b.conv(g, "out", d1, false)?;
        Ok(g.add(o, x)?)
    }

    /// Inference on one complex image.
    pub fn apply(&self, img: &CImage) -> Result<CImage> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(img.to_tensor());
        let y = self.forward(&mut g, &vars, x)?;
        CImage::from_planar(img.h(), img.w(), g.value(y).data())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)?;
        Ok(())
    }

    pub fn load(cfg: UNetConfig, path: &Path) -> Result<Self> {
        let mut net = Self::new(cfg, 0)?;
        net.params.load(path)?;
        Ok(net)
    }
}
