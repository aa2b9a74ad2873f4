//! Scan-adaptive line prediction from the low-frequency observation, plus
//! the nearest-neighbor and population-level baselines.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scanmask_autodiff::{top_k_with_forced, Graph, ParamSet, Tensor, Var};

use crate::cimage::CImage;
use crate::error::{dim, invalid, Result};
use crate::mask::{band_range, SamplingMask};
use crate::nn::{add_conv, Bound};

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Readout rows of the observation.
    pub h: usize,
    /// Columns of the observation.
    pub l: usize,
    pub n_pe: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
}

impl SamplerConfig {
    pub fn new(h: usize, l: usize, n_pe: usize) -> Self {
        Self {
            h,
            l,
            n_pe,
            channels: vec![16, 16, 8],
            kernel: 3,
        }
    }
}

/// Conv stack over the `[2, H, L]` observation, mean over the readout axis,
/// dense head to one logit per phase-encode line. The head starts at zero,
/// so an untrained net predicts 0.5 for every line.
#[derive(Debug, Clone)]
pub struct SamplerNet {
    pub cfg: SamplerConfig,
    pub params: ParamSet<f64>,
}

impl SamplerNet {
    pub fn new(cfg: SamplerConfig, seed: u64) -> Result<Self> {
        if cfg.channels.is_empty()
            || cfg.kernel % 2 == 0
            || cfg.h == 0
            || cfg.l == 0
            || cfg.n_pe == 0
        {
            return invalid("sampler needs conv layers, an odd kernel and positive dims");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let mut c_in = 2;
        for (i, &c) in cfg.channels.iter().enumerate() {
            add_conv(
                &mut p,
                &format!("conv{}", i + 1),
                c_in,
                c,
                cfg.kernel,
                &mut rng,
            );
            c_in = c;
        }
        p.add("head.w", Tensor::zeros(&[c_in * cfg.l, cfg.n_pe]));
        p.add("head.b", Tensor::zeros(&[cfg.n_pe]));
        Ok(Self { cfg, params: p })
    }

    /// Planar input tensor, scaled to unit peak magnitude.
    pub fn input_tensor(&self, z: &CImage) -> Result<Tensor<f64>> {
        if z.dims() != (self.cfg.h, self.cfg.l) {
            return dim(format!(
                "sampler expects a {}x{} observation, got {}x{}",
                self.cfg.h,
                self.cfg.l,
                z.h(),
                z.w()
            ));
        }
        let peak = z.data().iter().map(|v| v.norm()).fold(0.0, f64::max);
        let scaled = if peak > 0.0 {
            z.scaled(1.0 / peak)
        } else {
            z.clone()
        };
        Ok(scaled.to_tensor())
    }

    pub fn forward(&self, g: &mut Graph<f64>, vars: &[Var], z: Var) -> Result<Var> {
        let b = Bound {
            params: &self.params,
            vars,
        };
        let mut x = z;
        for i in 0..self.cfg.channels.len() {
            x = b.conv(g, &format!("conv{}", i + 1), x, true)?;
        }
        let pooled = g.mean_axis(x, 1)?;
        let n = g.value(pooled).numel();
        let flat = g.reshape(pooled, vec![n])?;
        Ok(g.dense(flat, b.var("head.w"), b.var("head.b"))?)
    }

    /// Records the forward pass for observation `z`.
    pub fn logits_var(&self, g: &mut Graph<f64>, vars: &[Var], z: &CImage) -> Result<Var> {
        let t = self.input_tensor(z)?;
        let zv = g.constant(t);
        self.forward(g, vars, zv)
    }

    pub fn predict_logits(&self, z: &CImage) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let a = self.logits_var(&mut g, &vars, z)?;
        Ok(g.value(a).data().to_vec())
    }

    pub fn predict_mask(&self, z: &CImage, budget: usize, band: usize) -> Result<SamplingMask> {
        logits_to_mask(&self.predict_logits(z)?, budget, band)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)?;
        Ok(())
    }

    pub fn load(cfg: SamplerConfig, path: &Path) -> Result<Self> {
        let mut s = Self::new(cfg, 0)?;
        s.params.load(path)?;
        Ok(s)
    }
}

fn check_budget(n: usize, budget: usize, band: usize) -> Result<()> {
    if budget > n || band > budget {
        return invalid(format!(
            "infeasible budget {budget} with band {band} on {n} lines"
        ));
    }
    Ok(())
}

fn stable_sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid, then the band plus the highest remaining probabilities.
pub fn logits_to_mask(a: &[f64], budget: usize, band: usize) -> Result<SamplingMask> {
    check_budget(a.len(), budget, band)?;
    let p: Vec<f64> = a.iter().map(|&v| stable_sigmoid(v)).collect();
    let forced: Vec<usize> = band_range(a.len(), band).collect();
    SamplingMask::new(top_k_with_forced(&p, budget, &forced)?, band)
}

/// Graph form of [`logits_to_mask`]: the binary mask as a variable whose
/// gradient passes straight through to the sigmoid.
pub fn mask_var(g: &mut Graph<f64>, logits: Var, budget: usize, band: usize) -> Result<Var> {
    let n = g.value(logits).numel();
    check_budget(n, budget, band)?;
    let p = g.sigmoid(logits);
    let forced: Vec<usize> = band_range(n, band).collect();
    Ok(g.st_binarize(p, budget, &forced)?)
}

pub fn bce_mask_loss(g: &mut Graph<f64>, logits: Var, m_ref: &SamplingMask) -> Result<Var> {
    let n = g.value(logits).numel();
    if n != m_ref.n_pe() {
        return dim(format!("{n} logits for a {}-line mask", m_ref.n_pe()));
    }
    Ok(g.bce_with_logits(logits, &m_ref.as_f64())?)
}

/// Mean binary cross-entropy of plain logits against a mask.
pub fn bce_mask_value(a: &[f64], m_ref: &SamplingMask) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(Tensor::from_vec(a.to_vec()));
    let l = bce_mask_loss(&mut g, v, m_ref)?;
    Ok(g.value(l).item())
}

/// Labeled example for nearest-neighbor mask selection.
pub struct LabeledObservation<'a> {
    pub id: &'a str,
    pub z: &'a CImage,
    pub mask: &'a SamplingMask,
}

/// Index of the training observation closest to `z_test` in Euclidean
/// distance; ties go to the lowest record id.
pub fn suno_select(z_test: &CImage, train: &[LabeledObservation]) -> Result<usize> {
    if train.is_empty() {
        return invalid("nearest-neighbor selection needs at least one labeled record");
    }
    let mut best: Option<(f64, usize)> = None;
    for (i, t) in train.iter().enumerate() {
        if !t.z.same_dims(z_test) {
            return dim(format!("observation of {} has different dims", t.id));
        }
        let d: f64 =
            t.z.data()
                .iter()
                .zip(z_test.data())
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>()
                .sqrt();
        let better = match best {
            None => true,
            Some((bd, bi)) => d < bd || (d == bd && t.id < train[bi].id),
        };
        if better {
            best = Some((d, i));
        }
    }
    Ok(best.expect("non-empty").1)
}

pub fn suno_select_mask(z_test: &CImage, train: &[LabeledObservation]) -> Result<SamplingMask> {
    Ok(train[suno_select(z_test, train)?].mask.clone())
}

/// Scan-independent learned mask: one free logit per line, passed through
/// `sigmoid(logit / temperature)` and the same budgeted binarization.
#[derive(Debug, Clone)]
pub struct PopulationMask {
    pub params: ParamSet<f64>,
    pub temperature: f64,
}

impl PopulationMask {
    pub fn new(n_pe: usize, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return invalid("temperature must be > 0");
        }
        let mut params = ParamSet::new();
        params.add("logits", Tensor::zeros(&[n_pe]));
        Ok(Self {
            params,
            temperature,
        })
    }

    pub fn n_pe(&self) -> usize {
        self.params.param(0).value.numel()
    }

    pub fn scaled_logits(&self) -> Vec<f64> {
        self.params
            .param(0)
            .value
            .data()
            .iter()
            .map(|v| v / self.temperature)
            .collect()
    }

    pub fn mask(&self, budget: usize, band: usize) -> Result<SamplingMask> {
        logits_to_mask(&self.scaled_logits(), budget, band)
    }

    /// Binary mask variable with straight-through gradients to the logits.
    pub fn mask_var(
        &self,
        g: &mut Graph<f64>,
        vars: &[Var],
        budget: usize,
        band: usize,
    ) -> Result<Var> {
        let a = g.scale(vars[0], 1.0 / self.temperature);
        mask_var(g, a, budget, band)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)?;
        Ok(())
    }

    pub fn load(n_pe: usize, temperature: f64, path: &Path) -> Result<Self> {
        let mut p = Self::new(n_pe, temperature)?;
        p.params.load(path)?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    #[test]
    fn bce_examples() {
        let m = SamplingMask::from_indices(4, &[0, 2], 0).unwrap();
        assert!((bce_mask_value(&[0.0; 4], &m).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(bce_mask_value(&[20.0, -20.0, 20.0, -20.0], &m).unwrap() < 1e-8);
        let v = bce_mask_value(&[1.0, -1.0, 2.0, -2.0], &m).unwrap();
        let direct = (2.0 * (1.0 + (-1f64).exp()).ln() + 2.0 * (1.0 + (-2f64).exp()).ln()) / 4.0;
        assert!((v - direct).abs() < 1e-15);
        assert!((v - 0.220095).abs() < 5e-7, "{v}");
        assert!(bce_mask_value(&[0.0; 3], &m).is_err());
    }

    #[test]
    fn logits_to_mask_examples() {
        let mut a = vec![-10.0; 16];
        for j in [1, 3, 12] {
            a[j] = 10.0;
        }
        let m = logits_to_mask(&a, 7, 4).unwrap();
        assert_eq!(m.indices(), vec![1, 3, 6, 7, 8, 9, 12]);
        let m = logits_to_mask(&[0.0; 16], 7, 4).unwrap();
        assert_eq!(m.indices(), vec![0, 1, 2, 6, 7, 8, 9]);
        assert!(logits_to_mask(&[0.0; 16], 3, 4).is_err());
    }

    #[test]
    fn zero_observation_gives_equal_logits() {
        let net = SamplerNet::new(SamplerConfig::new(8, 4, 16), 1).unwrap();
        let a = net.predict_logits(&CImage::zeros(8, 4)).unwrap();
        assert!(a.iter().all(|&v| v == a[0]));
        assert!(net.predict_logits(&CImage::zeros(8, 6)).is_err());
    }

    #[test]
    fn nearest_neighbor_examples() {
        let z = |v: f64| CImage::from_fn(2, 2, |_, _| Complex64::new(v, 0.0));
        let masks: Vec<SamplingMask> = (0..3)
            .map(|i| SamplingMask::from_indices(4, &[i], 0).unwrap())
            .collect();
        let zs = [z(0.5), z(1.0), z(1.5)];
        let train: Vec<LabeledObservation> = ["a", "b", "c"]
            .iter()
            .zip(&zs)
            .zip(&masks)
            .map(|((id, z), mask)| LabeledObservation { id, z, mask })
            .collect();
        assert_eq!(suno_select_mask(&z(1.0), &train).unwrap(), masks[1]);
        // distances 1, 2, 3 (per-entry offsets of 0.5, 1, 1.5 over 4 entries)
        assert_eq!(suno_select(&z(0.0), &train).unwrap(), 0);
        assert_eq!(suno_select(&z(7.0), &train[..1]).unwrap(), 0);
        assert!(suno_select(&z(0.0), &[]).is_err());
    }

    #[test]
    fn untrained_population_mask() {
        let p = PopulationMask::new(16, 1.0).unwrap();
        assert_eq!(p.mask(7, 4).unwrap().indices(), vec![0, 1, 2, 6, 7, 8, 9]);
    }
}
