use std::sync::Arc;

use rayon::prelude::*;
use scanmask_autodiff::{Adam, AdamConfig, Optimizer, ParamSet, RmsProp, RmsPropConfig, Tensor};

use super::{batch_gradients, BatchSampler, Geometry, LossLog, Sample, TrainConfig};
use crate::encoding::{Encoder, MaskedAdjointOp};
use crate::error::{invalid, Result};
use crate::mask::{band_range, uniform_random_mask_with_band, SamplingMask};
use crate::recon::{nrmse_loss, DcProblem, MoDL, UNetLite};
use crate::sampler::{bce_mask_loss, bce_mask_value, mask_var, PopulationMask, SamplerNet};
use crate::synth::ScanRecord;

/// Where reconstructor training takes its masks from.
pub enum MaskSource<'a> {
    IcdLabels,
    /// A uniform random mask per record, fixed by the seed and the record's
    /// position.
    UniformRandom {
        seed: u64,
    },
    Fixed(SamplingMask),
    Sampler(&'a SamplerNet),
    Population(&'a PopulationMask),
}

pub fn random_mask_seed(seed: u64, index: usize) -> u64 {
    (seed ^ 0x5eed_5eed_5eed_5eed)
        .wrapping_mul(0x2545_f491_4f6c_dd1d)
        .wrapping_add(index as u64)
}

fn require_labels(records: &[ScanRecord]) -> Result<()> {
    if records.is_empty() {
        return invalid("training needs at least one record");
    }
    if let Some(r) = records.iter().find(|r| r.m_ref.is_none()) {
        return invalid(format!(
            "record {} has no reference mask; run gen-masks first",
            r.id
        ));
    }
    Ok(())
}

/// One mask per record from `source`.
pub fn resolve_masks(
    records: &[ScanRecord],
    source: &MaskSource,
    geom: Geometry,
) -> Result<Vec<SamplingMask>> {
    records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let n_pe = r.x_gt.w();
            let m = match source {
                MaskSource::IcdLabels => r.m_ref.clone().ok_or_else(|| {
                    crate::Error::Validation(format!("record {} is unlabeled", r.id))
                })?,
                MaskSource::UniformRandom { seed } => uniform_random_mask_with_band(
                    n_pe,
                    geom.budget,
                    geom.band,
                    random_mask_seed(*seed, i),
                )?,
                MaskSource::Fixed(m) => m.clone(),
                MaskSource::Sampler(s) => s.predict_mask(&r.z, geom.budget, geom.band)?,
                MaskSource::Population(p) => p.mask(geom.budget, geom.band)?,
            };
            if m.n_pe() != n_pe {
                return invalid(format!(
                    "mask has {} lines, record {} has {n_pe}",
                    m.n_pe(),
                    r.id
                ));
            }
            Ok(m)
        })
        .collect()
}

fn adjoint_ops(records: &[ScanRecord]) -> Result<Vec<Arc<MaskedAdjointOp>>> {
    records
        .par_iter()
        .map(|r| {
            Ok(Arc::new(MaskedAdjointOp::new(
                Encoder::new(&r.maps)?,
                r.y_full.clone(),
            )?))
        })
        .collect()
}

fn planar(r: &ScanRecord, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(vec![2, r.x_gt.h(), r.x_gt.w()], data).expect("dims")
}

fn apply_step(
    set: &mut ParamSet<f64>,
    grads: &[Vec<f64>],
    opt: &mut dyn Optimizer<f64>,
) -> Result<()> {
    set.accumulate(grads)?;
    opt.step(set)?;
    Ok(())
}

/// One reconstructor step on fixed zero-filled inputs.
fn recon_step(
    records: &[ScanRecord],
    batch: &[usize],
    inputs: &[Tensor<f64>],
    recon: &mut UNetLite,
    opt: &mut Adam<f64>,
) -> Result<f64> {
    let net = &*recon;
    let (terms, grads) = batch_gradients(&[(&net.params, true)], batch, |k, g, vars| {
        let i = batch.iter().position(|&b| b == k).expect("in batch");
        let x = g.constant(inputs[i].clone());
        let out = net.forward(g, &vars[0], x)?;
        let loss = nrmse_loss(g, out, &records[k].x_gt)?;
        let v = g.value(loss).item();
        Ok(Sample {
            loss,
            terms: vec![v],
        })
    })?;
    apply_step(&mut recon.params, &grads[0], opt)?;
    Ok(terms[0])
}

/// One sampler step on `bce + lambda_reg * nrmse(recon(zero_filled(mask)))`
/// with the reconstructor held constant. Returns `[bce, recon, total]`
/// (`recon` is 0 when the term is off).
fn sampler_step(
    records: &[ScanRecord],
    ops: &[Arc<MaskedAdjointOp>],
    batch: &[usize],
    sampler: &mut SamplerNet,
    recon: Option<&UNetLite>,
    geom: Geometry,
    lambda_reg: f64,
    opt: &mut RmsProp<f64>,
) -> Result<[f64; 3]> {
    let net = &*sampler;
    let with_recon = lambda_reg > 0.0;
    let recon = match (with_recon, recon) {
        (true, Some(r)) => Some(r),
        (true, None) => return invalid("lambda_reg > 0 needs a reconstructor"),
        (false, _) => None,
    };
    let mut sets = vec![(&net.params, true)];
    if let Some(r) = recon {
        sets.push((&r.params, false));
    }
    let (terms, grads) = batch_gradients(&sets, batch, |k, g, vars| {
        let rec = &records[k];
        let a = net.logits_var(g, &vars[0], &rec.z)?;
        let m_ref = rec.m_ref.as_ref().expect("labels checked");
        let bce = bce_mask_loss(g, a, m_ref)?;
        let bv = g.value(bce).item();
        match recon {
            None => Ok(Sample {
                loss: bce,
                terms: vec![bv, 0.0, bv],
            }),
            Some(r) => {
                let m = mask_var(g, a, geom.budget, geom.band)?;
                let zf = g.linear(m, ops[k].clone())?;
                let out = r.forward(g, &vars[1], zf)?;
                let rl = nrmse_loss(g, out, &rec.x_gt)?;
                let rv = g.value(rl).item();
                let w = g.scale(rl, lambda_reg);
                let total = g.add(bce, w)?;
                let tv = g.value(total).item();
                Ok(Sample {
                    loss: total,
                    terms: vec![bv, rv, tv],
                })
            }
        }
    })?;
    apply_step(&mut sampler.params, &grads[0], opt)?;
    Ok([terms[0], terms[1], terms[2]])
}

fn log_sampler(log: &mut LossLog, step: usize, epoch: usize, t: [f64; 3], with_recon: bool) {
    log.push(step, epoch, "sampler_bce", t[0]);
    if with_recon {
        log.push(step, epoch, "sampler_recon", t[1]);
    }
    log.push(step, epoch, "sampler_total", t[2]);
}

/// Alternating minimization: per epoch, reconstructor steps on masks from
/// the current sampler, then sampler steps with the reconstructor frozen.
pub fn train_alternating(
    records: &[ScanRecord],
    sampler: &mut SamplerNet,
    recon: &mut UNetLite,
    geom: Geometry,
    cfg: &TrainConfig,
) -> Result<LossLog> {
    train_alternating_observed(records, sampler, recon, geom, cfg, &mut |_, _, _| {})
}

/// Which network an alternating step updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Recon,
    Sampler,
}

/// [`train_alternating`] with a callback after every step.
pub fn train_alternating_observed(
    records: &[ScanRecord],
    sampler: &mut SamplerNet,
    recon: &mut UNetLite,
    geom: Geometry,
    cfg: &TrainConfig,
    observe: &mut dyn FnMut(Phase, &SamplerNet, &UNetLite),
) -> Result<LossLog> {
    cfg.validate()?;
    require_labels(records)?;
    let ops = adjoint_ops(records)?;
    let mut batches = BatchSampler::new(records.len(), cfg.batch_size, cfg.seed)?;
    let mut adam = Adam::new(&recon.params, AdamConfig::with_lr(cfg.lr_recon));
    let mut rms = RmsProp::new(&sampler.params, RmsPropConfig::with_lr(cfg.lr_sampler));
    let mut log = LossLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for _ in 0..cfg.recon_steps_per_epoch {
            let batch = batches.next_batch();
            let inputs: Vec<Tensor<f64>> = batch
                .par_iter()
                .map(|&k| {
                    let m = sampler.predict_mask(&records[k].z, geom.budget, geom.band)?;
                    Ok(planar(
                        &records[k],
                        scanmask_autodiff::LinearOp::apply(&*ops[k], &m.as_f64()),
                    ))
                })
                .collect::<Result<_>>()?;
            let v = recon_step(records, &batch, &inputs, recon, &mut adam)?;
            log.push(step, epoch, "recon_nrmse", v);
            observe(Phase::Recon, sampler, recon);
            step += 1;
        }
        for _ in 0..cfg.sampler_steps_per_epoch {
            let batch = batches.next_batch();
            let t = sampler_step(
                records,
                &ops,
                &batch,
                sampler,
                Some(recon),
                geom,
                cfg.lambda_reg,
                &mut rms,
            )?;
            log_sampler(&mut log, step, epoch, t, cfg.lambda_reg > 0.0);
            observe(Phase::Sampler, sampler, recon);
            step += 1;
        }
    }
    Ok(log)
}

/// Sampler-only training against a frozen reconstructor (`None` is allowed
/// when `lambda_reg == 0`, i.e. purely supervised training).
pub fn train_sampler_fixed_recon(
    records: &[ScanRecord],
    sampler: &mut SamplerNet,
    recon: Option<&UNetLite>,
    geom: Geometry,
    cfg: &TrainConfig,
) -> Result<LossLog> {
    cfg.validate()?;
    require_labels(records)?;
    let ops = if cfg.lambda_reg > 0.0 {
        adjoint_ops(records)?
    } else {
        Vec::new()
    };
    let mut batches = BatchSampler::new(records.len(), cfg.batch_size, cfg.seed)?;
    let mut rms = RmsProp::new(&sampler.params, RmsPropConfig::with_lr(cfg.lr_sampler));
    let mut log = LossLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for _ in 0..cfg.sampler_steps_per_epoch {
            let batch = batches.next_batch();
            let t = sampler_step(
                records,
                &ops,
                &batch,
                sampler,
                recon,
                geom,
                cfg.lambda_reg,
                &mut rms,
            )?;
            log_sampler(&mut log, step, epoch, t, cfg.lambda_reg > 0.0);
            step += 1;
        }
    }
    Ok(log)
}

/// Reconstructor training on a fixed mask per record.
pub fn pretrain_recon_on_masks(
    records: &[ScanRecord],
    recon: &mut UNetLite,
    source: &MaskSource,
    geom: Geometry,
    cfg: &TrainConfig,
) -> Result<LossLog> {
    cfg.validate()?;
    if records.is_empty() {
        return invalid("training needs at least one record");
    }
    let masks = resolve_masks(records, source, geom)?;
    let inputs: Vec<Tensor<f64>> = records
        .par_iter()
        .zip(&masks)
        .map(|(r, m)| Ok(r_zero_filled(r, m)?))
        .collect::<Result<_>>()?;
    let mut batches = BatchSampler::new(records.len(), cfg.batch_size, cfg.seed)?;
    let mut adam = Adam::new(&recon.params, AdamConfig::with_lr(cfg.lr_recon));
    let mut log = LossLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for _ in 0..cfg.recon_steps_per_epoch {
            let batch = batches.next_batch();
            let bi: Vec<Tensor<f64>> = batch.iter().map(|&k| inputs[k].clone()).collect();
            let v = recon_step(records, &batch, &bi, recon, &mut adam)?;
            log.push(step, epoch, "recon_nrmse", v);
            step += 1;
        }
    }
    Ok(log)
}

fn r_zero_filled(r: &ScanRecord, m: &SamplingMask) -> Result<Tensor<f64>> {
    Ok(crate::recon::zero_filled(&r.y_full, &r.maps, m)?.to_tensor())
}

/// MoDL denoiser training on a fixed mask per record.
pub fn train_modl(
    records: &[ScanRecord],
    modl: &mut MoDL,
    masks: &[SamplingMask],
    cfg: &TrainConfig,
) -> Result<LossLog> {
    cfg.validate()?;
    modl.cfg.validate()?;
    if records.is_empty() || masks.len() != records.len() {
        return invalid("MoDL training needs one mask per record");
    }
    let lambda = modl.cfg.lambda_dc;
    let dcs: Vec<DcProblem> = records
        .par_iter()
        .zip(masks)
        .map(|(r, m)| DcProblem::new(&r.y_full, &r.maps, m, lambda))
        .collect::<Result<_>>()?;
    let mut batches = BatchSampler::new(records.len(), cfg.batch_size, cfg.seed)?;
    let mut adam = Adam::new(&modl.denoiser.params, AdamConfig::with_lr(cfg.lr_recon));
    let mut log = LossLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for _ in 0..cfg.recon_steps_per_epoch {
            let batch = batches.next_batch();
            let net = &*modl;
            let (terms, grads) =
                batch_gradients(&[(&net.denoiser.params, true)], &batch, |k, g, vars| {
                    let out = net.forward(g, &vars[0], &dcs[k])?;
                    let loss = nrmse_loss(g, out, &records[k].x_gt)?;
                    let v = g.value(loss).item();
                    Ok(Sample {
                        loss,
                        terms: vec![v],
                    })
                })?;
            apply_step(&mut modl.denoiser.params, &grads[0], &mut adam)?;
            log.push(step, epoch, "modl_nrmse", terms[0]);
            step += 1;
        }
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostTrainOutcome {
    pub losses: LossLog,
    pub masks: Vec<SamplingMask>,
    /// Sampler forward passes spent on mask prediction (once per record).
    pub sampler_forward_passes: usize,
}

/// MoDL post-training on masks predicted once by a trained sampler.
pub fn post_train_modl(
    records: &[ScanRecord],
    modl: &mut MoDL,
    sampler: &SamplerNet,
    geom: Geometry,
    cfg: &TrainConfig,
) -> Result<PostTrainOutcome> {
    let masks = resolve_masks(records, &MaskSource::Sampler(sampler), geom)?;
    let losses = train_modl(records, modl, &masks, cfg)?;
    Ok(PostTrainOutcome {
        losses,
        sampler_forward_passes: records.len(),
        masks,
    })
}

/// Joint training of a scan-independent mask and a reconstructor through
/// the reconstruction loss alone.
pub fn train_population(
    records: &[ScanRecord],
    pop: &mut PopulationMask,
    recon: &mut UNetLite,
    geom: Geometry,
    cfg: &TrainConfig,
) -> Result<LossLog> {
    cfg.validate()?;
    if records.is_empty() {
        return invalid("training needs at least one record");
    }
    let ops = adjoint_ops(records)?;
    let mut batches = BatchSampler::new(records.len(), cfg.batch_size, cfg.seed)?;
    let mut adam_pop = Adam::new(&pop.params, AdamConfig::with_lr(cfg.lr_population));
    let mut adam = Adam::new(&recon.params, AdamConfig::with_lr(cfg.lr_recon));
    let mut log = LossLog::default();
    let mut step = 0;
    let steps = cfg.recon_steps_per_epoch + cfg.sampler_steps_per_epoch;
    for epoch in 0..cfg.epochs {
        for _ in 0..steps {
            let batch = batches.next_batch();
            let (p, net) = (&*pop, &*recon);
            let (terms, grads) = batch_gradients(
                &[(&p.params, true), (&net.params, true)],
                &batch,
                |k, g, vars| {
                    let m = p.mask_var(g, &vars[0], geom.budget, geom.band)?;
                    let zf = g.linear(m, ops[k].clone())?;
                    let out = net.forward(g, &vars[1], zf)?;
                    let loss = nrmse_loss(g, out, &records[k].x_gt)?;
                    let v = g.value(loss).item();
                    Ok(Sample {
                        loss,
                        terms: vec![v],
                    })
                },
            )?;
            let centered = center_movable(&grads[0][0], geom.band);
            apply_step(&mut pop.params, &[centered], &mut adam_pop)?;
            apply_step(&mut recon.params, &grads[1], &mut adam)?;
            log.push(step, epoch, "population_nrmse", terms[0]);
            step += 1;
        }
    }
    Ok(log)
}

/// Removes the mean over non-forced lines and zeroes forced ones. A common
/// shift of all logits leaves the top-k mask unchanged, and when every line
/// helps (all gradients negative) per-coordinate optimizers would otherwise
/// raise every logit at the same rate and never reorder them.
fn center_movable(grad: &[f64], band: usize) -> Vec<f64> {
    let forced = band_range(grad.len(), band);
    let movable = grad.len() - forced.len();
    let mean = if movable == 0 {
        0.0
    } else {
        grad.iter()
            .enumerate()
            .filter(|(j, _)| !forced.contains(j))
            .map(|(_, g)| g)
            .sum::<f64>()
            / movable as f64
    };
    grad.iter()
        .enumerate()
        .map(|(j, g)| if forced.contains(&j) { 0.0 } else { g - mean })
        .collect()
}

/// Mean BCE of the sampler's logits against each record's label.
pub fn mean_bce(sampler: &SamplerNet, records: &[ScanRecord]) -> Result<f64> {
    require_labels(records)?;
    let v: Vec<f64> = records
        .par_iter()
        .map(|r| {
            bce_mask_value(
                &sampler.predict_logits(&r.z)?,
                r.m_ref.as_ref().expect("checked"),
            )
        })
        .collect::<Result<_>>()?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}
