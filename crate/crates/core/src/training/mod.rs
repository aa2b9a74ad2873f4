//! Training procedures (alternating, fixed reconstructor, reconstructor
//! pretraining, MoDL post-training, population mask) and evaluation.

mod eval;
mod procedures;

pub use eval::{
    evaluate, metrics_csv, parse_metrics_csv, quartiles, read_metrics_csv, write_metrics_csv,
    write_quartiles_csv, write_summary_csv, EvalContext, EvalReport, MaskMethod, Method,
    ModelStore, ModelsMeta, ReconMethod, RecordMetrics, METRICS_HEADER,
};
pub use procedures::{
    mean_bce, post_train_modl, pretrain_recon_on_masks, random_mask_seed, resolve_masks,
    train_alternating, train_alternating_observed, train_modl, train_population,
    train_sampler_fixed_recon, MaskSource, Phase, PostTrainOutcome,
};

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use scanmask_autodiff::{Graph, ParamSet, Var};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            _ => invalid(format!("unknown precision `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub recon_steps_per_epoch: usize,
    pub sampler_steps_per_epoch: usize,
    /// RMSprop learning rate for the sampler.
    pub lr_sampler: f64,
    /// Adam learning rate for reconstructors.
    pub lr_recon: f64,
    /// Adam learning rate for population mask logits.
    pub lr_population: f64,
    pub population_temperature: f64,
    /// Weight of the reconstruction term in the sampler loss.
    pub lambda_reg: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            recon_steps_per_epoch: 20,
            sampler_steps_per_epoch: 40,
            lr_sampler: 1e-4,
            lr_recon: 1e-3,
            lr_population: 1e-2,
            population_temperature: 1.0,
            lambda_reg: 1.0,
            batch_size: 4,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0
            || self.recon_steps_per_epoch == 0
            || self.sampler_steps_per_epoch == 0
            || self.batch_size == 0
        {
            return invalid("epochs, step counts and batch size must be >= 1");
        }
        for (name, v) in [
            ("lr_sampler", self.lr_sampler),
            ("lr_recon", self.lr_recon),
            ("lr_population", self.lr_population),
            ("population_temperature", self.population_temperature),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return invalid(format!("{name} must be > 0, got {v}"));
            }
        }
        if !(self.lambda_reg >= 0.0) || !self.lambda_reg.is_finite() {
            return invalid(format!("lambda_reg must be >= 0, got {}", self.lambda_reg));
        }
        if self.precision != Precision::F64 {
            return invalid("training runs in f64 only");
        }
        Ok(())
    }
}

/// Mask budget and forced band shared by every mask in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub budget: usize,
    pub band: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub epoch: usize,
    pub term: String,
    pub value: f64,
}

/// Loss curves, one row per (step, term).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<LossRow>,
}

impl LossLog {
    pub fn push(&mut self, step: usize, epoch: usize, term: &str, value: f64) {
        self.rows.push(LossRow {
            step,
            epoch,
            term: term.to_string(),
            value,
        });
    }

    pub fn values(&self, term: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.term == term)
            .map(|r| r.value)
            .collect()
    }

    pub fn step_count(&self) -> usize {
        let mut steps: Vec<usize> = self.rows.iter().map(|r| r.step).collect();
        steps.dedup();
        steps.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epoch,term,value\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{:e}", r.step, r.epoch, r.term, r.value);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Draws batches without replacement, reshuffling whenever a full batch
/// no longer fits in the current permutation.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    batch: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch == 0 {
            return invalid("batch sampler needs records and a positive batch size");
        }
        let mut s = Self {
            n,
            batch: batch.min(n),
            order: (0..n).collect(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.n {
            self.order.sort_unstable();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let b = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        b
    }
}

/// Per-record loss and logged terms, recorded on a fresh graph.
pub(crate) struct Sample {
    pub loss: Var,
    pub terms: Vec<f64>,
}

/// Runs `f` for every record of the batch on its own graph (in parallel),
/// and returns the batch-mean terms and the batch-mean gradient of every
/// trainable set. The reduction runs in batch order, so results do not
/// depend on the thread count.
pub(crate) fn batch_gradients<F>(
    sets: &[(&ParamSet<f64>, bool)],
    batch: &[usize],
    f: F,
) -> Result<(Vec<f64>, Vec<Vec<Vec<f64>>>)>
where
    F: Fn(usize, &mut Graph<f64>, &[Vec<Var>]) -> Result<Sample> + Sync,
{
    let per: Vec<(Vec<f64>, Vec<Vec<Vec<f64>>>)> = batch
        .par_iter()
        .map(|&i| {
            let mut g = Graph::new();
            let vars: Vec<Vec<Var>> = sets.iter().map(|(p, t)| p.bind(&mut g, *t)).collect();
            let s = f(i, &mut g, &vars)?;
            let lv = g.value(s.loss).item();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {lv}")));
            }
            let grads = g.backward(s.loss)?;
            let per_set = sets
                .iter()
                .zip(&vars)
                .map(|((p, _), v)| p.collect_grads(&grads, v))
                .collect();
            Ok((s.terms, per_set))
        })
        .collect::<Result<_>>()?;
    let inv = 1.0 / batch.len() as f64;
    let mut terms = vec![0.0; per[0].0.len()];
    let mut grads: Vec<Vec<Vec<f64>>> = per[0]
        .1
        .iter()
        .map(|set| set.iter().map(|g| vec![0.0; g.len()]).collect())
        .collect();
    for (t, gs) in &per {
        for (a, b) in terms.iter_mut().zip(t) {
            *a += b;
        }
        for (acc_set, set) in grads.iter_mut().zip(gs) {
            for (acc, g) in acc_set.iter_mut().zip(set) {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
    terms.iter_mut().for_each(|t| *t *= inv);
    grads.iter_mut().flatten().flatten().for_each(|g| *g *= inv);
    Ok((terms, grads))
}
