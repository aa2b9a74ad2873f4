use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::procedures::{resolve_masks, MaskSource};
use super::Geometry;
use crate::cimage::CImage;
use crate::error::{invalid, Error, Result};
use crate::export::{error_map, write_pgm};
use crate::icd::{icd_optimize_mask, label_seed, IcdConfig};
use crate::mask::SamplingMask;
use crate::metrics;
use crate::recon::{zero_filled, MoDL, MoDLConfig, UNetConfig, UNetLite};
use crate::sampler::{
    suno_select_mask, LabeledObservation, PopulationMask, SamplerConfig, SamplerNet,
};
use crate::synth::ScanRecord;

/// Where a test record's mask comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskMethod {
    Random,
    Population,
    /// Sampler trained jointly with its reconstructor.
    Alternating,
    /// Sampler trained against a frozen reconstructor.
    Fixed,
    /// Label of the nearest training observation.
    Suno,
    /// Per-record search with access to the ground truth (an upper
    /// reference, not a deployable method).
    Icd,
}

impl MaskMethod {
    pub const ALL: [MaskMethod; 6] = [
        Self::Random,
        Self::Population,
        Self::Alternating,
        Self::Fixed,
        Self::Suno,
        Self::Icd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Population => "population",
            Self::Alternating => "alternating",
            Self::Fixed => "fixed",
            Self::Suno => "suno",
            Self::Icd => "icd",
        }
    }

    /// Checkpoint directory holding the reconstructors paired with this
    /// mask family. Nearest-neighbor and oracle masks reuse the networks
    /// trained on search labels.
    pub fn recon_dir(self) -> &'static str {
        match self {
            Self::Suno | Self::Icd => "icd",
            m => m.as_str(),
        }
    }
}

impl FromStr for MaskMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown mask source `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReconMethod {
    ZeroFilled,
    Unet,
    Modl,
}

impl ReconMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ZeroFilled => "zf",
            Self::Unet => "unet",
            Self::Modl => "modl",
        }
    }
}

impl FromStr for ReconMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zf" => Ok(Self::ZeroFilled),
            "unet" => Ok(Self::Unet),
            "modl" => Ok(Self::Modl),
            _ => invalid(format!("unknown reconstructor `{s}`")),
        }
    }
}

/// An evaluated method: `identity` (ground truth passed through) or a
/// `<mask>+<recon>` pair such as `alternating+modl`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Identity,
    Pair(MaskMethod, ReconMethod),
}

impl Method {
    /// Values of the `method` and `mask_source` columns.
    pub fn columns(self) -> (&'static str, &'static str) {
        match self {
            Self::Identity => ("identity", "none"),
            Self::Pair(m, r) => (r.as_str(), m.as_str()),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => f.write_str("identity"),
            Self::Pair(m, r) => write!(f, "{}+{}", m.as_str(), r.as_str()),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "identity" {
            return Ok(Self::Identity);
        }
        let Some((m, r)) = s.split_once('+') else {
            return invalid(format!(
                "unknown method id `{s}` (expected identity or <mask>+<recon>)"
            ));
        };
        let (m, r) = (m.parse(), r.parse());
        match (m, r) {
            (Ok(m), Ok(r)) => Ok(Self::Pair(m, r)),
            _ => invalid(format!("unknown method id `{s}`")),
        }
    }
}

/// Architecture settings needed to reload every checkpoint of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelsMeta {
    pub h: usize,
    pub w: usize,
    pub obs_width: usize,
    pub budget: usize,
    pub band: usize,
    pub unet_base: usize,
    pub unet_kernel: usize,
    pub modl_k: usize,
    pub modl_lambda_dc: f64,
    pub modl_cg_iters: usize,
    pub modl_cg_tol: f64,
    pub sampler_channels: Vec<usize>,
    pub sampler_kernel: usize,
    pub population_temperature: f64,
}

impl ModelsMeta {
    pub fn new(
        (h, w, obs_width): (usize, usize, usize),
        geom: Geometry,
        modl: &MoDLConfig,
        sampler: &SamplerConfig,
        population_temperature: f64,
    ) -> Self {
        Self {
            h,
            w,
            obs_width,
            budget: geom.budget,
            band: geom.band,
            unet_base: modl.unet.base,
            unet_kernel: modl.unet.kernel,
            modl_k: modl.k,
            modl_lambda_dc: modl.lambda_dc,
            modl_cg_iters: modl.cg_iters,
            modl_cg_tol: modl.cg_tol,
            sampler_channels: sampler.channels.clone(),
            sampler_kernel: sampler.kernel,
            population_temperature,
        }
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            budget: self.budget,
            band: self.band,
        }
    }

    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            base: self.unet_base,
            kernel: self.unet_kernel,
        }
    }

    pub fn modl(&self) -> MoDLConfig {
        MoDLConfig {
            k: self.modl_k,
            lambda_dc: self.modl_lambda_dc,
            cg_iters: self.modl_cg_iters,
            cg_tol: self.modl_cg_tol,
            unet: self.unet(),
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            h: self.h,
            l: self.obs_width,
            n_pe: self.w,
            channels: self.sampler_channels.clone(),
            kernel: self.sampler_kernel,
        }
    }
}

/// Checkpoint layout: `<dir>/<family>/<file>.ksf` plus `<dir>/models.json`.
#[derive(Debug, Clone)]
pub struct ModelStore {
    pub dir: PathBuf,
}

impl ModelStore {
    pub const META_FILE: &'static str = "models.json";

    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path(&self, family: &str, file: &str) -> PathBuf {
        self.dir.join(family).join(format!("{file}.ksf"))
    }

    /// Creates the family directory and returns the checkpoint path.
    pub fn path_for_write(&self, family: &str, file: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(self.dir.join(family))?;
        Ok(self.path(family, file))
    }

    pub fn save_meta(&self, meta: &ModelsMeta) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        std::fs::write(
            self.dir.join(Self::META_FILE),
            serde_json::to_string_pretty(meta)? + "\n",
        )?;
        Ok(())
    }

    pub fn load_meta(&self) -> Result<ModelsMeta> {
        let text = std::fs::read_to_string(self.dir.join(Self::META_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn existing(&self, family: &str, file: &str) -> Result<PathBuf> {
        let p = self.path(family, file);
        if !p.is_file() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("missing checkpoint {}", p.display()),
            )));
        }
        Ok(p)
    }

    pub fn load_unet(&self, meta: &ModelsMeta, family: &str) -> Result<UNetLite> {
        UNetLite::load(meta.unet(), &self.existing(family, "unet")?)
    }

    pub fn load_modl(&self, meta: &ModelsMeta, family: &str) -> Result<MoDL> {
        MoDL::load(meta.modl(), &self.existing(family, "modl")?)
    }

    pub fn load_sampler(&self, meta: &ModelsMeta, family: &str) -> Result<SamplerNet> {
        SamplerNet::load(meta.sampler(), &self.existing(family, "sampler")?)
    }

    pub fn load_population(&self, meta: &ModelsMeta) -> Result<PopulationMask> {
        PopulationMask::load(
            meta.w,
            meta.population_temperature,
            &self.existing("population", "mask")?,
        )
    }
}

/// Everything evaluation reads: test records, labeled training records
/// (nearest-neighbor masks), checkpoints and an optional output directory
/// for error maps and predicted masks.
pub struct EvalContext<'a> {
    pub test: &'a [ScanRecord],
    pub train: &'a [ScanRecord],
    pub store: &'a ModelStore,
    pub meta: ModelsMeta,
    /// Seeds the per-record random masks and oracle search starts.
    pub seed: u64,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordMetrics {
    pub record_id: String,
    pub nrmse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `method` column (reconstructor id, or `identity`).
    pub method: String,
    pub mask_source: String,
    pub rows: Vec<RecordMetrics>,
    pub mean_nrmse: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    pub fn from_rows(method: &str, mask_source: &str, rows: Vec<RecordMetrics>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&RecordMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            method: method.to_string(),
            mask_source: mask_source.to_string(),
            mean_nrmse: mean(|r| r.nrmse),
            mean_psnr: mean(|r| r.psnr),
            mean_ssim: mean(|r| r.ssim),
            rows,
        }
    }

    /// `<mask_source>+<method>`, or the bare method without a mask.
    pub fn label(&self) -> String {
        if self.mask_source == "none" {
            self.method.clone()
        } else {
            format!("{}+{}", self.mask_source, self.method)
        }
    }

    pub fn nrmse_values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.nrmse).collect()
    }
}

fn masks_for(ctx: &EvalContext, m: MaskMethod) -> Result<Vec<SamplingMask>> {
    let meta = &ctx.meta;
    let geom = meta.geometry();
    match m {
        MaskMethod::Random => resolve_masks(
            ctx.test,
            &MaskSource::UniformRandom { seed: ctx.seed },
            geom,
        ),
        MaskMethod::Population => {
            let p = ctx.store.load_population(meta)?;
            resolve_masks(ctx.test, &MaskSource::Population(&p), geom)
        }
        MaskMethod::Alternating | MaskMethod::Fixed => {
            let s = ctx.store.load_sampler(meta, m.as_str())?;
            resolve_masks(ctx.test, &MaskSource::Sampler(&s), geom)
        }
        MaskMethod::Suno => {
            let train: Vec<LabeledObservation> = ctx
                .train
                .iter()
                .filter_map(|r| {
                    r.m_ref.as_ref().map(|mask| LabeledObservation {
                        id: &r.id,
                        z: &r.z,
                        mask,
                    })
                })
                .collect();
            ctx.test
                .par_iter()
                .map(|r| suno_select_mask(&r.z, &train))
                .collect()
        }
        MaskMethod::Icd => {
            let cfg = IcdConfig::new(geom.budget, geom.band);
            ctx.test
                .par_iter()
                .enumerate()
                .map(|(i, r)| Ok(icd_optimize_mask(r, &cfg, label_seed(ctx.seed, i))?.mask))
                .collect()
        }
    }
}

enum Recon {
    Identity,
    ZeroFilled,
    Unet(UNetLite),
    Modl(MoDL),
}

impl Recon {
    fn run(&self, r: &ScanRecord, mask: Option<&SamplingMask>) -> Result<CImage> {
        let mask = || mask.ok_or_else(|| Error::Validation("reconstruction needs a mask".into()));
        match self {
            Recon::Identity => Ok(r.x_gt.clone()),
            Recon::ZeroFilled => zero_filled(&r.y_full, &r.maps, mask()?),
            Recon::Unet(net) => net.apply(&zero_filled(&r.y_full, &r.maps, mask()?)?),
            Recon::Modl(m) => m.reconstruct(&r.y_full, &r.maps, mask()?),
        }
    }
}

fn file_label(method: Method) -> String {
    method.to_string().replace('+', "_")
}

/// Scores `method` on every test record (magnitude NRMSE, PSNR, SSIM).
/// With an output directory, also writes per-record error maps and the
/// masks used.
pub fn evaluate(ctx: &EvalContext, method: Method) -> Result<EvalReport> {
    if ctx.test.is_empty() {
        return invalid("evaluation needs at least one test record");
    }
    let (recon, masks) = match method {
        Method::Identity => (Recon::Identity, None),
        Method::Pair(m, r) => {
            let recon = match r {
                ReconMethod::ZeroFilled => Recon::ZeroFilled,
                ReconMethod::Unet => Recon::Unet(ctx.store.load_unet(&ctx.meta, m.recon_dir())?),
                ReconMethod::Modl => Recon::Modl(ctx.store.load_modl(&ctx.meta, m.recon_dir())?),
            };
            (recon, Some(masks_for(ctx, m)?))
        }
    };
    let dirs = match &ctx.out {
        Some(out) => {
            let maps = out.join("error_maps").join(file_label(method));
            std::fs::create_dir_all(&maps)?;
            let mdir = match method {
                Method::Pair(m, _) => {
                    let d = out.join("masks").join(m.as_str());
                    std::fs::create_dir_all(&d)?;
                    Some(d)
                }
                Method::Identity => None,
            };
            Some((maps, mdir))
        }
        None => None,
    };
    let rows: Vec<RecordMetrics> = ctx
        .test
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let mask = masks.as_ref().map(|m| &m[i]);
            let rec = recon.run(r, mask)?;
            if !rec.is_finite() {
                return Err(Error::Numeric(format!(
                    "{method} produced non-finite values on {}",
                    r.id
                )));
            }
            let (mr, mg) = (rec.magnitude(), r.x_gt.magnitude());
            if let Some((maps, mdir)) = &dirs {
                write_pgm(
                    &maps.join(format!("{}.pgm", r.id)),
                    &error_map(&mr, &mg)?,
                    mg.max(),
                )?;
                if let (Some(d), Some(m)) = (mdir, mask) {
                    m.save(&d.join(format!("{}.mask", r.id)))?;
                }
            }
            Ok(RecordMetrics {
                record_id: r.id.clone(),
                nrmse: metrics::nrmse(&mr, &mg)?,
                psnr: metrics::psnr(&mr, &mg)?,
                ssim: metrics::ssim(&mr, &mg)?,
            })
        })
        .collect::<Result<_>>()?;
    let (mcol, scol) = method.columns();
    Ok(EvalReport::from_rows(mcol, scol, rows))
}

pub const METRICS_HEADER: &str = "record_id,method,mask_source,nrmse,psnr,ssim";

pub fn metrics_csv(reports: &[EvalReport]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for rep in reports {
        for r in &rep.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.record_id, rep.method, rep.mask_source, r.nrmse, r.psnr, r.ssim
            );
        }
    }
    s
}

pub fn write_metrics_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    std::fs::write(path, metrics_csv(reports))?;
    Ok(())
}

/// Parses a metrics file back into reports, grouped by (method, mask
/// source) in order of first appearance.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<EvalReport>> {
    let text = std::fs::read_to_string(path)?;
    parse_metrics_csv(&text)
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<EvalReport>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        Some(h) => {
            return invalid(format!(
                "metrics file has header `{h}`, expected `{METRICS_HEADER}`"
            ))
        }
        None => return invalid("metrics file is empty"),
    }
    let mut groups: Vec<(String, String, Vec<RecordMetrics>)> = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 6 {
            return invalid(format!("metrics row {} has {} fields", n + 2, f.len()));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Validation(format!("metrics row {}: bad number `{s}`", n + 2)))
        };
        let row = RecordMetrics {
            record_id: f[0].to_string(),
            nrmse: num(f[3])?,
            psnr: num(f[4])?,
            ssim: num(f[5])?,
        };
        match groups.iter_mut().find(|g| g.0 == f[1] && g.1 == f[2]) {
            Some(g) => g.2.push(row),
            None => groups.push((f[1].to_string(), f[2].to_string(), vec![row])),
        }
    }
    if groups.is_empty() {
        return invalid("metrics file has no rows");
    }
    Ok(groups
        .into_iter()
        .map(|(m, s, rows)| EvalReport::from_rows(&m, &s, rows))
        .collect())
}

pub fn write_summary_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut s = String::from("method,mask_source,n,mean_nrmse,mean_psnr,mean_ssim\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.method,
            r.mask_source,
            r.rows.len(),
            r.mean_nrmse,
            r.mean_psnr,
            r.mean_ssim
        );
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// `[min, q1, median, q3, max]` with linear interpolation between order
/// statistics.
pub fn quartiles(values: &[f64]) -> Result<[f64; 5]> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return invalid("quartiles need finite values");
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let pos = q * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    };
    Ok([v[0], at(0.25), at(0.5), at(0.75), v[v.len() - 1]])
}

/// NRMSE distribution per method.
pub fn write_quartiles_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut s = String::from("method,mask_source,min,q1,median,q3,max\n");
    for r in reports {
        let q = quartiles(&r.nrmse_values())?;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.method, r.mask_source, q[0], q[1], q[2], q[3], q[4]
        );
    }
    std::fs::write(path, s)?;
    Ok(())
}
