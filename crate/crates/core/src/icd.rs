//! Offline per-scan mask search: best-improvement line exchange (iterative
//! coordinate descent), greedy forward selection and exhaustive enumeration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::cimage::CImage;
use crate::encoding::Encoder;
use crate::error::{invalid, Error, Result};
use crate::mask::{band_range, uniform_random_mask_with_band, SamplingMask};
use crate::synth::{DatasetManifest, ScanRecord};

pub const LABELS_FILE: &str = "labels.csv";
/// Largest number of completions `exhaustive_mask_search` will enumerate.
pub const EXHAUSTIVE_LIMIT: u128 = 100_000;

/// Image-to-image map applied to the zero-filled image before scoring.
pub type ImageMap = Arc<dyn Fn(&CImage) -> Result<CImage> + Send + Sync>;

#[derive(Clone, Default)]
pub enum LabelReconstructor {
    #[default]
    ZeroFilled,
    Network(ImageMap),
}

impl std::fmt::Debug for LabelReconstructor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::ZeroFilled => write!(f, "ZeroFilled"),
            Self::Network(_) => write!(f, "Network"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ObjectiveMetric {
    /// Normalized error over both channels of the complex image.
    #[default]
    Nrmse,
    /// Normalized error of magnitude images.
    MagnitudeNrmse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelMethod {
    #[default]
    Icd,
    Greedy,
    Random,
    Exhaustive,
}

impl std::str::FromStr for LabelMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "icd" => Ok(Self::Icd),
            "greedy" => Ok(Self::Greedy),
            "random" => Ok(Self::Random),
            "exhaustive" => Ok(Self::Exhaustive),
            _ => invalid(format!("unknown mask method `{s}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IcdConfig {
    pub budget: usize,
    pub low_freq_width: usize,
    pub max_passes: usize,
    pub candidate_stride: usize,
    pub metric: ObjectiveMetric,
    pub reconstructor: LabelReconstructor,
    pub method: LabelMethod,
}

impl IcdConfig {
    pub fn new(budget: usize, low_freq_width: usize) -> Self {
        Self {
            budget,
            low_freq_width,
            max_passes: 10,
            candidate_stride: 1,
            metric: ObjectiveMetric::Nrmse,
            reconstructor: LabelReconstructor::ZeroFilled,
            method: LabelMethod::Icd,
        }
    }

    pub fn validate(&self, n_pe: usize) -> Result<()> {
        if self.budget > n_pe {
            return invalid(format!("budget {} exceeds {n_pe} lines", self.budget));
        }
        if self.low_freq_width > self.budget {
            return invalid(format!(
                "low-frequency band {} exceeds budget {}",
                self.low_freq_width, self.budget
            ));
        }
        if self.max_passes == 0 {
            return invalid("max_passes must be >= 1");
        }
        if self.candidate_stride == 0 {
            return invalid("candidate_stride must be >= 1");
        }
        Ok(())
    }
}

/// Scalar score of a line selection; lower is better.
pub trait MaskObjective: Sync {
    fn n_pe(&self) -> usize;

    fn value(&self, lines: &[bool]) -> Result<f64>;

    /// Scores of `lines` with `remove` moved to each candidate. Used only
    /// for ranking; accepted moves are re-scored with [`Self::value`].
    fn swap_scores(&self, lines: &[bool], remove: usize, candidates: &[usize]) -> Result<Vec<f64>> {
        let mut l = lines.to_vec();
        l[remove] = false;
        candidates
            .iter()
            .map(|&k| {
                l[k] = true;
                let v = self.value(&l);
                l[k] = false;
                v
            })
            .collect()
    }

    /// Scores of `lines` with each candidate added.
    fn add_scores(&self, lines: &[bool], candidates: &[usize]) -> Result<Vec<f64>> {
        let mut l = lines.to_vec();
        candidates
            .iter()
            .map(|&k| {
                l[k] = true;
                let v = self.value(&l);
                l[k] = false;
                v
            })
            .collect()
    }
}

/// Per-column contributions to the zero-filled image: the zero-filled
/// reconstruction of any mask is the sum of the images of its lines.
pub struct ColumnBasis {
    cols: Vec<CImage>,
    x_gt: CImage,
}

impl ColumnBasis {
    pub fn new(record: &ScanRecord) -> Result<Self> {
        let enc = Encoder::new(&record.maps)?;
        let (h, w) = record.x_gt.dims();
        let mut cols = Vec::with_capacity(w);
        let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
        for j in 0..w {
            let mut acc = vec![Complex64::new(0.0, 0.0); h * w];
            for (s, y) in record.maps.maps().iter().zip(record.y_full.coils()) {
                buf.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
                for r in 0..h {
                    buf[r * w + j] = y.at(r, j);
                }
                enc.fft().inverse_inplace(&mut buf);
                for ((a, b), sv) in acc.iter_mut().zip(&buf).zip(s.data()) {
                    *a += sv.conj() * b;
                }
            }
            cols.push(CImage::new(h, w, acc)?);
        }
        Ok(Self {
            cols,
            x_gt: record.x_gt.clone(),
        })
    }

    pub fn zero_filled(&self, lines: &[bool]) -> CImage {
        let (h, w) = self.x_gt.dims();
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        for (j, c) in self.cols.iter().enumerate() {
            if lines[j] {
                for (o, v) in out.iter_mut().zip(c.data()) {
                    *o += v;
                }
            }
        }
        CImage::new(h, w, out).expect("dims")
    }
}

fn check_lines(lines: &[bool], n: usize) -> Result<()> {
    if lines.len() != n {
        return Err(Error::Dimension(format!(
            "{} lines for a {n}-line grid",
            lines.len()
        )));
    }
    Ok(())
}

/// Complex NRMSE of the zero-filled image, with a Gram matrix of the
/// column images so that swap and add moves are scored in O(budget).
pub struct ZeroFilledObjective {
    basis: ColumnBasis,
    gram: Vec<f64>,
    xb: Vec<f64>,
    xx: f64,
}

impl ZeroFilledObjective {
    pub fn new(record: &ScanRecord) -> Result<Self> {
        let basis = ColumnBasis::new(record)?;
        let w = basis.cols.len();
        let xx = basis.x_gt.norm_sqr();
        if xx == 0.0 {
            return invalid(format!("record {} has a zero ground truth", record.id));
        }
        let mut gram = vec![0.0; w * w];
        for j in 0..w {
            for k in j..w {
                let g = basis.cols[j].dot_re(&basis.cols[k]);
                gram[j * w + k] = g;
                gram[k * w + j] = g;
            }
        }
        let xb = basis.cols.iter().map(|c| basis.x_gt.dot_re(c)).collect();
        Ok(Self {
            basis,
            gram,
            xb,
            xx,
        })
    }

    pub fn basis(&self) -> &ColumnBasis {
        &self.basis
    }

    /// Squared residual norm and `Re <residual, column_l>` for every l.
    fn residual_terms(&self, lines: &[bool]) -> (f64, Vec<f64>) {
        let w = self.xb.len();
        let on: Vec<usize> = (0..w).filter(|&j| lines[j]).collect();
        let rb: Vec<f64> = (0..w)
            .map(|l| on.iter().map(|&j| self.gram[j * w + l]).sum::<f64>() - self.xb[l])
            .collect();
        let rr = self.xx + on.iter().map(|&j| rb[j] - self.xb[j]).sum::<f64>();
        (rr, rb)
    }

    fn score(&self, sq: f64) -> f64 {
        (sq.max(0.0) / self.xx).sqrt()
    }
}

impl MaskObjective for ZeroFilledObjective {
    fn n_pe(&self) -> usize {
        self.xb.len()
    }

    fn value(&self, lines: &[bool]) -> Result<f64> {
        check_lines(lines, self.n_pe())?;
        let zf = self.basis.zero_filled(lines);
        Ok(nrmse_complex(&zf, &self.basis.x_gt))
    }

    fn swap_scores(&self, lines: &[bool], remove: usize, candidates: &[usize]) -> Result<Vec<f64>> {
        check_lines(lines, self.n_pe())?;
        let w = self.xb.len();
        let (rr, rb) = self.residual_terms(lines);
        let gjj = self.gram[remove * w + remove];
        Ok(candidates
            .iter()
            .map(|&k| {
                let sq = rr + gjj + self.gram[k * w + k] - 2.0 * rb[remove] + 2.0 * rb[k]
                    - 2.0 * self.gram[remove * w + k];
                self.score(sq)
            })
            .collect())
    }

    fn add_scores(&self, lines: &[bool], candidates: &[usize]) -> Result<Vec<f64>> {
        check_lines(lines, self.n_pe())?;
        let w = self.xb.len();
        let (rr, rb) = self.residual_terms(lines);
        Ok(candidates
            .iter()
            .map(|&k| self.score(rr + 2.0 * rb[k] + self.gram[k * w + k]))
            .collect())
    }
}

/// Any reconstructor applied to the zero-filled image, scored by `metric`.
pub struct MappedObjective {
    basis: ColumnBasis,
    map: Option<ImageMap>,
    metric: ObjectiveMetric,
}

impl MappedObjective {
    pub fn new(
        record: &ScanRecord,
        map: Option<ImageMap>,
        metric: ObjectiveMetric,
    ) -> Result<Self> {
        if record.x_gt.norm_sqr() == 0.0 {
            return invalid(format!("record {} has a zero ground truth", record.id));
        }
        Ok(Self {
            basis: ColumnBasis::new(record)?,
            map,
            metric,
        })
    }
}

impl MaskObjective for MappedObjective {
    fn n_pe(&self) -> usize {
        self.basis.cols.len()
    }

    fn value(&self, lines: &[bool]) -> Result<f64> {
        check_lines(lines, self.n_pe())?;
        let zf = self.basis.zero_filled(lines);
        let rec = match &self.map {
            Some(f) => f(&zf)?,
            None => zf,
        };
        Ok(match self.metric {
            ObjectiveMetric::Nrmse => nrmse_complex(&rec, &self.basis.x_gt),
            ObjectiveMetric::MagnitudeNrmse => {
                let (a, b) = (rec.magnitude(), self.basis.x_gt.magnitude());
                let num: f64 = a
                    .data
                    .iter()
                    .zip(&b.data)
                    .map(|(p, q)| (p - q).powi(2))
                    .sum();
                let den: f64 = b.data.iter().map(|q| q * q).sum();
                (num / den).sqrt()
            }
        })
    }
}

fn nrmse_complex(rec: &CImage, gt: &CImage) -> f64 {
    let num: f64 = rec
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    (num / gt.norm_sqr()).sqrt()
}

/// Builds the objective described by `cfg` for one record.
pub fn objective_for(record: &ScanRecord, cfg: &IcdConfig) -> Result<Box<dyn MaskObjective>> {
    Ok(match (&cfg.reconstructor, cfg.metric) {
        (LabelReconstructor::ZeroFilled, ObjectiveMetric::Nrmse) => {
            Box::new(ZeroFilledObjective::new(record)?)
        }
        (LabelReconstructor::ZeroFilled, m) => Box::new(MappedObjective::new(record, None, m)?),
        (LabelReconstructor::Network(f), m) => {
            Box::new(MappedObjective::new(record, Some(f.clone()), m)?)
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcdResult {
    pub mask: SamplingMask,
    pub initial: f64,
    /// Objective after every accepted swap.
    pub trace: Vec<f64>,
    pub passes: usize,
}

impl IcdResult {
    pub fn final_value(&self) -> f64 {
        self.trace.last().copied().unwrap_or(self.initial)
    }

    pub fn swaps(&self) -> usize {
        self.trace.len()
    }
}

/// Exchange search from a given start: for each sampled non-forced line,
/// tries moving it to every unsampled line (every `candidate_stride`-th)
/// and applies the best move if it strictly lowers the objective.
pub fn icd_from(
    obj: &dyn MaskObjective,
    start: SamplingMask,
    max_passes: usize,
    candidate_stride: usize,
) -> Result<IcdResult> {
    if max_passes == 0 || candidate_stride == 0 {
        return invalid("max_passes and candidate_stride must be >= 1");
    }
    if start.n_pe() != obj.n_pe() {
        return Err(Error::Dimension(
            "start mask does not match the objective".into(),
        ));
    }
    let mut mask = start;
    let initial = obj.value(mask.lines())?;
    let mut cur = initial;
    let mut trace = Vec::new();
    let mut passes = 0;
    while passes < max_passes {
        passes += 1;
        let mut improved = false;
        let movable: Vec<usize> = mask
            .indices()
            .into_iter()
            .filter(|&j| !mask.is_forced(j))
            .collect();
        for j in movable {
            let cands: Vec<usize> = (0..mask.n_pe())
                .filter(|&k| !mask.is_sampled(k))
                .step_by(candidate_stride)
                .collect();
            if cands.is_empty() {
                continue;
            }
            let scores = obj.swap_scores(mask.lines(), j, &cands)?;
            let (bi, &best) = scores
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .expect("non-empty");
            if best.is_nan() || best >= cur {
                continue;
            }
            let next = mask.swapped(j, cands[bi])?;
            let v = obj.value(next.lines())?;
            if v < cur {
                mask = next;
                cur = v;
                trace.push(v);
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    Ok(IcdResult {
        mask,
        initial,
        trace,
        passes,
    })
}

/// ICD started from the uniform random mask drawn with `seed`.
pub fn icd_optimize_mask(record: &ScanRecord, cfg: &IcdConfig, seed: u64) -> Result<IcdResult> {
    let n_pe = record.x_gt.w();
    cfg.validate(n_pe)?;
    let obj = objective_for(record, cfg)?;
    let start = uniform_random_mask_with_band(n_pe, cfg.budget, cfg.low_freq_width, seed)?;
    icd_from(obj.as_ref(), start, cfg.max_passes, cfg.candidate_stride)
}

/// Forward selection from the band: adds the line with the lowest
/// resulting objective until the budget is reached (lowest index on ties).
pub fn greedy_from(
    obj: &dyn MaskObjective,
    budget: usize,
    low_freq_width: usize,
) -> Result<SamplingMask> {
    let n = obj.n_pe();
    if budget > n || low_freq_width > budget {
        return invalid(format!(
            "infeasible budget {budget} with band {low_freq_width} on {n} lines"
        ));
    }
    let mut lines = vec![false; n];
    band_range(n, low_freq_width).for_each(|j| lines[j] = true);
    for _ in low_freq_width..budget {
        let cands: Vec<usize> = (0..n).filter(|&k| !lines[k]).collect();
        let scores = obj.add_scores(&lines, &cands)?;
        let (bi, _) = scores
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("budget below n leaves candidates");
        lines[cands[bi]] = true;
    }
    SamplingMask::new(lines, low_freq_width)
}

pub fn greedy_mask(record: &ScanRecord, cfg: &IcdConfig) -> Result<SamplingMask> {
    cfg.validate(record.x_gt.w())?;
    let obj = objective_for(record, cfg)?;
    greedy_from(obj.as_ref(), cfg.budget, cfg.low_freq_width)
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
        if c > u64::MAX as u128 {
            return u128::MAX;
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExhaustiveResult {
    pub mask: SamplingMask,
    pub value: f64,
    /// Objective of every enumerated mask, in lexicographic order of the
    /// free-line index sets.
    pub values: Vec<f64>,
}

/// Global optimum by enumeration of all completions of the band. Refuses
/// when more than [`EXHAUSTIVE_LIMIT`] masks would be scored.
pub fn exhaustive_from(
    obj: &dyn MaskObjective,
    budget: usize,
    low_freq_width: usize,
) -> Result<ExhaustiveResult> {
    let n = obj.n_pe();
    if budget > n || low_freq_width > budget {
        return invalid(format!(
            "infeasible budget {budget} with band {low_freq_width} on {n} lines"
        ));
    }
    let band = band_range(n, low_freq_width);
    let free: Vec<usize> = (0..n).filter(|j| !band.contains(j)).collect();
    let k = budget - low_freq_width;
    let count = binomial(free.len(), k);
    if count > EXHAUSTIVE_LIMIT {
        return Err(Error::Refused(format!(
            "exhaustive search over {count} masks exceeds the limit of {EXHAUSTIVE_LIMIT}"
        )));
    }
    let mut base = vec![false; n];
    band.for_each(|j| base[j] = true);
    let mut idx: Vec<usize> = (0..k).collect();
    let mut values = Vec::with_capacity(count as usize);
    let mut best: Option<(f64, Vec<bool>)> = None;
    loop {
        let mut lines = base.clone();
        idx.iter().for_each(|&i| lines[free[i]] = true);
        let v = obj.value(&lines)?;
        values.push(v);
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, lines));
        }
        // next combination
        let mut i = k;
        loop {
            if i == 0 {
                let (value, lines) = best.expect("at least one mask");
                return Ok(ExhaustiveResult {
                    mask: SamplingMask::new(lines, low_freq_width)?,
                    value,
                    values,
                });
            }
            i -= 1;
            if idx[i] < free.len() - k + i {
                idx[i] += 1;
                for t in i + 1..k {
                    idx[t] = idx[t - 1] + 1;
                }
                break;
            }
        }
    }
}

pub fn exhaustive_mask_search(record: &ScanRecord, cfg: &IcdConfig) -> Result<ExhaustiveResult> {
    cfg.validate(record.x_gt.w())?;
    let obj = objective_for(record, cfg)?;
    exhaustive_from(obj.as_ref(), cfg.budget, cfg.low_freq_width)
}

/// One row of `labels.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub id: String,
    pub initial: f64,
    pub final_value: f64,
    pub passes: usize,
    pub swaps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSummary {
    pub rows: Vec<LabelRow>,
    /// Records whose mask was computed in this run (others were skipped).
    pub optimized: usize,
}

/// Seed of the starting mask for the `index`-th training record.
pub fn label_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index as u64 + 1)
}

fn label_record(rec: &ScanRecord, cfg: &IcdConfig, seed: u64) -> Result<(SamplingMask, LabelRow)> {
    let n_pe = rec.x_gt.w();
    cfg.validate(n_pe)?;
    let obj = objective_for(rec, cfg)?;
    let start = uniform_random_mask_with_band(n_pe, cfg.budget, cfg.low_freq_width, seed)?;
    let initial = obj.value(start.lines())?;
    let row = |final_value, passes, swaps| LabelRow {
        id: rec.id.clone(),
        initial,
        final_value,
        passes,
        swaps,
    };
    Ok(match cfg.method {
        LabelMethod::Random => (start, row(initial, 0, 0)),
        LabelMethod::Icd => {
            let r = icd_from(obj.as_ref(), start, cfg.max_passes, cfg.candidate_stride)?;
            let fv = r.final_value();
            (r.mask, row(fv, r.passes, r.trace.len()))
        }
        LabelMethod::Greedy => {
            let m = greedy_from(obj.as_ref(), cfg.budget, cfg.low_freq_width)?;
            let fv = obj.value(m.lines())?;
            (m, row(fv, 1, 0))
        }
        LabelMethod::Exhaustive => {
            let r = exhaustive_from(obj.as_ref(), cfg.budget, cfg.low_freq_width)?;
            (r.mask, row(r.value, 1, 0))
        }
    })
}

fn read_labels(path: &Path) -> Result<BTreeMap<String, LabelRow>> {
    let mut out = BTreeMap::new();
    if !path.is_file() {
        return Ok(out);
    }
    for line in fs::read_to_string(path)?.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::Parse(format!("bad labels.csv row `{line}`")));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad number `{s}`")))
        };
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad count `{s}`")))
        };
        out.insert(
            f[0].to_string(),
            LabelRow {
                id: f[0].to_string(),
                initial: num(f[1])?,
                final_value: num(f[2])?,
                passes: int(f[3])?,
                swaps: int(f[4])?,
            },
        );
    }
    Ok(out)
}

pub fn write_labels(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let mut s = String::from("record_id,initial_objective,final_objective,passes,swaps\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.17e},{:.17e},{},{}",
            r.id, r.initial, r.final_value, r.passes, r.swaps
        );
    }
    fs::write(path, s)?;
    Ok(())
}

/// Writes a reference mask for every training record and `labels.csv`.
/// Records that already have a mask are skipped unless `force` is set.
pub fn precompute_labels(
    dir: &Path,
    manifest: &DatasetManifest,
    cfg: &IcdConfig,
    seed: u64,
    force: bool,
) -> Result<LabelSummary> {
    cfg.validate(manifest.w)?;
    let labels_path = dir.join(LABELS_FILE);
    let previous = read_labels(&labels_path)?;
    let results: Vec<(LabelRow, bool)> = manifest
        .train
        .par_iter()
        .enumerate()
        .map(|(i, id)| {
            let mask_path = DatasetManifest::mask_path(dir, id);
            if !force && mask_path.is_file() {
                if let Some(row) = previous.get(id) {
                    return Ok((row.clone(), false));
                }
            }
            let rec = manifest.load_record(dir, id)?;
            let (mask, row) = label_record(&rec, cfg, label_seed(seed, i))?;
            mask.save(&mask_path)?;
            Ok((row, true))
        })
        .collect::<Result<_>>()?;
    let optimized = results.iter().filter(|r| r.1).count();
    let rows: Vec<LabelRow> = results.into_iter().map(|r| r.0).collect();
    write_labels(&labels_path, &rows)?;
    Ok(LabelSummary { rows, optimized })
}
