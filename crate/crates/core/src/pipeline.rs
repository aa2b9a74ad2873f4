//! Run settings and the stages of the benchmark (data, labels, training,
//! evaluation, figures), shared by the command-line tool and the tests.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::export::write_mask_pgm;
use crate::icd::{precompute_labels, IcdConfig, LabelMethod, LabelSummary};
use crate::mask::SamplingMask;
use crate::recon::{MoDL, MoDLConfig, UNetConfig, UNetLite};
use crate::sampler::{PopulationMask, SamplerConfig, SamplerNet};
use crate::synth::{build_dataset, DatasetConfig, DatasetManifest, ScanRecord, Split};
use crate::training::{
    evaluate, mean_bce, post_train_modl, pretrain_recon_on_masks, read_metrics_csv, resolve_masks,
    train_alternating, train_modl, train_population, train_sampler_fixed_recon, write_metrics_csv,
    write_quartiles_csv, write_summary_csv, EvalContext, EvalReport, Geometry, LossLog, MaskMethod,
    MaskSource, Method, ModelStore, ModelsMeta, Precision, ReconMethod, TrainConfig,
};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const QUARTILES_FILE: &str = "nrmse_quartiles.csv";
pub const BOX_FILE: &str = "nrmse_box.csv";

/// Independent seed for one stage of a run.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    stage.bytes().fold(seed ^ 0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Every tunable of a run. Built from defaults, then `key=value` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub data: DatasetConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub train: TrainConfig,
    /// Epochs of reconstructor pretraining on fixed masks.
    pub pretrain_epochs: usize,
    /// Epochs of MoDL training (on fixed or predicted masks).
    pub modl_epochs: usize,
    /// Start the jointly trained reconstructor from the one pretrained on
    /// search labels.
    pub warm_start: bool,
    pub modl: MoDLConfig,
    pub label_method: LabelMethod,
    pub icd_passes: usize,
    pub icd_stride: usize,
    pub methods: Vec<Method>,
}

pub fn default_methods() -> Vec<Method> {
    use MaskMethod::*;
    use ReconMethod::*;
    vec![
        Method::Identity,
        Method::Pair(Random, ZeroFilled),
        Method::Pair(Icd, ZeroFilled),
        Method::Pair(Random, Unet),
        Method::Pair(Population, Unet),
        Method::Pair(Suno, Unet),
        Method::Pair(Fixed, Unet),
        Method::Pair(Alternating, Unet),
        Method::Pair(Icd, Unet),
        Method::Pair(Random, Modl),
        Method::Pair(Alternating, Modl),
    ]
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            data: DatasetConfig::default(),
            n_train: 200,
            n_test: 50,
            seed: 0,
            train: TrainConfig::default(),
            pretrain_epochs: 30,
            modl_epochs: 30,
            warm_start: true,
            modl: MoDLConfig::default(),
            label_method: LabelMethod::Icd,
            icd_passes: 10,
            icd_stride: 1,
            methods: default_methods(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Validation(format!("invalid value `{v}` for `{key}`")))
}

impl RunSettings {
    pub const KEYS: &'static [&'static str] = &[
        "h",
        "w",
        "coils",
        "accel",
        "low_freq_frac",
        "noise",
        "n_ellipses",
        "obs_width",
        "train",
        "test",
        "seed",
        "epochs",
        "recon_steps_per_epoch",
        "sampler_steps_per_epoch",
        "lr_sampler",
        "lr_recon",
        "lr_population",
        "population_temperature",
        "lambda_reg",
        "batch_size",
        "precision",
        "pretrain_epochs",
        "modl_epochs",
        "warm_start",
        "unet_base",
        "unet_kernel",
        "modl_k",
        "modl_lambda",
        "cg_iters",
        "cg_tol",
        "label_method",
        "icd_passes",
        "icd_stride",
        "methods",
    ];

    /// Sets one field by its config key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key.trim();
        match k {
            "h" => self.data.h = parse(k, v)?,
            "w" => self.data.w = parse(k, v)?,
            "coils" => self.data.coils = parse(k, v)?,
            "accel" => self.data.accel = parse(k, v)?,
            "low_freq_frac" => self.data.low_freq_frac = parse(k, v)?,
            "noise" => self.data.noise_sigma = parse(k, v)?,
            "n_ellipses" => self.data.n_ellipses = parse(k, v)?,
            "obs_width" => self.data.lowfreq_obs_width = Some(parse(k, v)?),
            "train" => self.n_train = parse(k, v)?,
            "test" => self.n_test = parse(k, v)?,
            "seed" => {
                self.seed = parse(k, v)?;
                self.train.seed = self.seed;
            }
            "epochs" => self.train.epochs = parse(k, v)?,
            "recon_steps_per_epoch" => self.train.recon_steps_per_epoch = parse(k, v)?,
            "sampler_steps_per_epoch" => self.train.sampler_steps_per_epoch = parse(k, v)?,
            "lr_sampler" => self.train.lr_sampler = parse(k, v)?,
            "lr_recon" => self.train.lr_recon = parse(k, v)?,
            "lr_population" => self.train.lr_population = parse(k, v)?,
            "population_temperature" => self.train.population_temperature = parse(k, v)?,
            "lambda_reg" => self.train.lambda_reg = parse(k, v)?,
            "batch_size" => self.train.batch_size = parse(k, v)?,
            "precision" => self.train.precision = v.trim().parse::<Precision>()?,
            "pretrain_epochs" => self.pretrain_epochs = parse(k, v)?,
            "modl_epochs" => self.modl_epochs = parse(k, v)?,
            "warm_start" => self.warm_start = parse(k, v)?,
            "unet_base" => self.modl.unet.base = parse(k, v)?,
            "unet_kernel" => self.modl.unet.kernel = parse(k, v)?,
            "modl_k" => self.modl.k = parse(k, v)?,
            "modl_lambda" => self.modl.lambda_dc = parse(k, v)?,
            "cg_iters" => self.modl.cg_iters = parse(k, v)?,
            "cg_tol" => self.modl.cg_tol = parse(k, v)?,
            "label_method" => self.label_method = v.trim().parse()?,
            "icd_passes" => self.icd_passes = parse(k, v)?,
            "icd_stride" => self.icd_stride = parse(k, v)?,
            "methods" => self.methods = parse_methods(v)?,
            _ => return invalid(format!("unknown config key `{k}`")),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file. `#` starts a comment.
    pub fn apply_config_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return invalid(format!("config line {}: expected key=value", n + 1));
            };
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.modl.validate()?;
        if self.n_train == 0 || self.n_test == 0 {
            return invalid("train and test counts must be >= 1");
        }
        if self.data.h % 4 != 0 || self.data.w % 4 != 0 {
            return invalid("h and w must be divisible by 4 for the reconstructor");
        }
        if self.pretrain_epochs == 0 || self.modl_epochs == 0 {
            return invalid("pretrain_epochs and modl_epochs must be >= 1");
        }
        if self.modl.unet.base == 0 || self.modl.unet.kernel % 2 == 0 {
            return invalid("unet_base must be >= 1 and unet_kernel odd");
        }
        if self.icd_passes == 0 || self.icd_stride == 0 {
            return invalid("icd_passes and icd_stride must be >= 1");
        }
        if self.methods.is_empty() {
            return invalid("at least one evaluation method is required");
        }
        Ok(())
    }

    pub fn unet(&self) -> UNetConfig {
        self.modl.unet
    }

    fn with_epochs(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            ..self.train.clone()
        }
    }
}

pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

pub fn geometry(m: &DatasetManifest) -> Geometry {
    Geometry {
        budget: m.budget,
        band: m.low_freq_width,
    }
}

pub fn gen_data(dir: &Path, s: &RunSettings) -> Result<DatasetManifest> {
    s.data.validate()?;
    build_dataset(dir, s.n_train, s.n_test, &s.data, s.seed)
}

pub fn icd_config(m: &DatasetManifest, s: &RunSettings) -> IcdConfig {
    IcdConfig {
        max_passes: s.icd_passes,
        candidate_stride: s.icd_stride,
        method: s.label_method,
        ..IcdConfig::new(m.budget, m.low_freq_width)
    }
}

pub fn gen_masks(dir: &Path, s: &RunSettings, force: bool) -> Result<LabelSummary> {
    let m = DatasetManifest::load(dir)?;
    precompute_labels(
        dir,
        &m,
        &icd_config(&m, s),
        stage_seed(s.seed, "labels"),
        force,
    )
}

/// Which masks a reconstructor is pretrained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainMasks {
    Icd,
    Random,
}

impl FromStr for PretrainMasks {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "icd" | "icd-labels" => Ok(Self::Icd),
            "random" | "uniform-random" => Ok(Self::Random),
            _ => invalid(format!(
                "unknown mask source `{s}` (expected icd or random)"
            )),
        }
    }
}

impl PretrainMasks {
    pub fn family(self) -> &'static str {
        match self {
            Self::Icd => "icd",
            Self::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Sampler and reconstructor, alternating.
    Alternating,
    /// Sampler only, against the reconstructor pretrained on labels.
    FixedRecon,
    PretrainRecon {
        masks: PretrainMasks,
        recon: ReconMethod,
    },
    /// MoDL on masks predicted by a trained sampler.
    PostModl { sampler: MaskMethod },
    /// Scan-independent mask learned jointly with a reconstructor.
    Population,
}

impl TrainMode {
    pub fn id(self) -> String {
        match self {
            Self::Alternating => "alternating".into(),
            Self::FixedRecon => "fixed-recon".into(),
            Self::PretrainRecon { masks, recon } => {
                format!("pretrain-{}-{}", masks.family(), recon.as_str())
            }
            Self::PostModl { sampler } => format!("post-modl-{}", sampler.as_str()),
            Self::Population => "population".into(),
        }
    }

    pub fn family(self) -> &'static str {
        match self {
            Self::Alternating => "alternating",
            Self::FixedRecon => "fixed",
            Self::PretrainRecon { masks, .. } => masks.family(),
            Self::PostModl { sampler } => sampler.as_str(),
            Self::Population => "population",
        }
    }

    /// Whether the mode reads the search labels.
    pub fn needs_labels(self) -> bool {
        matches!(
            self,
            Self::Alternating
                | Self::FixedRecon
                | Self::PretrainRecon {
                    masks: PretrainMasks::Icd,
                    ..
                }
        )
    }
}

fn models_meta(m: &DatasetManifest, s: &RunSettings) -> ModelsMeta {
    let sampler = SamplerConfig::new(m.h, m.lowfreq_obs_width, m.w);
    ModelsMeta::new(
        (m.h, m.w, m.lowfreq_obs_width),
        geometry(m),
        &s.modl,
        &sampler,
        s.train.population_temperature,
    )
}

fn check_labels(records: &[ScanRecord]) -> Result<()> {
    match records.iter().find(|r| r.m_ref.is_none()) {
        Some(r) => invalid(format!("record {} has no label; run gen-masks first", r.id)),
        None => Ok(()),
    }
}

/// Trains one mode and writes its checkpoints, the shared `models.json`
/// and `<family>/losses_<mode>.csv` under `models`.
pub fn train_mode(mode: TrainMode, data: &Path, models: &Path, s: &RunSettings) -> Result<LossLog> {
    s.validate()?;
    let manifest = DatasetManifest::load(data)?;
    let records = manifest.load_split(data, Split::Train)?;
    if mode.needs_labels() {
        check_labels(&records)?;
    }
    let store = ModelStore::new(models);
    let meta = models_meta(&manifest, s);
    store.save_meta(&meta)?;
    let geom = geometry(&manifest);
    let seed = |tag: &str| stage_seed(s.seed, tag);
    let family = mode.family();
    let log = match mode {
        TrainMode::PretrainRecon { masks, recon } => {
            let source = match masks {
                PretrainMasks::Icd => MaskSource::IcdLabels,
                PretrainMasks::Random => MaskSource::UniformRandom {
                    seed: seed("random-train"),
                },
            };
            match recon {
                ReconMethod::Unet => {
                    let mut net = UNetLite::new(meta.unet(), seed("unet-init"))?;
                    let log = pretrain_recon_on_masks(
                        &records,
                        &mut net,
                        &source,
                        geom,
                        &s.with_epochs(s.pretrain_epochs),
                    )?;
                    net.save(&store.path_for_write(family, "unet")?)?;
                    log
                }
                ReconMethod::Modl => {
                    let mut modl = MoDL::new(meta.modl(), seed("modl-init"))?;
                    let m = resolve_masks(&records, &source, geom)?;
                    let log = train_modl(&records, &mut modl, &m, &s.with_epochs(s.modl_epochs))?;
                    modl.save(&store.path_for_write(family, "modl")?)?;
                    log
                }
                ReconMethod::ZeroFilled => {
                    return invalid("zero-filled reconstruction has nothing to train")
                }
            }
        }
        TrainMode::Alternating => {
            let mut sampler = SamplerNet::new(meta.sampler(), seed("sampler-init"))?;
            let mut net = if s.warm_start {
                store.load_unet(&meta, "icd")?
            } else {
                UNetLite::new(meta.unet(), seed("unet-init"))?
            };
            let log = train_alternating(&records, &mut sampler, &mut net, geom, &s.train)?;
            sampler.save(&store.path_for_write(family, "sampler")?)?;
            net.save(&store.path_for_write(family, "unet")?)?;
            log
        }
        TrainMode::FixedRecon => {
            let src = store.path("icd", "unet");
            let net = store.load_unet(&meta, "icd")?;
            let mut sampler = SamplerNet::new(meta.sampler(), seed("sampler-init"))?;
            let log =
                train_sampler_fixed_recon(&records, &mut sampler, Some(&net), geom, &s.train)?;
            sampler.save(&store.path_for_write(family, "sampler")?)?;
            std::fs::copy(&src, store.path_for_write(family, "unet")?)?;
            log
        }
        TrainMode::PostModl { sampler } => {
            if !matches!(sampler, MaskMethod::Alternating | MaskMethod::Fixed) {
                return invalid("post-modl needs an alternating or fixed sampler");
            }
            let net = store.load_sampler(&meta, sampler.as_str())?;
            let mut modl = MoDL::new(meta.modl(), seed("modl-init"))?;
            let out = post_train_modl(
                &records,
                &mut modl,
                &net,
                geom,
                &s.with_epochs(s.modl_epochs),
            )?;
            modl.save(&store.path_for_write(family, "modl")?)?;
            out.losses
        }
        TrainMode::Population => {
            let mut pop = PopulationMask::new(meta.w, meta.population_temperature)?;
            let mut net = UNetLite::new(meta.unet(), seed("unet-init"))?;
            let log = train_population(&records, &mut pop, &mut net, geom, &s.train)?;
            pop.save(&store.path_for_write(family, "mask")?)?;
            net.save(&store.path_for_write(family, "unet")?)?;
            log
        }
    };
    log.write_csv(
        &models
            .join(family)
            .join(format!("losses_{}.csv", mode.id())),
    )?;
    Ok(log)
}

/// Mean supervised BCE of a stored sampler over the labeled training set.
pub fn sampler_train_bce(data: &Path, models: &Path, family: &str) -> Result<f64> {
    let manifest = DatasetManifest::load(data)?;
    let records = manifest.load_split(data, Split::Train)?;
    let store = ModelStore::new(models);
    let meta = store.load_meta()?;
    mean_bce(&store.load_sampler(&meta, family)?, &records)
}

/// Training order that satisfies every mode's prerequisites.
pub fn all_modes() -> Vec<TrainMode> {
    vec![
        TrainMode::PretrainRecon {
            masks: PretrainMasks::Icd,
            recon: ReconMethod::Unet,
        },
        TrainMode::PretrainRecon {
            masks: PretrainMasks::Random,
            recon: ReconMethod::Unet,
        },
        TrainMode::PretrainRecon {
            masks: PretrainMasks::Random,
            recon: ReconMethod::Modl,
        },
        TrainMode::Alternating,
        TrainMode::FixedRecon,
        TrainMode::PostModl {
            sampler: MaskMethod::Alternating,
        },
        TrainMode::Population,
    ]
}

/// Modes whose checkpoints `methods` read, in a valid training order.
pub fn modes_for(methods: &[Method], warm_start: bool) -> Vec<TrainMode> {
    let icd_unet = TrainMode::PretrainRecon {
        masks: PretrainMasks::Icd,
        recon: ReconMethod::Unet,
    };
    let mut need = Vec::new();
    for &method in methods {
        let Method::Pair(mask, recon) = method else {
            continue;
        };
        match mask {
            MaskMethod::Population => need.push(TrainMode::Population),
            MaskMethod::Alternating => {
                if warm_start {
                    need.push(icd_unet);
                }
                need.push(TrainMode::Alternating);
            }
            MaskMethod::Fixed => need.extend([icd_unet, TrainMode::FixedRecon]),
            _ => {}
        }
        match (mask, recon) {
            (_, ReconMethod::ZeroFilled) => {}
            (MaskMethod::Random, r) => need.push(TrainMode::PretrainRecon {
                masks: PretrainMasks::Random,
                recon: r,
            }),
            (MaskMethod::Icd | MaskMethod::Suno, r) => need.push(TrainMode::PretrainRecon {
                masks: PretrainMasks::Icd,
                recon: r,
            }),
            (MaskMethod::Alternating | MaskMethod::Fixed, ReconMethod::Modl) => {
                need.push(TrainMode::PostModl { sampler: mask })
            }
            _ => {}
        }
    }
    let mut order = all_modes();
    order.insert(
        1,
        TrainMode::PretrainRecon {
            masks: PretrainMasks::Icd,
            recon: ReconMethod::Modl,
        },
    );
    order.push(TrainMode::PostModl {
        sampler: MaskMethod::Fixed,
    });
    order.into_iter().filter(|m| need.contains(m)).collect()
}

/// Evaluates `methods` on the test split; writes metrics, summary,
/// quartiles, error maps and masks under `out`.
pub fn run_eval(
    data: &Path,
    models: &Path,
    methods: &[Method],
    out: &Path,
    s: &RunSettings,
) -> Result<Vec<EvalReport>> {
    if methods.is_empty() {
        return invalid("no methods requested");
    }
    let manifest = DatasetManifest::load(data)?;
    let test = manifest.load_split(data, Split::Test)?;
    let needs_train = methods
        .iter()
        .any(|m| matches!(m, Method::Pair(MaskMethod::Suno, _)));
    let train = if needs_train {
        let t = manifest.load_split(data, Split::Train)?;
        check_labels(&t)?;
        t
    } else {
        Vec::new()
    };
    let store = ModelStore::new(models);
    // methods without checkpoints can run before any training
    let meta = if store.dir.join(ModelStore::META_FILE).is_file() {
        store.load_meta()?
    } else {
        models_meta(&manifest, s)
    };
    std::fs::create_dir_all(out)?;
    let ctx = EvalContext {
        test: &test,
        train: &train,
        store: &store,
        meta,
        seed: stage_seed(s.seed, "eval"),
        out: Some(out.to_path_buf()),
    };
    let reports = methods
        .iter()
        .map(|&m| evaluate(&ctx, m))
        .collect::<Result<Vec<_>>>()?;
    write_metrics_csv(&out.join(METRICS_FILE), &reports)?;
    write_summary_csv(&out.join(SUMMARY_FILE), &reports)?;
    write_quartiles_csv(&out.join(QUARTILES_FILE), &reports)?;
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FigureSummary {
    pub methods: usize,
    pub mask_rasters: usize,
}

/// NRMSE box summary from a metrics file, plus PGM rasters for every mask
/// saved next to it (`<metrics dir>/masks/<source>/<id>.mask`).
pub fn export_figures(metrics: &Path, out: &Path) -> Result<FigureSummary> {
    let reports = read_metrics_csv(metrics).map_err(|e| match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::Io(io),
        Error::Io(io) => Error::Validation(format!("unreadable metrics file: {io}")),
        e => e,
    })?;
    std::fs::create_dir_all(out)?;
    write_quartiles_csv(&out.join(BOX_FILE), &reports)?;
    let mut rasters = 0;
    let mask_root = metrics.parent().unwrap_or(Path::new(".")).join("masks");
    if mask_root.is_dir() {
        for src in sorted_entries(&mask_root)? {
            if !src.is_dir() {
                continue;
            }
            let name = src
                .file_name()
                .expect("entry")
                .to_string_lossy()
                .into_owned();
            let dst = out.join("masks").join(&name);
            std::fs::create_dir_all(&dst)?;
            for f in sorted_entries(&src)? {
                if f.extension().and_then(|e| e.to_str()) != Some("mask") {
                    continue;
                }
                let mask = SamplingMask::load(&f)?;
                let stem = f.file_stem().expect("file").to_string_lossy().into_owned();
                write_mask_pgm(&dst.join(format!("{stem}.pgm")), &mask, mask.n_pe())?;
                rasters += 1;
            }
        }
    }
    Ok(FigureSummary {
        methods: reports.len(),
        mask_rasters: rasters,
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    v.sort();
    Ok(v)
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub reports: Vec<EvalReport>,
    /// Final loss log per training mode, in training order.
    pub losses: Vec<(String, LossLog)>,
    pub figures: FigureSummary,
}

impl BenchmarkOutcome {
    pub fn mean_nrmse(&self, method: Method) -> Option<f64> {
        let (m, s) = method.columns();
        self.reports
            .iter()
            .find(|r| r.method == m && r.mask_source == s)
            .map(|r| r.mean_nrmse)
    }
}

/// Runs every stage under `out`: `data/`, `models/`, `eval/`, `figures/`.
pub fn run_benchmark(s: &RunSettings, out: &Path) -> Result<BenchmarkOutcome> {
    s.validate()?;
    let (data, models, eval, figs) = (
        out.join("data"),
        out.join("models"),
        out.join("eval"),
        out.join("figures"),
    );
    gen_data(&data, s)?;
    gen_masks(&data, s, false)?;
    let mut losses = Vec::new();
    for mode in modes_for(&s.methods, s.warm_start) {
        losses.push((mode.id(), train_mode(mode, &data, &models, s)?));
    }
    let reports = run_eval(&data, &models, &s.methods, &eval, s)?;
    let figures = export_figures(&eval.join(METRICS_FILE), &figs)?;
    Ok(BenchmarkOutcome {
        reports,
        losses,
        figures,
    })
}
