//! `scanmask`: data generation, label search, training, evaluation and
//! figure export for scan-adaptive line selection.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use scanmask::pipeline::{
    self, export_figures, gen_data, gen_masks, parse_methods, run_benchmark, run_eval, train_mode,
    PretrainMasks, RunSettings, TrainMode,
};
use scanmask::training::{MaskMethod, ReconMethod};
use scanmask::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "scanmask",
    version,
    about = "Scan-adaptive k-space line selection"
)]
struct Cli {
    /// Worker threads (falls back to KSF_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone)]
struct CfgArg {
    /// Flat key=value settings file; flags take precedence.
    #[arg(long)]
    cfg: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a train/test dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        #[arg(long)]
        h: Option<usize>,
        #[arg(long)]
        w: Option<usize>,
        #[arg(long)]
        coils: Option<usize>,
        #[arg(long, allow_negative_numbers = true)]
        accel: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        noise: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: CfgArg,
    },
    /// Search per-record masks for the training split and write labels.csv.
    GenMasks {
        #[arg(long)]
        data: PathBuf,
        /// icd, greedy, random or exhaustive.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        passes: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: CfgArg,
    },
    /// Train one model family.
    Train {
        /// alternating, fixed-recon, pretrain-recon, post-modl or population.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// pretrain-recon: icd or random.
        #[arg(long, default_value = "icd")]
        masks: String,
        /// pretrain-recon: unet or modl.
        #[arg(long, default_value = "unet")]
        recon: String,
        /// post-modl: alternating or fixed.
        #[arg(long, default_value = "alternating")]
        sampler: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        cfg: CfgArg,
    },
    /// Evaluate methods on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        models: PathBuf,
        /// Comma-separated ids: identity or <mask>+<recon>.
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: CfgArg,
    },
    /// NRMSE box summary and mask rasters from an evaluation.
    ExportFigures {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Every stage end to end under one directory.
    Run {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: CfgArg,
    },
}

fn settings(cfg: &CfgArg) -> Result<RunSettings> {
    let mut s = RunSettings::default();
    if let Some(p) = &cfg.cfg {
        s.apply_config_text(&std::fs::read_to_string(p)?)?;
    }
    Ok(s)
}

fn flag_error(flag: &str, e: Error) -> Error {
    match e {
        Error::Validation(m) => Error::Validation(format!("--{flag}: {m}")),
        e => e,
    }
}

/// Applies a flag override through the config key of the same meaning.
fn set_flag<T: ToString>(s: &mut RunSettings, flag: &str, key: &str, v: Option<T>) -> Result<()> {
    match v {
        Some(v) => s.set(key, &v.to_string()).map_err(|e| flag_error(flag, e)),
        None => Ok(()),
    }
}

fn check_gen_flags(s: &RunSettings) -> Result<()> {
    let d = &s.data;
    let checks: [(&str, bool); 6] = [
        ("accel", d.accel >= 1.0 && d.accel.is_finite()),
        ("h", d.h > 0),
        ("w", d.w > 0),
        ("coils", d.coils > 0),
        ("noise", d.noise_sigma >= 0.0 && d.noise_sigma.is_finite()),
        ("train", s.n_train > 0),
    ];
    for (flag, ok) in checks {
        if !ok {
            return Err(Error::Validation(format!("--{flag} is out of range")));
        }
    }
    if s.n_test == 0 {
        return Err(Error::Validation("--test is out of range".into()));
    }
    Ok(())
}

fn write_run_json(
    dir: &Path,
    command: &str,
    s: &RunSettings,
    threads: usize,
    started: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let record = serde_json::json!({
        "command": command,
        "args": std::env::args().skip(1).collect::<Vec<_>>(),
        "seed": s.seed,
        "threads": threads,
        "version": env!("CARGO_PKG_VERSION"),
        "started_unix": started,
        "finished_unix": now(),
    });
    std::fs::write(
        dir.join("run.json"),
        serde_json::to_string_pretty(&record)? + "\n",
    )?;
    Ok(())
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn parse_mode(mode: &str, masks: &str, recon: &str, sampler: &str) -> Result<TrainMode> {
    Ok(match mode {
        "alternating" => TrainMode::Alternating,
        "fixed-recon" => TrainMode::FixedRecon,
        "population" => TrainMode::Population,
        "pretrain-recon" => {
            let recon: ReconMethod = recon.parse()?;
            if recon == ReconMethod::ZeroFilled {
                return Err(Error::Validation("--recon must be unet or modl".into()));
            }
            TrainMode::PretrainRecon {
                masks: masks.parse::<PretrainMasks>()?,
                recon,
            }
        }
        "post-modl" => {
            let sampler: MaskMethod = sampler.parse()?;
            if !matches!(sampler, MaskMethod::Alternating | MaskMethod::Fixed) {
                return Err(Error::Validation("--sampler must be alternating or fixed".into()));
            }
            TrainMode::PostModl { sampler }
        }
        _ => {
            return Err(Error::Validation(format!(
                "--mode: unknown mode `{mode}` (alternating, fixed-recon, pretrain-recon, post-modl, population)"
            )))
        }
    })
}

fn run(cli: Cli, threads: usize) -> Result<()> {
    let started = now();
    match cli.cmd {
        Command::GenData {
            out,
            train,
            test,
            h,
            w,
            coils,
            accel,
            noise,
            seed,
            cfg,
        } => {
            let mut s = settings(&cfg)?;
            set_flag(&mut s, "train", "train", train)?;
            set_flag(&mut s, "test", "test", test)?;
            set_flag(&mut s, "h", "h", h)?;
            set_flag(&mut s, "w", "w", w)?;
            set_flag(&mut s, "coils", "coils", coils)?;
            set_flag(&mut s, "accel", "accel", accel)?;
            set_flag(&mut s, "noise", "noise", noise)?;
            set_flag(&mut s, "seed", "seed", seed)?;
            check_gen_flags(&s)?;
            let m = gen_data(&out, &s)?;
            println!(
                "records: {} train, {} test; grid {}x{}, {} coils; budget {} lines, band {}, observation width {}; seed {}",
                m.train.len(),
                m.test.len(),
                m.h,
                m.w,
                m.coils,
                m.budget,
                m.low_freq_width,
                m.lowfreq_obs_width,
                m.seed
            );
            write_run_json(&out, "gen-data", &s, threads, started)
        }
        Command::GenMasks {
            data,
            method,
            passes,
            stride,
            seed,
            cfg,
        } => {
            let mut s = settings(&cfg)?;
            set_flag(&mut s, "method", "label_method", method)?;
            set_flag(&mut s, "passes", "icd_passes", passes)?;
            set_flag(&mut s, "stride", "icd_stride", stride)?;
            set_flag(&mut s, "seed", "seed", seed)?;
            let summary = gen_masks(&data, &s, true)?;
            let n = summary.rows.len().max(1) as f64;
            let init: f64 = summary.rows.iter().map(|r| r.initial).sum::<f64>() / n;
            let fin: f64 = summary.rows.iter().map(|r| r.final_value).sum::<f64>() / n;
            println!(
                "labeled {} records; mean objective {init:.6} -> {fin:.6}",
                summary.rows.len()
            );
            write_run_json(&data, "gen-masks", &s, threads, started)
        }
        Command::Train {
            mode,
            data,
            out,
            masks,
            recon,
            sampler,
            seed,
            epochs,
            cfg,
        } => {
            let mut s = settings(&cfg)?;
            set_flag(&mut s, "seed", "seed", seed)?;
            if let Some(e) = epochs {
                for key in ["epochs", "pretrain_epochs", "modl_epochs"] {
                    s.set(key, &e.to_string())
                        .map_err(|e| flag_error("epochs", e))?;
                }
            }
            let mode = parse_mode(&mode, &masks, &recon, &sampler)?;
            let log = train_mode(mode, &data, &out, &s)?;
            let last = log
                .rows
                .last()
                .map(|r| format!("{} {:.6}", r.term, r.value));
            println!(
                "{}: {} steps; last {}",
                mode.id(),
                log.step_count(),
                last.unwrap_or_default()
            );
            write_run_json(&out, "train", &s, threads, started)
        }
        Command::Eval {
            data,
            models,
            methods,
            out,
            seed,
            cfg,
        } => {
            let mut s = settings(&cfg)?;
            set_flag(&mut s, "seed", "seed", seed)?;
            let methods = match methods {
                Some(m) => parse_methods(&m).map_err(|e| flag_error("methods", e))?,
                None => s.methods.clone(),
            };
            let reports = run_eval(&data, &models, &methods, &out, &s)?;
            println!(
                "{:<24} {:>10} {:>10} {:>8}",
                "method", "nrmse", "psnr", "ssim"
            );
            for r in &reports {
                println!(
                    "{:<24} {:>10.5} {:>10.3} {:>8.4}",
                    r.label(),
                    r.mean_nrmse,
                    r.mean_psnr,
                    r.mean_ssim
                );
            }
            write_run_json(&out, "eval", &s, threads, started)
        }
        Command::ExportFigures { metrics, out } => {
            let f = export_figures(&metrics, &out)?;
            println!(
                "{} methods summarized; {} mask rasters",
                f.methods, f.mask_rasters
            );
            write_run_json(
                &out,
                "export-figures",
                &RunSettings::default(),
                threads,
                started,
            )
        }
        Command::Run { out, seed, cfg } => {
            let mut s = settings(&cfg)?;
            set_flag(&mut s, "seed", "seed", seed)?;
            let o = run_benchmark(&s, &out)?;
            for r in &o.reports {
                println!("{:<24} nrmse {:.5}", r.label(), r.mean_nrmse);
            }
            println!(
                "metrics: {}",
                out.join("eval").join(pipeline::METRICS_FILE).display()
            );
            write_run_json(&out, "run", &s, threads, started)
        }
    }
}

fn thread_count(flag: Option<usize>) -> std::result::Result<usize, String> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("KSF_THREADS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| format!("KSF_THREADS must be a positive integer, got `{v}`"))?,
            Err(_) => 0,
        },
    };
    Ok(n)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match thread_count(cli.threads) {
        Ok(n) => n,
        Err(m) => {
            eprintln!("error: {m}");
            return ExitCode::from(2);
        }
    };
    if threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let effective = rayon::current_num_threads();
    match run(cli, effective) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
