use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str =
    "h=16\nw=16\ncoils=2\nn_ellipses=4\nrecon_steps_per_epoch=3\nsampler_steps_per_epoch=4\n";

fn scanmask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scanmask"))
        .args(args)
        .env_remove("KSF_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = scanmask(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn fails(args: &[&str], code: i32) -> String {
    let o = scanmask(args);
    assert_eq!(
        o.status.code(),
        Some(code),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small labeled dataset plus its config file.
fn small_data(root: &Path, train: usize, test: usize) -> (PathBuf, PathBuf) {
    let cfg = root.join("small.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = root.join("data");
    let (tr, te) = (train.to_string(), test.to_string());
    ok(&[
        "gen-data",
        "--out",
        s(&data),
        "--train",
        &tr,
        "--test",
        &te,
        "--seed",
        "3",
        "--cfg",
        s(&cfg),
    ]);
    ok(&[
        "gen-masks",
        "--data",
        s(&data),
        "--passes",
        "2",
        "--cfg",
        s(&cfg),
    ]);
    (data, cfg)
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != "run.json")
        .map(|p| (p.file_name().unwrap().into(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn gen_data_counts_budget_and_rebuilds_identically() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    let b = root.path().join("b");
    let out = ok(&[
        "gen-data",
        "--out",
        s(&a),
        "--train",
        "40",
        "--test",
        "10",
        "--seed",
        "7",
    ]);
    assert!(out.contains("budget 16 lines"), "{out}");
    ok(&[
        "gen-data",
        "--out",
        s(&b),
        "--train",
        "40",
        "--test",
        "10",
        "--seed",
        "7",
    ]);
    let records = files(&a)
        .iter()
        .filter(|(p, _)| p.extension().is_some_and(|e| e == "ksf"))
        .count();
    assert_eq!(records, 50);
    assert_eq!(files(&a), files(&b));
    let run: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "gen-data");
    assert_eq!(run["seed"], 7);
}

#[test]
fn bad_flags_are_named() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("d");
    let err = fails(&["gen-data", "--out", s(&out), "--accel", "0"], 2);
    assert!(err.contains("--accel"), "{err}");
    let err = fails(&["gen-data", "--out", s(&out), "--noise", "-1"], 2);
    assert!(err.contains("--noise"), "{err}");
    let cfg = root.path().join("bad.cfg");
    std::fs::write(&cfg, "nonsense=1\n").unwrap();
    let err = fails(&["gen-data", "--out", s(&out), "--cfg", s(&cfg)], 2);
    assert!(err.contains("nonsense"), "{err}");
    fails(&["gen-masks", "--data", s(&root.path().join("missing"))], 3);
}

#[test]
fn gen_masks_methods() {
    let root = tempfile::tempdir().unwrap();
    let (data, cfg) = small_data(root.path(), 4, 2);
    let labels = std::fs::read_to_string(data.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 5);
    for method in ["random", "greedy"] {
        let out = ok(&[
            "gen-masks",
            "--data",
            s(&data),
            "--method",
            method,
            "--cfg",
            s(&cfg),
        ]);
        assert!(out.contains("labeled 4 records"), "{out}");
    }
    // exhaustive search refuses a 64-line grid
    let big = root.path().join("big");
    ok(&["gen-data", "--out", s(&big), "--train", "1", "--test", "1"]);
    fails(
        &["gen-masks", "--data", s(&big), "--method", "exhaustive"],
        2,
    );
    fails(
        &["gen-masks", "--data", s(&data), "--method", "annealing"],
        2,
    );
}

#[test]
fn train_eval_and_export() {
    let root = tempfile::tempdir().unwrap();
    let (data, cfg) = small_data(root.path(), 6, 3);
    let models = root.path().join("models");
    let train = |extra: &[&str]| {
        let mut args = vec![
            "train",
            "--data",
            s(&data),
            "--out",
            s(&models),
            "--epochs",
            "2",
            "--cfg",
            s(&cfg),
        ];
        args.extend_from_slice(extra);
        ok(&args)
    };
    train(&[
        "--mode",
        "pretrain-recon",
        "--masks",
        "random",
        "--recon",
        "unet",
    ]);
    train(&[
        "--mode",
        "pretrain-recon",
        "--masks",
        "random",
        "--recon",
        "modl",
    ]);
    train(&[
        "--mode",
        "pretrain-recon",
        "--masks",
        "icd",
        "--recon",
        "unet",
    ]);
    let theta = std::fs::read(models.join("icd/unet.ksf")).unwrap();
    let out = train(&["--mode", "fixed-recon"]);
    assert!(out.contains("8 steps"), "{out}");
    assert_eq!(std::fs::read(models.join("icd/unet.ksf")).unwrap(), theta);
    assert_eq!(std::fs::read(models.join("fixed/unet.ksf")).unwrap(), theta);
    train(&["--mode", "alternating"]);
    train(&["--mode", "population"]);
    train(&["--mode", "post-modl", "--sampler", "alternating"]);
    for f in [
        "models.json",
        "alternating/sampler.ksf",
        "alternating/unet.ksf",
        "alternating/modl.ksf",
        "population/unet.ksf",
    ] {
        assert!(models.join(f).is_file(), "{f}");
    }
    let losses =
        std::fs::read_to_string(models.join("alternating/losses_alternating.csv")).unwrap();
    let steps: std::collections::BTreeSet<&str> = losses
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(steps.len(), 2 * (3 + 4));
    fails(
        &[
            "train",
            "--mode",
            "sideways",
            "--data",
            s(&data),
            "--out",
            s(&models),
        ],
        2,
    );

    let eval = root.path().join("eval");
    let methods = "identity,random+zf,random+unet,alternating+unet,population+unet,suno+unet,random+modl,alternating+modl";
    ok(&[
        "eval",
        "--data",
        s(&data),
        "--models",
        s(&models),
        "--methods",
        methods,
        "--out",
        s(&eval),
    ]);
    let summary = std::fs::read_to_string(eval.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 8);
    let identity = summary
        .lines()
        .find(|l| l.starts_with("identity,"))
        .unwrap();
    assert_eq!(
        identity.split(',').nth(3).unwrap().parse::<f64>().unwrap(),
        0.0
    );
    let metrics = std::fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next().unwrap(),
        "record_id,method,mask_source,nrmse,psnr,ssim"
    );
    assert_eq!(metrics.lines().count(), 1 + 8 * 3);
    fails(
        &[
            "eval",
            "--data",
            s(&data),
            "--models",
            s(&models),
            "--methods",
            "magic+unet",
            "--out",
            s(&eval),
        ],
        2,
    );
    fails(
        &[
            "eval",
            "--data",
            s(&data),
            "--models",
            s(&models),
            "--methods",
            "fixed+modl",
            "--out",
            s(&eval),
        ],
        3,
    );

    // figures: box summary medians agree with the quartile file, masks rasterize with budget white columns
    let figs = root.path().join("figs");
    ok(&[
        "export-figures",
        "--metrics",
        s(&eval.join("metrics.csv")),
        "--out",
        s(&figs),
    ]);
    let boxes = std::fs::read_to_string(figs.join("nrmse_box.csv")).unwrap();
    let quart = std::fs::read_to_string(eval.join("nrmse_quartiles.csv")).unwrap();
    assert_eq!(boxes, quart);
    let pgm = std::fs::read(figs.join("masks/alternating/test_0000.pgm")).unwrap();
    let (w, h, px) = parse_pgm16(&pgm);
    assert_eq!((w, h), (16, 16));
    let white = (0..w)
        .filter(|&c| (0..h).all(|r| px[r * w + c] == 65535))
        .count();
    assert_eq!(white, 4);

    let empty = root.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    fails(
        &["export-figures", "--metrics", s(&empty), "--out", s(&figs)],
        2,
    );
    fails(
        &[
            "export-figures",
            "--metrics",
            s(&root.path().join("none.csv")),
            "--out",
            s(&figs),
        ],
        3,
    );
}

/// Minimal binary PGM reader for 16-bit rasters.
fn parse_pgm16(bytes: &[u8]) -> (usize, usize, Vec<u16>) {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        fields.push(String::from_utf8(bytes[start..i].to_vec()).unwrap());
    }
    assert_eq!((fields[0].as_str(), fields[3].as_str()), ("P5", "65535"));
    let body = &bytes[i + 1..];
    let px = body
        .chunks(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    (fields[1].parse().unwrap(), fields[2].parse().unwrap(), px)
}

#[test]
fn threads_env_fallback_is_validated() {
    let root = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_scanmask"))
        .args([
            "gen-data",
            "--out",
            s(&root.path().join("d")),
            "--train",
            "1",
            "--test",
            "1",
        ])
        .env("KSF_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("KSF_THREADS"));
}
