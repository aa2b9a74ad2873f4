//! Acceptance run: one line per criterion. By default this is a report and
//! exits 0; with `SCANMASK_ACCEPT_STRICT` set, any hard failure exits 1.
//! Criterion 8 is soft and only ever flagged.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use scanmask::encoding::{adjoint, forward};
use scanmask::icd::{exhaustive_mask_search, icd_optimize_mask, IcdConfig};
use scanmask::mask::uniform_random_mask_with_band;
use scanmask::pipeline::{run_benchmark, BenchmarkOutcome, RunSettings, METRICS_FILE};
use scanmask::recon::{
    cg_graph, cg_solve, modl_reconstruct, nrmse, zero_filled, DcProblem, MoDL, MoDLConfig,
};
use scanmask::sampler::{SamplerConfig, SamplerNet};
use scanmask::synth::{
    build_dataset, generate_phantom, simulate_coil_maps, DatasetConfig, DatasetManifest,
    ScanRecord, Split,
};
use scanmask::training::*;
use scanmask::{CImage, Encoder, MaskedAdjointOp, MultiCoilKSpace, SamplingMask};
use scanmask_autodiff::{gradient_check, AutodiffError, Graph, Tensor, Var};

mod common;
use common::*;

const STRICT: &str = "SCANMASK_ACCEPT_STRICT";

type Check = std::result::Result<String, String>;

enum Verdict {
    Pass,
    Fail,
    Flag,
}

struct Line {
    id: usize,
    name: &'static str,
    verdict: Verdict,
    detail: String,
    took: Duration,
}

fn run(
    id: usize,
    name: &'static str,
    limit: Option<Duration>,
    soft: bool,
    f: impl FnOnce() -> Check,
) -> Line {
    let t = Instant::now();
    let r = f();
    let took = t.elapsed();
    let (ok, mut detail) = match r {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    let late = limit.is_some_and(|l| took > l);
    if late {
        detail.push_str(&format!(
            "; over the {:.0} s limit",
            limit.unwrap().as_secs_f64()
        ));
    }
    let verdict = match (ok && !late, soft) {
        (true, _) => Verdict::Pass,
        (false, true) => Verdict::Flag,
        (false, false) => Verdict::Fail,
    };
    let line = Line {
        id,
        name,
        verdict,
        detail,
        took,
    };
    print_line(&line);
    line
}

fn print_line(l: &Line) {
    let tag = match l.verdict {
        Verdict::Pass => "PASS",
        Verdict::Fail => "FAIL",
        Verdict::Flag => "FLAG (soft)",
    };
    println!(
        "criterion {:>2} [{tag}] {} ({:.1} s): {}",
        l.id,
        l.name,
        l.took.as_secs_f64(),
        l.detail
    );
}

fn ensure(cond: bool, msg: String) -> Check {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn operators() -> Check {
    let mut r = rng(101);
    let mut worst_adj: f64 = 0.0;
    for _ in 0..200 {
        let h = 2 * r.random_range(2..9);
        let w = 2 * r.random_range(2..9);
        let c = r.random_range(1..5);
        let x = rand_image(&mut r, h, w);
        let maps = rand_maps(&mut r, c, h, w);
        let mask = rand_mask(&mut r, w);
        let y = rand_kspace(&mut r, c, h, w);
        let lhs = forward(&x, &maps, &mask).map_err(e2s)?.dot_re(&y);
        let rhs = x.dot_re(&adjoint(&y, &maps, &mask).map_err(e2s)?);
        worst_adj = worst_adj.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300));
    }
    let mut worst_dft: f64 = 0.0;
    for n in [4, 8] {
        for _ in 0..5 {
            let c = r.random_range(1..4);
            let x = rand_image(&mut r, n, n);
            let maps = rand_maps(&mut r, c, n, n);
            let mask = rand_mask(&mut r, n);
            let masked = |img: &CImage| {
                CImage::from_fn(n, n, |p, q| {
                    if mask.is_sampled(q) {
                        img.at(p, q)
                    } else {
                        Default::default()
                    }
                })
            };
            let y = forward(&x, &maps, &mask).map_err(e2s)?;
            let yy = rand_kspace(&mut r, c, n, n);
            let got = adjoint(&yy, &maps, &mask).map_err(e2s)?;
            let mut want = CImage::zeros(n, n);
            for (k, s) in maps.maps().iter().enumerate() {
                let sx = CImage::from_fn(n, n, |p, q| s.at(p, q) * x.at(p, q));
                worst_dft = worst_dft.max(max_diff(&y.coils()[k], &masked(&dense_dft(&sx))));
                let im = dense_idft(&masked(&yy.coils()[k]));
                want =
                    CImage::from_fn(n, n, |p, q| want.at(p, q) + s.at(p, q).conj() * im.at(p, q));
            }
            worst_dft = worst_dft.max(max_diff(&got, &want));
        }
    }
    ensure(
        worst_adj <= 1e-10 && worst_dft <= 1e-10,
        format!("adjoint rel err {worst_adj:.2e} over 200 draws; dense DFT max diff {worst_dft:.2e} (tol 1e-10)"),
    )
}

fn rand_tensor(r: &mut rand_chacha::ChaCha8Rng, shape: &[usize], lo: f64) -> Tensor<f64> {
    // magnitudes in [lo, 1) keep activations clear of their kinks
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = r.random_range(lo..1.0);
            if r.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Loss<'a> = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var, scanmask::Error> + 'a>;

fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, AutodiffError> {
    let w = rand_tensor(&mut rng(seed), g.value(y).shape(), 0.0);
    let w = g.constant(w);
    g.dot(y, w)
}

fn gradients() -> Check {
    let mut r = rng(202);
    let x3 = rand_tensor(&mut r, &[2, 6, 4], 0.05);
    let k = rand_tensor(&mut r, &[3, 2, 3, 3], 0.0);
    let dx = rand_tensor(&mut r, &[3, 4], 0.0);
    let dw = rand_tensor(&mut r, &[4, 5], 0.0);
    let db = rand_tensor(&mut r, &[5], 0.0);
    let cb = rand_tensor(&mut r, &[2], 0.0);
    let target: Vec<f64> = rand_tensor(&mut r, &[2, 6, 4], 0.0).data().to_vec();
    let labels: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let logits = rand_tensor(&mut r, &[12], 0.0);
    let s_val = rand_tensor(&mut r, &[1], 0.5);

    let maps = rand_maps(&mut r, 2, 4, 4);
    let y = rand_kspace(&mut r, 2, 4, 4);
    let mask = uniform_random_mask_with_band(4, 2, 2, 1).unwrap();
    let adj = Arc::new(MaskedAdjointOp::new(Encoder::new(&maps).unwrap(), y).unwrap());
    let dc = DcProblem::new(
        &MultiCoilKSpace::new(vec![CImage::zeros(4, 4); 2]).unwrap(),
        &maps,
        &mask,
        0.2,
    )
    .unwrap();
    let mvals = Tensor::new(vec![4], vec![0.3, 0.6, 0.45, 0.8]).unwrap();
    let b32 = rand_tensor(&mut r, &[2, 4, 4], 0.0);

    let (kc, x3c, dwc, dbc, dxc, cbc) = (
        k.clone(),
        x3.clone(),
        dw.clone(),
        db.clone(),
        dx.clone(),
        cb.clone(),
    );
    let cases: Vec<(&str, Tensor<f64>, Loss)> = vec![
        (
            "dense input",
            dx.clone(),
            Box::new(move |g, x| {
                let (w, b) = (g.constant(dwc.clone()), g.constant(dbc.clone()));
                let y = g.dense(x, w, b)?;
                Ok(probe(g, y, 1)?)
            }),
        ),
        (
            "dense weight",
            dw.clone(),
            Box::new({
                let (dxc, dbc) = (dxc.clone(), db.clone());
                move |g, w| {
                    let (x, b) = (g.constant(dxc.clone()), g.constant(dbc.clone()));
                    let y = g.dense(x, w, b)?;
                    Ok(probe(g, y, 1)?)
                }
            }),
        ),
        (
            "dense bias",
            db.clone(),
            Box::new({
                let dw = dw.clone();
                move |g, b| {
                    let (x, w) = (g.constant(dxc.clone()), g.constant(dw.clone()));
                    let y = g.dense(x, w, b)?;
                    Ok(probe(g, y, 1)?)
                }
            }),
        ),
        (
            "conv2d input",
            x3.clone(),
            Box::new(move |g, x| {
                let k = g.constant(kc.clone());
                let y = g.conv2d(x, k, 1, 1)?;
                Ok(probe(g, y, 2)?)
            }),
        ),
        (
            "conv2d kernel",
            k.clone(),
            Box::new({
                let x3c = x3c.clone();
                move |g, k| {
                    let x = g.constant(x3c.clone());
                    let y = g.conv2d(x, k, 1, 0)?;
                    Ok(probe(g, y, 3)?)
                }
            }),
        ),
        (
            "conv2d strided",
            rand_tensor(&mut r, &[2, 7, 5], 0.0),
            Box::new({
                let k = k.clone();
                move |g, x| {
                    let k = g.constant(k.clone());
                    let y = g.conv2d(x, k, 2, 1)?;
                    Ok(probe(g, y, 12)?)
                }
            }),
        ),
        (
            "channel bias",
            cb.clone(),
            Box::new({
                let x3c = x3c.clone();
                move |g, b| {
                    let x = g.constant(x3c.clone());
                    let y = g.add_channel_bias(x, b)?;
                    Ok(probe(g, y, 4)?)
                }
            }),
        ),
        (
            "relu",
            x3.clone(),
            Box::new(|g, x| {
                let y = g.relu(x);
                Ok(probe(g, y, 5)?)
            }),
        ),
        (
            "leaky relu",
            x3.clone(),
            Box::new(|g, x| {
                let y = g.leaky_relu(x, 0.1);
                Ok(probe(g, y, 6)?)
            }),
        ),
        (
            "sigmoid",
            x3.clone(),
            Box::new(|g, x| {
                let y = g.sigmoid(x);
                Ok(probe(g, y, 7)?)
            }),
        ),
        (
            "avg pool / upsample / concat",
            x3.clone(),
            Box::new(move |g, x| {
                let b = g.constant(cbc.clone());
                let xb = g.add_channel_bias(x, b)?;
                let p = g.avg_pool2(xb)?;
                let u = g.upsample2(p)?;
                let c = g.concat(u, x)?;
                Ok(probe(g, c, 8)?)
            }),
        ),
        (
            "mean over axis / reshape",
            x3.clone(),
            Box::new(|g, x| {
                let m = g.mean_axis(x, 1)?;
                let n = g.value(m).numel();
                let f = g.reshape(m, vec![n])?;
                Ok(probe(g, f, 9)?)
            }),
        ),
        (
            "add / sub / scale / sum / mean",
            x3.clone(),
            Box::new(|g, x| {
                let a = g.scale(x, 1.7);
                let b = g.sub(a, x)?;
                let c = g.add(b, a)?;
                let s = g.sum(c);
                let m = g.mean(x);
                let t = g.add(s, m)?;
                Ok(g.dot(t, t)?)
            }),
        ),
        (
            "scalar multiply / divide",
            s_val.clone(),
            Box::new({
                let x3c = x3c.clone();
                move |g, s| {
                    let x = g.constant(x3c.clone());
                    let y = g.mul_scalar(x, s)?;
                    let d = g.dot(y, y)?;
                    Ok(g.div_scalar(d, s)?)
                }
            }),
        ),
        (
            "masked adjoint operator",
            mvals.clone(),
            Box::new(move |g, m| {
                let y = g.linear(m, adj.clone())?;
                Ok(probe(g, y, 10)?)
            }),
        ),
        (
            "conjugate-gradient data consistency",
            b32,
            Box::new(move |g, b| {
                let x = cg_graph(g, dc.op.clone(), b, 4, 1e-12)?;
                Ok(probe(g, x, 11)?)
            }),
        ),
        (
            "nrmse loss",
            x3.clone(),
            Box::new(move |g, x| Ok(g.nrmse(x, &target)?)),
        ),
        (
            "bce loss",
            logits,
            Box::new(move |g, a| Ok(g.bce_with_logits(a, &labels)?)),
        ),
    ];
    let mut worst = (0.0, "");
    let mut lines = Vec::new();
    for (name, x, f) in &cases {
        let e = gradient_check(x, 1e-5, |g: &mut Graph<f64>, v| f(g, v))
            .map_err(|e: scanmask::Error| format!("{name}: {e}"))?;
        if e > worst.0 {
            worst = (e, name);
        }
        if e > 1e-6 {
            lines.push(format!("{name} {e:.2e}"));
        }
    }

    // a full sampler network end to end
    let cfg = SamplerConfig {
        channels: vec![4, 3],
        ..SamplerConfig::new(16, 4, 8)
    };
    let mut net = SamplerNet::new(cfg, 3).unwrap();
    let mut pr = rng(7);
    for p in net.params.iter_mut() {
        for v in p.value.data_mut() {
            *v = pr.random_range(-0.5..0.5);
        }
    }
    let z = rand_image(&mut r, 16, 4);
    let label = SamplingMask::from_indices(8, &[1, 3, 4, 6], 2).unwrap();
    for idx in 0..net.params.len() {
        let x = net.params.param(idx).value.clone();
        let e = gradient_check(&x, 1e-5, |g: &mut Graph<f64>, xv| {
            let mut vars = net.params.bind(g, false);
            vars[idx] = xv;
            let zv = g.constant(net.input_tensor(&z)?);
            let a = net.forward(g, &vars, zv)?;
            scanmask::sampler::bce_mask_loss(g, a, &label)
        })
        .map_err(e2s)?;
        if e > worst.0 {
            worst = (e, "sampler network");
        }
        if e > 1e-6 {
            lines.push(format!("sampler {} {e:.2e}", net.params.param(idx).name));
        }
    }

    // the binarization passes its upstream gradient through unchanged
    let mut g = Graph::new();
    let p = g.leaf(Tensor::new(vec![8], vec![0.1, 0.9, 0.4, 0.6, 0.3, 0.8, 0.2, 0.7]).unwrap());
    let m = g.st_binarize(p, 4, &[3, 4]).map_err(e2s)?;
    let w = g.constant(Tensor::new(vec![8], (1..=8).map(f64::from).collect()).unwrap());
    let l = g.dot(m, w).map_err(e2s)?;
    let grads = g.backward(l).map_err(e2s)?;
    let st_ok = grads.get(p).map(|t| t.to_vec()) == Some((1..=8).map(f64::from).collect());
    if !st_ok {
        lines.push("straight-through gradient is not the identity".into());
    }
    let n = cases.len() + 2;
    ensure(
        lines.is_empty(),
        format!(
            "{n} checks, worst rel err {:.2e} ({}); straight-through identity {}{}",
            worst.0,
            worst.1,
            if st_ok { "holds" } else { "broken" },
            if lines.is_empty() {
                String::new()
            } else {
                format!("; over tol: {}", lines.join(", "))
            }
        ),
    )
}

fn conjugate_gradient() -> Check {
    let mut r = rng(303);
    let mut worst: f64 = 0.0;
    let (mut rising, mut highest) = (0, 0.0f64);
    let trials = 20;
    for trial in 0..trials {
        let maps = rand_maps(&mut r, 2, 8, 8);
        let mask = uniform_random_mask_with_band(8, 3 + trial % 3, 2, trial as u64).unwrap();
        let rhs = rand_image(&mut r, 8, 8);
        let z = rand_image(&mut r, 8, 8);
        let lambda = 0.05;
        let enc = Encoder::new(&maps).unwrap();
        let got = cg_solve(&enc, &mask, &rhs, &z, lambda, 500, 1e-14).map_err(e2s)?;
        let mut a = dense_normal(&maps, &mask);
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += lambda;
        }
        let b = rhs
            .data()
            .iter()
            .zip(z.data())
            .map(|(p, q)| p + q * lambda)
            .collect();
        let want = CImage::new(8, 8, dense_solve(a, b)).unwrap();
        worst = worst.max(max_diff(&got.x, &want));
        let rn = &got.residual_norms;
        let ups: Vec<f64> = rn
            .windows(2)
            .filter(|p| p[1] > p[0])
            .map(|p| p[0] / rn[0])
            .collect();
        if !ups.is_empty() {
            rising += 1;
            highest = ups.iter().copied().fold(highest, f64::max);
        }
    }
    let monotone = if rising == 0 {
        format!("residuals non-increasing on all {trials}")
    } else {
        format!("residual rose on {rising}/{trials} instances, the earliest rise at relative residual {highest:.1e}")
    };
    ensure(
        worst <= 1e-8 && rising == 0,
        format!("max diff vs dense solve {worst:.2e} (tol 1e-8) on {trials} instances; {monotone}"),
    )
}

fn modl_fixed_point() -> Check {
    let cfg = MoDLConfig::default();
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let x = generate_phantom(64, 64, 8, seed).map_err(e2s)?;
        let maps = simulate_coil_maps(4, 64, 64, seed + 100).map_err(e2s)?;
        let full = SamplingMask::full(64, 5);
        let y = forward(&x, &maps, &full).map_err(e2s)?;
        let rec = modl_reconstruct(&cfg, &y, &maps, &full, |_, v| Ok(v)).map_err(e2s)?;
        worst = worst.max(nrmse(&rec, &x).map_err(e2s)?);
    }
    ensure(
        worst <= 1e-8,
        format!("worst NRMSE {worst:.2e} over 5 noiseless 64x64 phantoms (tol 1e-8)"),
    )
}

fn icd_quality() -> Check {
    let cfg = DatasetConfig {
        h: 8,
        w: 8,
        coils: 2,
        n_ellipses: 3,
        ..DatasetConfig::default()
    };
    let icd = IcdConfig::new(3, 1);
    let (mut strict, mut in_set, mut decreasing) = (0, 0, 0);
    for seed in 0..50 {
        let rec = ScanRecord::synthesize("r", &cfg, 5000 + seed).map_err(e2s)?;
        let r = icd_optimize_mask(&rec, &icd, seed).map_err(e2s)?;
        let e = exhaustive_mask_search(&rec, &icd).map_err(e2s)?;
        let fin = r.final_value();
        strict += (fin < r.initial) as usize;
        in_set += e
            .values
            .iter()
            .any(|v| (v - fin).abs() <= 1e-12 * v.abs().max(1.0)) as usize;
        decreasing += (r.trace.windows(2).all(|w| w[1] < w[0])
            && r.trace.first().is_none_or(|&f| f < r.initial)) as usize;
    }
    ensure(
        strict >= 45 && in_set == 50 && decreasing == 50,
        format!("strict improvement {strict}/50 (need 45); value in exhaustive set {in_set}/50; trace strictly decreasing {decreasing}/50"),
    )
}

fn label_quality(dir: &Path) -> Check {
    let m = build_dataset(dir, 50, 1, &DatasetConfig::default(), 606).map_err(e2s)?;
    let icd = IcdConfig::new(m.budget, m.low_freq_width);
    scanmask::icd::precompute_labels(dir, &m, &icd, 7, false).map_err(e2s)?;
    let recs = m.load_split(dir, Split::Train).map_err(e2s)?;
    let (mut lab, mut rnd) = (0.0, 0.0);
    for (i, r) in recs.iter().enumerate() {
        let label = r.m_ref.as_ref().ok_or("missing label")?;
        lab += nrmse(
            &zero_filled(&r.y_full, &r.maps, label).map_err(e2s)?,
            &r.x_gt,
        )
        .map_err(e2s)?;
        let u = uniform_random_mask_with_band(m.w, m.budget, m.low_freq_width, 9000 + i as u64)
            .map_err(e2s)?;
        rnd += nrmse(&zero_filled(&r.y_full, &r.maps, &u).map_err(e2s)?, &r.x_gt).map_err(e2s)?;
    }
    let n = recs.len() as f64;
    ensure(
        lab < rnd,
        format!(
            "mean zero-filled NRMSE: ICD labels {:.4} vs uniform random {:.4} over {} records",
            lab / n,
            rnd / n,
            recs.len()
        ),
    )
}

fn pair(s: &str) -> Method {
    s.parse().expect("method id")
}

fn margin(o: &BenchmarkOutcome, ours: &str, base: &str) -> Result<(f64, f64, f64), String> {
    let a = o
        .mean_nrmse(pair(ours))
        .ok_or(format!("{ours} not evaluated"))?;
    let b = o
        .mean_nrmse(pair(base))
        .ok_or(format!("{base} not evaluated"))?;
    Ok((a, b, (b - a) / b))
}

fn ordering(o: &BenchmarkOutcome, took: Duration) -> Check {
    let (am, rm, mm) = margin(o, "alternating+modl", "random+modl")?;
    let (au, ru, mu) = margin(o, "alternating+unet", "random+unet")?;
    ensure(
        mm >= 0.02 && mu >= 0.02 && took < Duration::from_secs(30 * 60),
        format!(
            "MoDL {am:.4} vs random {rm:.4} (margin {:.1}%); UNetLite {au:.4} vs random {ru:.4} (margin {:.1}%); pipeline {:.0} s",
            100.0 * mm,
            100.0 * mu,
            took.as_secs_f64()
        ),
    )
}

fn ablation(o: &BenchmarkOutcome) -> Check {
    let a = o
        .mean_nrmse(pair("alternating+unet"))
        .ok_or("alternating+unet not evaluated")?;
    let f = o
        .mean_nrmse(pair("fixed+unet"))
        .ok_or("fixed+unet not evaluated")?;
    ensure(
        a <= f,
        format!("alternating {a:.4} vs fixed reconstructor {f:.4}"),
    )
}

fn training_contracts(data: &Path) -> Check {
    let m = DatasetManifest::load(data).map_err(e2s)?;
    let tr = m.load_split(data, Split::Train).map_err(e2s)?;
    let geom = Geometry {
        budget: m.budget,
        band: m.low_freq_width,
    };
    let scfg = SamplerConfig::new(m.h, m.lowfreq_obs_width, m.w);

    // supervised-only training from a zero head
    let mut s = SamplerNet::new(scfg.clone(), 1).map_err(e2s)?;
    let cfg = TrainConfig {
        epochs: 100,
        lambda_reg: 0.0,
        ..TrainConfig::default()
    };
    let log = train_sampler_fixed_recon(&tr, &mut s, None, geom, &cfg).map_err(e2s)?;
    let bce = log.values("sampler_bce");
    let first = *bce.first().ok_or("no sampler steps")?;
    let target = 0.5 * std::f64::consts::LN_2;
    let per_epoch = bce.len() / cfg.epochs;
    let reached = bce
        .chunks(per_epoch)
        .position(|c| c.iter().sum::<f64>() / (c.len() as f64) < target)
        .map(|e| e + 1);
    let final_bce = mean_bce(&s, &tr).map_err(e2s)?;

    // freeze and alternation checksums on a slice of the training set
    let sub = &tr[..20];
    let mut sa = SamplerNet::new(scfg.clone(), 2).map_err(e2s)?;
    let mut u =
        scanmask::recon::UNetLite::new(scanmask::recon::UNetConfig::default(), 3).map_err(e2s)?;
    let mut prev = (sa.params.checksum(), u.params.checksum());
    let mut alternation_ok = true;
    let short = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    train_alternating_observed(sub, &mut sa, &mut u, geom, &short, &mut |ph, s, u| {
        let now = (s.params.checksum(), u.params.checksum());
        alternation_ok &= match ph {
            Phase::Recon => now.0 == prev.0,
            Phase::Sampler => now.1 == prev.1,
        };
        prev = now;
    })
    .map_err(e2s)?;
    let theta = u.params.checksum();
    let mut sf = SamplerNet::new(scfg, 4).map_err(e2s)?;
    train_sampler_fixed_recon(sub, &mut sf, Some(&u), geom, &short).map_err(e2s)?;
    let fixed_ok = u.params.checksum() == theta;
    let gamma = sa.params.checksum();
    let mut modl = MoDL::new(MoDLConfig::default(), 5).map_err(e2s)?;
    let post = TrainConfig {
        epochs: 1,
        recon_steps_per_epoch: 2,
        ..TrainConfig::default()
    };
    let out = post_train_modl(&sub[..4], &mut modl, &sa, geom, &post).map_err(e2s)?;
    let post_ok = sa.params.checksum() == gamma && out.sampler_forward_passes == 4;

    let epoch = reached.map_or("never".into(), |e| format!("epoch {e}"));
    ensure(
        (first - std::f64::consts::LN_2).abs() <= 1e-6
            && reached.is_some()
            && final_bce < target
            && alternation_ok
            && fixed_ok
            && post_ok,
        format!(
            "step-0 BCE {first:.9} (ln 2 = {:.9}); epoch-mean BCE below 0.5 ln 2 at {epoch}; train BCE after 100 epochs {final_bce:.4}; \
             alternation freeze {alternation_ok}; fixed reconstructor untouched {fixed_ok}; post-training sampler untouched {post_ok}",
            std::f64::consts::LN_2
        ),
    )
}

fn determinism(a: &Path, b: &Path) -> Check {
    let x = std::fs::read(a.join("eval").join(METRICS_FILE)).map_err(e2s)?;
    let y = std::fs::read(b.join("eval").join(METRICS_FILE)).map_err(e2s)?;
    ensure(
        x == y,
        format!(
            "metrics.csv {} bytes, identical across two full runs: {}",
            x.len(),
            x == y
        ),
    )
}

/// Distinct masks the alternating sampler predicted on the test split.
fn distinct_masks(run: &Path) -> Option<usize> {
    let dir = run.join("eval").join("masks").join("alternating");
    let mut set = BTreeSet::new();
    for e in std::fs::read_dir(dir).ok()? {
        let m = SamplingMask::load(&e.ok()?.path()).ok()?;
        set.insert(m.indices());
    }
    Some(set.len())
}

fn main() {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build_global()
        .expect("thread pool");
    let tmp = tempfile::tempdir().expect("temp dir");
    let secs = Duration::from_secs;
    let mut lines = vec![
        run(1, "operator correctness", Some(secs(10)), false, operators),
        run(2, "autodiff correctness", Some(secs(60)), false, gradients),
        run(
            3,
            "conjugate gradient",
            Some(secs(10)),
            false,
            conjugate_gradient,
        ),
        run(
            4,
            "MoDL fixed point",
            Some(secs(10)),
            false,
            modl_fixed_point,
        ),
        run(5, "ICD oracle quality", Some(secs(300)), false, icd_quality),
        run(6, "label quality", Some(secs(600)), false, || {
            label_quality(&tmp.path().join("labels"))
        }),
    ];

    let settings = RunSettings::default();
    let (first, second) = (tmp.path().join("run_a"), tmp.path().join("run_b"));
    let t = Instant::now();
    let outcome = run_benchmark(&settings, &first);
    let took = t.elapsed();
    match &outcome {
        Ok(o) => {
            for r in &o.reports {
                println!("  {:<22} mean NRMSE {:.4}", r.label(), r.mean_nrmse);
            }
            lines.push(run(7, "end-to-end ordering", None, false, || {
                ordering(o, took)
            }));
            lines.push(run(
                8,
                "alternating vs fixed reconstructor",
                None,
                true,
                || ablation(o),
            ));
            if let Some(n) = distinct_masks(&first) {
                println!("  info: the alternating sampler predicted {n} distinct mask(s) over the test split");
            }
            lines.push(run(9, "training contracts", Some(secs(600)), false, || {
                training_contracts(&first.join("data"))
            }));
            lines.push(run(10, "determinism", None, false, || {
                run_benchmark(&settings, &second).map_err(e2s)?;
                determinism(&first, &second)
            }));
        }
        Err(e) => {
            let msg = format!("benchmark failed: {e}");
            for (id, name, soft) in [
                (7, "end-to-end ordering", false),
                (8, "alternating vs fixed reconstructor", true),
                (9, "training contracts", false),
                (10, "determinism", false),
            ] {
                lines.push(run(id, name, None, soft, || Err(msg.clone())));
            }
        }
    }

    let hard = lines
        .iter()
        .filter(|l| matches!(l.verdict, Verdict::Fail))
        .count();
    let soft = lines
        .iter()
        .filter(|l| matches!(l.verdict, Verdict::Flag))
        .count();
    println!(
        "acceptance: {} passed, {hard} failed, {soft} flagged",
        lines.len() - hard - soft
    );
    if hard > 0 && std::env::var_os(STRICT).is_some() {
        std::process::exit(1);
    }
}
