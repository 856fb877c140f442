//! Acceptance criteria A1-A8. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use gads::cli::{cmd_infer, cmd_synth, cmd_train, RunConfig, MAPS_DIR, RAW_MAPS_FILE, SCORES_FILE};
use gads::dasl::{semantic_maps, semantic_score};
use gads::features::{read_feature_file, FeatureRecord, Mask, PromptBank};
use gads::inference::{predict, read_map_file, InferenceConfig};
use gads::metrics::{auroc, average_precision, evaluate, pro};
use gads::oasl::oasl_maps;
use gads::residual::{image_prototype, image_residual, patch_residual_map};
use gads::synth::SynthConfig;
use gads::tensor::Grid;
use gads::training::*;
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---- A1 ----

/// Central differences over every entry of `tensors`, independent of the
/// library's own checker.
fn max_fd_error(
    params: &AdapterParams,
    analytic: &AdapterGrads,
    tensors: &[usize],
    loss: impl Fn(&AdapterParams) -> f64,
) -> f64 {
    let h = 1e-4;
    let grads = analytic.tensors();
    let mut worst = 0.0f64;
    for &t in tensors {
        for i in 0..grads[t].1.len() {
            let mut plus = params.clone();
            plus.tensors_mut()[t][i] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[t][i] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = grads[t].1[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

fn batch<'a>(
    records: &'a [FeatureRecord],
    r: &mut rand_chacha::ChaCha8Rng,
    layout: &Layout,
) -> Vec<TrainingSample<'a>> {
    records
        .iter()
        .map(|record| TrainingSample {
            record,
            bank: random_bank(r, layout, 2),
        })
        .collect()
}

fn a1() -> Outcome {
    let layout = Layout::small();
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut r = rng(1000 + seed);
        let records = [
            random_record(&mut r, &layout, "n0", 0, true),
            random_record(&mut r, &layout, "a0", 1, true),
            random_record(&mut r, &layout, "a1", 1, true),
            random_record(&mut r, &layout, "n1", 0, false),
        ];
        let normals = [
            random_record(&mut r, &layout, "m0", 0, true),
            random_record(&mut r, &layout, "m1", 0, false),
        ];
        let protos = random_protos(&mut r, 6);
        let params = random_params(&mut r, 8, 8, 6);
        let cfg = TrainConfig {
            alpha: r.random_range(0.1..0.9),
            tau: r.random_range(0.5..2.0),
            semantic_score: false,
            ..Default::default()
        };
        let d_batch = batch(&records, &mut r, &layout);
        let o_batch = batch(&normals, &mut r, &layout);
        let d = loss_dasl(&d_batch, &params, &protos, &cfg).map_err(fail)?;
        let o = loss_oasl(&o_batch, &params, &protos, &cfg).map_err(fail)?;
        worst = worst.max(max_fd_error(&params, &d.grads, &DASL_TENSORS, |p| {
            loss_dasl(&d_batch, p, &protos, &cfg).unwrap().loss
        }));
        worst = worst.max(max_fd_error(&params, &o.grads, &OASL_TENSORS, |p| {
            loss_oasl(&o_batch, p, &protos, &cfg).unwrap().loss
        }));
    }
    check(worst < 1e-3, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("max relative error {worst:.3e} over 20 seeds"))
}

// ---- A2 ----

fn a2() -> Outcome {
    let layout = Layout::small();
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let rec = random_record(&mut r, &layout, &format!("r{i}"), 0, i % 2 == 0);
        let params = random_params(&mut r, 8, 8, 8);
        let bank = PromptBank::new(vec![rec.clone()]).map_err(fail)?;
        let proto = image_prototype(&bank, &params.psi).map_err(fail)?;
        let res = image_residual(&rec, &proto, &params.psi).map_err(fail)?;
        let patch = patch_residual_map(&rec, &bank, &layout.layers).map_err(fail)?;
        for v in res
            .iter()
            .chain(&patch.raw.values().data)
            .chain(&patch.rescaled.values().data)
        {
            worst = worst.max(v.abs());
        }
    }
    check(worst <= 1e-12, || format!("largest residual {worst:.3e}"))?;
    Ok(format!("largest residual {worst:.3e} over 50 records"))
}

// ---- A3 ----

fn a3() -> Outcome {
    let layout = Layout::small();
    let mut r = rng(3);
    let (mut comp, mut swap) = (0.0f64, 0.0f64);
    for i in 0..50 {
        let rec = random_record(&mut r, &layout, &format!("r{i}"), 0, false);
        let protos = random_protos(&mut r, 8);
        let params = random_params(&mut r, 8, 8, 8);
        let tau = r.random_range(0.05..3.0);
        let s = semantic_maps(&rec, &protos, &params.phi1, &layout.layers, tau).map_err(fail)?;
        let o = oasl_maps(&rec, &protos, &params.phi2, &layout.layers, tau).map_err(fail)?;
        for m in [&s, &o] {
            for (a, n) in m.abnormal.data.iter().zip(&m.normal.data) {
                comp = comp.max((a + n - 1.0).abs());
            }
        }
        let q = semantic_score(&rec.class_embed, &protos, tau).map_err(fail)?;
        let q_swapped = semantic_score(&rec.class_embed, &protos.swapped(), tau).map_err(fail)?;
        swap = swap.max((q + q_swapped - 1.0).abs());
    }
    check(comp <= 1e-6, || format!("complement error {comp:.3e}"))?;
    check(swap <= 1e-9, || format!("swap error {swap:.3e}"))?;
    Ok(format!("complement error {comp:.1e}, swap error {swap:.1e}"))
}

// ---- A4 ----

fn labels_with_both(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<u8> {
    loop {
        let l: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(0.4))).collect();
        if l.contains(&0) && l.contains(&1) {
            return l;
        }
    }
}

fn pro_instance(r: &mut rand_chacha::ChaCha8Rng, case: usize) -> (Vec<Grid>, Vec<Mask>) {
    loop {
        let n_img = r.random_range(1..=4);
        let (h, w) = (r.random_range(1..=4), r.random_range(1..=4));
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        for _ in 0..n_img {
            let m = Mask::new(h, w, (0..h * w).map(|_| u8::from(r.random_bool(0.3))).collect()).unwrap();
            let map = match case {
                0 => Grid::filled(h, w, 0.5),
                1 => Grid::from_vec(h, w, m.data.iter().map(|&v| f64::from(v)).collect()).unwrap(),
                _ => random_grid(r, h, w, 5),
            };
            maps.push(map);
            masks.push(m);
        }
        let pos: usize = masks.iter().map(|m| m.positives()).sum();
        if pos > 0 && pos < n_img * h * w {
            return (maps, masks);
        }
    }
}

fn a4() -> Outcome {
    let mut r = rng(4);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let case = i % 4;
        let n = r.random_range(2..=64);
        let labels = labels_with_both(&mut r, n);
        let scores: Vec<f64> = match case {
            0 => vec![0.25; n],
            1 => labels
                .iter()
                .map(|&l| f64::from(l) + r.random_range(0.0..0.5))
                .collect(),
            _ => (0..n).map(|_| f64::from(r.random_range(0..6u32)) / 6.0).collect(),
        };
        let a = auroc(&scores, &labels).map_err(fail)?;
        let p = average_precision(&scores, &labels).map_err(fail)?;
        worst = worst.max((a - auroc_pairs(&scores, &labels)).abs());
        worst = worst.max((p - ap_sweep(&scores, &labels)).abs());
        if case == 1 && (a != 1.0 || p != 1.0) {
            return Err(format!("perfect separation gave auroc {a}, ap {p}"));
        }
        let (maps, masks) = pro_instance(&mut r, case);
        let limit = if i % 3 == 0 { 0.3 } else { r.random_range(0.05..1.0) };
        let got = pro(&maps, &masks, limit).map_err(fail)?;
        worst = worst.max((got - pro_reference(&maps, &masks, limit)).abs());
        if case == 1 && (got - 1.0).abs() > 1e-12 {
            return Err(format!("perfect map gave pro {got}"));
        }
    }
    check(worst <= 1e-9, || format!("max deviation {worst:.3e}"))?;
    Ok(format!("max deviation {worst:.1e} over 200 instances"))
}

// ---- A5 ----

fn run_args(args: &[&str]) -> RunConfig {
    use clap::Parser;
    let cli = gads::cli::Cli::try_parse_from(std::iter::once("gads").chain(args.iter().copied())).unwrap();
    match cli.command {
        gads::cli::Command::Train(a) | gads::cli::Command::Infer(a) | gads::cli::Command::Eval(a) => {
            RunConfig::from(&a)
        }
        gads::cli::Command::Synth(_) => unreachable!(),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// synth -> train -> infer (K=2) -> evaluate; returns (image AUROC, pixel AUROC).
fn pipeline(dir: &Path, synth: &SynthConfig, extra: &[&str]) -> Result<(f64, Option<f64>), String> {
    let data = cmd_synth(synth, &dir.join("data")).map_err(fail)?;
    let ckpt = dir.join("model.ckpt");
    let mut train = vec![
        "train",
        "--features",
        p(&data.train),
        "--protos",
        p(&data.protos),
        "--ckpt",
        p(&ckpt),
    ];
    train.extend_from_slice(extra);
    cmd_train(&run_args(&train)).map_err(fail)?;
    let out = dir.join("out");
    let mut infer = vec![
        "infer",
        "--test-features",
        p(&data.test),
        "--protos",
        p(&data.protos),
        "--prompts",
        p(&data.prompts),
        "--ckpt",
        p(&ckpt),
        "--out",
        p(&out),
        "--shots",
        "2",
    ];
    infer.extend_from_slice(extra);
    cmd_infer(&run_args(&infer)).map_err(fail)?;
    let outputs = read_map_file(out.join("seed_0").join(RAW_MAPS_FILE)).map_err(fail)?;
    let test = read_feature_file(&data.test).map_err(fail)?;
    let report = evaluate(&outputs, test.records()).map_err(fail)?;
    Ok((
        report.overall.image_auroc.ok_or("no image auroc")?,
        report.overall.pixel_auroc,
    ))
}

fn a5() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(fail)?;
    let (img, pix) = pipeline(&dir.path().join("planted"), &SynthConfig::default(), &[])?;
    let pix = pix.ok_or("no pixel auroc")?;
    let control = SynthConfig {
        magnitude: 0.0,
        ..Default::default()
    };
    let (null_img, _) = pipeline(&dir.path().join("control"), &control, &[])?;
    let elapsed = start.elapsed();
    let summary = format!(
        "image AUROC {img:.4}, pixel AUROC {pix:.4}, control image AUROC {null_img:.4}, {:.1}s",
        elapsed.as_secs_f64()
    );
    check(img >= 0.95 && pix >= 0.90, || summary.clone())?;
    check((0.4..=0.6).contains(&null_img), || summary.clone())?;
    check(elapsed < Duration::from_secs(120), || summary.clone())?;
    Ok(summary)
}

// ---- A6 ----

fn a6() -> Outcome {
    let layout = Layout::small();
    let mut r = rng(6);
    for i in 0..20 {
        let rec = random_record(&mut r, &layout, &format!("q{i}"), 1, true);
        let bank = random_bank(&mut r, &layout, 2);
        let protos = random_protos(&mut r, 8);
        let params = random_params(&mut r, 8, 8, 8);
        let at = |alpha: f64, beta: f64| {
            let cfg = InferenceConfig {
                alpha,
                beta,
                ..Default::default()
            };
            predict(&rec, &bank, &params, &protos, &cfg)
        };
        let (a0, a1) = (at(0.0, 0.0).map_err(fail)?, at(1.0, 1.0).map_err(fail)?);
        let mean = (a0.residual_score + a0.semantic_score.ok_or("missing s_q")?) / 2.0;
        check(a0.score == mean, || format!("alpha 0: {} vs {mean}", a0.score))?;
        check(a1.score == a1.patch.rescaled.max(), || {
            format!("alpha 1: {} vs max", a1.score)
        })?;
        check(a0.map == upsample(&a0.dasl_map, rec.image_dims).map_err(fail)?, || {
            "beta 0 map".into()
        })?;
        check(a1.map == upsample(&a1.oasl_map, rec.image_dims).map_err(fail)?, || {
            "beta 1 map".into()
        })?;
    }
    Ok("alpha and beta endpoints exact on 20 instances".into())
}

// ---- A7 ----

fn small_synth() -> SynthConfig {
    SynthConfig {
        classes: 2,
        train_normal: 40,
        train_abnormal: 10,
        test_normal: 10,
        test_abnormal: 10,
        pool_normal: 4,
        d_cls: 16,
        d_patch: 16,
        d_text: 16,
        ..Default::default()
    }
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn a7() -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    let extra = ["--epochs", "3", "--batch", "16"];
    let run = |name: &str, threads: usize| -> Result<Vec<(String, Vec<u8>)>, String> {
        let root = dir.path().join(name);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(fail)?
            .install(|| pipeline(&root, &small_synth(), &extra))?;
        Ok(tree_bytes(&root))
    };
    let a = run("a", 1)?;
    let b = run("b", 4)?;
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    check(names.iter().any(|n| n.ends_with(".ckpt")), || {
        "no checkpoint written".into()
    })?;
    check(names.iter().any(|n| n.ends_with(SCORES_FILE)), || {
        "no scores written".into()
    })?;
    let maps = names
        .iter()
        .filter(|n| n.contains(MAPS_DIR) && n.ends_with(".pgm"))
        .count();
    check(maps == 40, || format!("{maps} map images"))?;
    if let Some(((n, _), _)) = a.iter().zip(&b).find(|(x, y)| x != y) {
        return Err(format!("{n} differs between runs"));
    }
    check(a.len() == b.len(), || "file sets differ".into())?;
    Ok(format!("{} files byte-identical across 1- and 4-thread runs", a.len()))
}

// ---- A8 ----

fn a8() -> Outcome {
    let data = gads::synth::generate(&small_synth()).map_err(fail)?;
    let cfg = TrainConfig {
        lr: 1e-2,
        batch: 8,
        ..Default::default()
    };
    let mut t = Trainer::new(&data.train, &data.protos, cfg).map_err(fail)?;
    let records = data.train.records();
    let normals: Vec<usize> = (0..records.len()).filter(|&i| records[i].is_normal()).collect();
    let split = |p: &AdapterParams| {
        let bits: Vec<Vec<u64>> = p
            .tensors()
            .iter()
            .map(|(_, v)| v.iter().map(|x| x.to_bits()).collect())
            .collect();
        (bits[..6].to_vec(), bits[6..].to_vec())
    };
    let mut r = rng(8);
    let (mut moved_dasl, mut moved_oasl) = (0, 0);
    for step in 0..100 {
        let (d_before, o_before) = split(t.params());
        if step % 2 == 0 {
            let idx: Vec<usize> = (0..8).map(|_| r.random_range(0..records.len())).collect();
            t.step_dasl(&idx).map_err(fail)?;
            let (d_after, o_after) = split(t.params());
            check(o_before == o_after, || format!("step {step}: DASL step changed phi2"))?;
            moved_dasl += usize::from(d_before != d_after);
        } else {
            let idx: Vec<usize> = (0..8).map(|_| normals[r.random_range(0..normals.len())]).collect();
            t.step_oasl(&idx).map_err(fail)?;
            let (d_after, o_after) = split(t.params());
            check(d_before == d_after, || {
                format!("step {step}: OASL step changed DASL tensors")
            })?;
            moved_oasl += usize::from(o_before != o_after);
        }
    }
    check(moved_dasl == 50 && moved_oasl == 50, || {
        format!("only {moved_dasl}/{moved_oasl} steps updated their own branch")
    })?;
    Ok("100 alternating steps, each branch untouched by the other".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("A1", a1, Some(Duration::from_secs(30))),
        ("A2", a2, None),
        ("A3", a3, None),
        ("A4", a4, None),
        ("A5", a5, None),
        ("A6", a6, None),
        ("A7", a7, None),
        ("A8", a8, None),
    ];
    let mut failed = 0;
    for (name, run, budget) in criteria {
        let start = Instant::now();
        let mut outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        if let (Ok(msg), Some(limit)) = (&outcome, budget) {
            if elapsed > limit {
                outcome = Err(format!("{msg}; took {:.1}s", elapsed.as_secs_f64()));
            }
        }
        match outcome {
            Ok(msg) => println!("{name} PASS {msg} ({:.2}s)", elapsed.as_secs_f64()),
            Err(msg) => {
                failed += 1;
                println!("{name} FAIL {msg} ({:.2}s)", elapsed.as_secs_f64());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
