//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! The variant-ordering criterion trains 15 models and takes well over an
//! hour on one core; it runs only when STEREODROP_FULL_ACCEPTANCE=1.

mod common;

use std::time::Instant;

use common::{
    conv_naive, query_response_offsets, randn, rng, shift_recovery, soft_argmax_naive, upsample_naive,
    window_attention_naive, window_starts_naive,
};
use rand::Rng;
use stereodrop::checks::{run_checks, GRADCHECK_TOL};
use stereodrop::disparity::soft_argmax_disp;
use stereodrop::metrics::psnr;
use stereodrop::rda::{attend_window, AttentionKind, RowWindow};
use stereodrop::synth::{generate, read_sample, write_sample, SceneSpec, StereoSample};
use stereodrop::train::{ablate, infer, Trainer};
use stereodrop::{Checkpoint, ConvGeom, Graph, Tensor, TrainConfig};

struct Outcome {
    hard_failures: usize,
}

impl Outcome {
    fn line(&mut self, id: &str, title: &str, pass: bool, detail: String, soft: bool) {
        let tag = if pass { "PASS" } else { "FAIL" };
        let kind = if soft { " (soft)" } else { "" };
        println!("{tag} {id}{kind} {title}: {detail}");
        if !pass && !soft {
            self.hard_failures += 1;
        }
    }
}

fn gradients() -> (bool, String) {
    let start = Instant::now();
    let seeds: Vec<u64> = (0..10).collect();
    let outcomes = match run_checks(None, &seeds) {
        Ok(o) => o,
        Err(e) => return (false, format!("error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let worst = outcomes.iter().map(|o| o.worst).fold(0.0, f64::max);
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed())
        .map(|o| format!("{}/{}#{}", o.module, o.name, o.seed))
        .collect();
    let targets = outcomes.len() / seeds.len();
    (
        failed.is_empty() && secs < 120.0,
        format!("{targets} targets x {} seeds, worst rel err {worst:.2e} (tol {GRADCHECK_TOL:e}), failed {failed:?}, {secs:.1}s (limit 120s)", seeds.len()),
    )
}

fn conv_cases(n: usize) -> f64 {
    let mut r = rng(11);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < n {
        let (stride, dil, pad) = (r.random_range(1..=2), r.random_range(1..=4), r.random_range(0..=4));
        let k = if r.random_bool(0.3) { 1 } else { 3 };
        let (h, w) = (r.random_range(1..10), r.random_range(1..10));
        let geom = ConvGeom::new(stride, dil, pad);
        if geom.out_len(h, k).is_none() || geom.out_len(w, k).is_none() {
            continue;
        }
        let (ci, co) = (r.random_range(1..4), r.random_range(1..4));
        let seed = 3 * done as u64;
        let x = randn(&[r.random_range(1..3), ci, h, w], seed);
        let kern = randn(&[co, ci, k, k], seed + 1);
        let b = randn(&[co], seed + 2);
        let mut g = Graph::new();
        let (xv, kv, bv) = (g.constant(x.clone()), g.constant(kern.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, kv, Some(bv), geom).unwrap();
        let want = conv_naive(&x, &kern, Some(b.data()), stride, dil, pad);
        worst = worst.max(g.value(y).max_abs_diff(&want).unwrap_or(f64::INFINITY));
        done += 1;
    }
    worst
}

fn upsample_cases(n: usize) -> f64 {
    let mut r = rng(12);
    (0..n)
        .map(|i| {
            let x = randn(&[r.random_range(1..3), r.random_range(1..4), r.random_range(1..7), r.random_range(1..7)], i as u64);
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let u = g.bilinear_upsample2x(xv).unwrap();
            g.value(u).max_abs_diff(&upsample_naive(&x)).unwrap_or(f64::INFINITY)
        })
        .fold(0.0, f64::max)
}

fn attention_cases(n: usize) -> f64 {
    let mut r = rng(13);
    let mut worst = 0.0f64;
    for case in 0..n as u64 {
        let (b, cq, cv) = (r.random_range(1..3), r.random_range(1..5), r.random_range(1..4));
        let (h, w) = (r.random_range(1..8), r.random_range(1..7));
        let rows = r.random_range(1..=h);
        let start = r.random_range(0..=h - rows);
        let scale = r.random_range(0.2..1.5);
        let q = randn(&[b, cq, h, w], 3 * case);
        let k = randn(&[b, cq, h, w], 3 * case + 1);
        let v = randn(&[b, cv, h, w], 3 * case + 2);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let (vals, scores) = attend_window(&mut g, qv, kv, vv, RowWindow { start, rows }, scale).unwrap();
        let cells = rows * w;
        for i in 0..b {
            let (ov, os) = window_attention_naive(&q, &k, &v, i, start, rows, scale);
            let gv = &g.value(vals).data()[i * cv * cells..(i + 1) * cv * cells];
            let gs = &g.value(scores).data()[i * cells * cells..(i + 1) * cells * cells];
            for (a, e) in gv.iter().zip(&ov).chain(gs.iter().zip(&os)) {
                worst = worst.max((a - e).abs());
            }
        }
    }
    worst
}

fn soft_argmax_cases(n: usize) -> f64 {
    let mut r = rng(14);
    let mut worst = 0.0f64;
    for case in 0..n as u64 {
        let (b, h, w) = (r.random_range(1..3), r.random_range(1..9), r.random_range(1..8));
        let rows = r.random_range(1..5);
        let stride = r.random_range(1..=rows);
        let wins = window_starts_naive(h, rows, stride);
        let mut g = Graph::new();
        let mut vars = Vec::new();
        let mut raw = Vec::new();
        let mut windows = Vec::new();
        for (i, &(start, rows)) in wins.iter().enumerate() {
            let cells = rows * w;
            let mut s = randn(&[b, cells, cells], 1000 * case + i as u64);
            for row in s.data_mut().chunks_mut(cells) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                row.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
            }
            vars.push(g.constant(s.clone()));
            raw.push(s);
            windows.push(RowWindow { start, rows });
        }
        let d = soft_argmax_disp(&mut g, &vars, &windows, h, w).unwrap();
        let d = g.value(d);
        for i in 0..b {
            let mut sum = vec![0.0; h * w];
            let mut count = vec![0usize; h];
            for (&(start, rows), s) in wins.iter().zip(&raw) {
                let cells = rows * w;
                let per = soft_argmax_naive(&s.data()[i * cells * cells..(i + 1) * cells * cells], rows, w);
                for (j, v) in per.iter().enumerate() {
                    sum[start * w + j] += v;
                }
                for row in start..start + rows {
                    count[row] += 1;
                }
            }
            for y in 0..h {
                for x in 0..w {
                    worst = worst.max((d.at4(i, 0, y, x) - sum[y * w + x] / count[y] as f64).abs());
                }
            }
        }
    }
    worst
}

fn oracles() -> (bool, String) {
    let start = Instant::now();
    let n = 60;
    let (conv, up, att, sa) = (conv_cases(n), upsample_cases(n), attention_cases(n), soft_argmax_cases(n));
    let secs = start.elapsed().as_secs_f64();
    let pass = conv <= 1e-12 && up <= 1e-12 && sa <= 1e-12 && att <= 1e-10 && secs < 60.0;
    (
        pass,
        format!("{n} cases each; conv {conv:.1e}, upsample {up:.1e}, soft-argmax {sa:.1e} (tol 1e-12), attention {att:.1e} (tol 1e-10), {secs:.2}s (limit 60s)"),
    )
}

fn formation() -> (bool, String) {
    let start = Instant::now();
    let (mut inexact, mut warp_bad, mut valid, mut worst_warp) = (0usize, 0usize, 0usize, 0.0f32);
    for seed in 0..20 {
        let s = generate(&SceneSpec { seed, ..SceneSpec::default() }, 7000 + seed).unwrap();
        for (i, o, t, r) in [
            (&s.input_l, &s.clean_l, &s.trans_l, &s.drop_l),
            (&s.input_r, &s.clean_r, &s.trans_r, &s.drop_r),
        ] {
            for k in 0..i.numel() {
                let (o, t, r) = (o.data()[k], t.data()[k], r.data()[k]);
                if i.data()[k] != (1.0 - t) * o + t * r {
                    inexact += 1;
                }
            }
        }
        let (h, w) = (s.height(), s.width());
        for (disp, mask, from, to, sign) in [
            (&s.disp_l, &s.mask_l, &s.clean_l, &s.clean_r, -1i64),
            (&s.disp_r, &s.mask_r, &s.clean_r, &s.clean_l, 1),
        ] {
            for y in 0..h {
                for x in 0..w {
                    if mask.at4(0, 0, y, x) != 1.0 {
                        continue;
                    }
                    valid += 1;
                    let xo = x as i64 + sign * disp.at4(0, 0, y, x) as i64;
                    if !(0..w as i64).contains(&xo) {
                        warp_bad += 1;
                        continue;
                    }
                    for c in 0..3 {
                        let e = (from.at4(0, c, y, x) - to.at4(0, c, y, xo as usize)).abs();
                        worst_warp = worst_warp.max(e);
                        warp_bad += usize::from(e > 1e-6);
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        inexact == 0 && warp_bad == 0 && secs < 60.0,
        format!("20 scenes; formation mismatches {inexact}; warp violations {warp_bad} over {valid} mask-true pixels (max err {worst_warp:.1e}, tol 1e-6); {secs:.2}s (limit 60s)"),
    )
}

fn receptive_field() -> (bool, String) {
    let start = Instant::now();
    let cheb = |o: &[(i64, i64)]| o.iter().map(|(a, b)| a.abs().max(b.abs())).max().unwrap_or(-1);
    let (mut rda_ok, mut typ_ok) = (true, true);
    let (mut rda_r, mut typ_r) = (0, 0);
    for seed in 0..3 {
        let rda = query_response_offsets(AttentionKind::Rda, seed);
        let typ = query_response_offsets(AttentionKind::Typical, seed);
        rda_r = cheb(&rda);
        typ_r = cheb(&typ);
        rda_ok &= rda_r == 4 && rda.contains(&(4, 4)) && rda.contains(&(0, -4));
        typ_ok &= typ == vec![(0, 0)];
    }
    let secs = start.elapsed().as_secs_f64();
    (
        rda_ok && typ_ok && secs < 10.0,
        format!("RDA query radius {rda_r}, typical query radius {typ_r}; {secs:.2}s (limit 10s)"),
    )
}

fn shifts() -> (bool, String) {
    let start = Instant::now();
    let fr: Vec<f64> = [1, 2, 4].iter().map(|&s| shift_recovery(s, 0.1)).collect();
    let secs = start.elapsed().as_secs_f64();
    (
        fr.iter().all(|&f| f >= 0.99) && secs < 30.0,
        format!("fraction within 0.1 cells for s=1,2,4: {:.3}/{:.3}/{:.3} (need 0.99); {secs:.2}s (limit 30s)", fr[0], fr[1], fr[2]),
    )
}

fn overfit_data() -> Vec<StereoSample> {
    (0..4).map(|i| generate(&SceneSpec { seed: i, ..SceneSpec::default() }, 100 + i).unwrap()).collect()
}

fn overfit_config(seed: u64, steps: usize) -> TrainConfig {
    TrainConfig {
        seed,
        lr: 1e-3,
        batch: 4,
        epochs: 1_000_000,
        augment: false,
        deterministic: true,
        max_steps: Some(steps),
        ..TrainConfig::default()
    }
}

fn overfit() -> (bool, String) {
    let start = Instant::now();
    let data = overfit_data();
    let steps = 800;
    let mut t = Trainer::new(overfit_config(0, steps)).unwrap();
    let mut lp = Vec::new();
    if let Err(e) = t.run(&data, |s| Ok(lp.push(s.loss_p)), |_| Ok(())) {
        return (false, format!("training error: {e}"));
    }
    let ckpt = t.checkpoint();
    let (mut pin, mut pout) = (0.0, 0.0);
    for s in &data {
        let o = infer(&ckpt, &s.input_l, &s.input_r).unwrap();
        pin += psnr(&s.input_l, &s.clean_l).unwrap() + psnr(&s.input_r, &s.clean_r).unwrap();
        pout += psnr(&o.out_l, &s.clean_l).unwrap() + psnr(&o.out_r, &s.clean_r).unwrap();
    }
    let (pin, pout) = (pin / 8.0, pout / 8.0);
    let drop = 1.0 - lp[lp.len() - 1] / lp[0];
    let secs = start.elapsed().as_secs_f64();
    (
        drop >= 0.8 && pout - pin >= 2.0 && secs < 900.0,
        format!(
            "{steps} steps; L_P {:.4} -> {:.4} (fell {:.1}%, need 80%); PSNR input {pin:.2} dB, output {pout:.2} dB (gain {:+.2}, need +2); {secs:.0}s (limit 900s)",
            lp[0],
            lp[lp.len() - 1],
            100.0 * drop,
            pout - pin
        ),
    )
}

fn monotone_start() -> (bool, String) {
    let data = overfit_data();
    let (mut ok, mut stepwise) = (0, 0);
    let mut detail = Vec::new();
    for seed in 1..=5 {
        let mut t = Trainer::new(overfit_config(seed, 50)).unwrap();
        let mut l = Vec::new();
        t.run(&data, |s| Ok(l.push(s.loss_total)), |_| Ok(())).unwrap();
        let pass = l[49] <= l[0];
        ok += usize::from(pass);
        stepwise += usize::from(l.windows(2).all(|w| w[1] <= w[0]));
        detail.push(format!("{:.3}->{:.3}", l[0], l[49]));
    }
    (ok >= 4, format!("L(step 50) <= L(step 1) in {ok}/5 seeds (need 4): {}; step-by-step non-increasing in {stepwise}/5", detail.join(", ")))
}

fn variant_ordering() -> (bool, String) {
    let start = Instant::now();
    let scene = |seed: u64| generate(&SceneSpec { seed, ..SceneSpec::default() }, seed + 50_000).unwrap();
    let train_set: Vec<_> = (0..40).map(|i| scene(10_000 + i)).collect();
    let test_set: Vec<_> = (0..10).map(|i| scene(20_000 + i)).collect();
    let base = TrainConfig { lr: 1e-3, epochs: 60, ..TrainConfig::default() };
    let seeds = [1, 2, 3, 4, 5];
    let rows = match ablate(&base, &["ours", "mono", "TTT"], &seeds, &train_set, &test_set, |r| {
        eprintln!("  {}", r.csv_line())
    }) {
        Ok(r) => r,
        Err(e) => return (false, format!("error: {e}")),
    };
    let psnr_of = |v: &str, s: u64| rows.iter().find(|r| r.variant == v && r.seed == s).unwrap().psnr;
    let mut wins = 0;
    let mut cells = Vec::new();
    for s in seeds {
        let (o, m, t) = (psnr_of("ours", s), psnr_of("mono", s), psnr_of("TTT", s));
        wins += usize::from(o >= m && o >= t);
        cells.push(format!("seed {s}: ours {o:.2} mono {m:.2} TTT {t:.2}"));
    }
    let secs = start.elapsed().as_secs_f64();
    (
        wins >= 4 && secs < 7200.0,
        format!("default >= mono and >= TTT in {wins}/5 seeds (need 4); {}; {secs:.0}s (limit 7200s)", cells.join("; ")),
    )
}

fn determinism() -> (bool, String) {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let read_all = |d: &std::path::Path| {
        let mut files: Vec<_> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files.iter().map(|f| std::fs::read(f).unwrap()).collect::<Vec<_>>()
    };
    let spec = SceneSpec { seed: 42, ..SceneSpec::default() };
    let (a, b) = (generate(&spec, 9).unwrap(), generate(&spec, 9).unwrap());
    write_sample(&a, &dir.path().join("a")).unwrap();
    write_sample(&b, &dir.path().join("b")).unwrap();
    let samples_same = read_all(&dir.path().join("a")) == read_all(&dir.path().join("b"));
    let back = read_sample(&dir.path().join("a")).unwrap();
    write_sample(&back, &dir.path().join("c")).unwrap();
    let sample_round_trip = back == a && read_all(&dir.path().join("c")) == read_all(&dir.path().join("a"));

    let cfg = TrainConfig {
        width: 32,
        height: 16,
        stem: 4,
        channels: [4, 4, 4],
        batch: 2,
        epochs: 2,
        deterministic: true,
        ..TrainConfig::default()
    };
    let data: Vec<_> = (0..4)
        .map(|i| generate(&SceneSpec { seed: i, width: 32, height: 16, disparity: (1, 4), ..SceneSpec::default() }, i).unwrap())
        .collect();
    let trained = || {
        let mut t = Trainer::new(cfg.clone()).unwrap();
        t.run(&data, |_| Ok(()), |_| Ok(())).unwrap();
        t.checkpoint()
    };
    let (c1, c2) = (trained(), trained());
    let bytes = c1.encode().unwrap();
    let ckpt_same = bytes == c2.encode().unwrap();
    let path = dir.path().join("m.ckpt");
    c1.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let ckpt_round_trip = loaded == c1 && loaded.encode().unwrap() == bytes;
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let i1 = infer(&c1, &data[0].input_l, &data[0].input_r).unwrap();
    let i2 = infer(&loaded, &data[0].input_l, &data[0].input_r).unwrap();
    let infer_same = [(&i1.out_l, &i2.out_l), (&i1.out_r, &i2.out_r), (&i1.disp_l, &i2.disp_l)]
        .iter()
        .all(|(x, y)| bits(x) == bits(y));
    let secs = start.elapsed().as_secs_f64();
    (
        samples_same && sample_round_trip && ckpt_same && ckpt_round_trip && infer_same && secs < 60.0,
        format!(
            "samples identical {samples_same}, sample round trip {sample_round_trip}, checkpoints identical {ckpt_same}, checkpoint round trip {ckpt_round_trip}, inference identical {infer_same}; {secs:.2}s (limit 60s)"
        ),
    )
}

fn main() {
    let full = std::env::var("STEREODROP_FULL_ACCEPTANCE").is_ok_and(|v| v == "1");
    let mut out = Outcome { hard_failures: 0 };
    println!("acceptance criteria");
    let (p, d) = gradients();
    out.line("1", "gradient integrity", p, d, false);
    let (p, d) = oracles();
    out.line("2", "oracle equivalence", p, d, false);
    let (p, d) = formation();
    out.line("3", "formation model and warp consistency", p, d, false);
    let (p, d) = receptive_field();
    out.line("4", "receptive-field separation", p, d, false);
    let (p, d) = shifts();
    out.line("5", "shift recovery", p, d, false);
    let (p, d) = overfit();
    out.line("6", "overfit sanity", p, d, false);
    if full {
        let (p, d) = variant_ordering();
        out.line("7", "variant ordering", p, d, true);
    } else {
        println!("SKIP 7 (soft) variant ordering: long run, set STEREODROP_FULL_ACCEPTANCE=1");
    }
    let (p, d) = determinism();
    out.line("8", "determinism and formats", p, d, false);
    let (p, d) = monotone_start();
    out.line("invariant", "early-loss monotonicity", p, d, true);
    if out.hard_failures > 0 {
        println!("{} criteria failed", out.hard_failures);
        std::process::exit(1);
    }
}
