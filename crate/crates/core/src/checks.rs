//! Finite-difference gradient checks for every operator and composed block,
//! in 64-bit with small random instances. Each target is a function of a seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::ConvGeom;
use crate::decoder::Decoder;
use crate::disparity::{inject_disparity, soft_argmax_disp, DisparityMerge};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::gradcheck::{gradcheck, GradReport};
use crate::graph::{Graph, Var};
use crate::losses::{
    attention_consistency_loss, perceptual_loss, total_loss, CoarseTarget, FeatureExtractor, LossConfig,
};
use crate::train::{objective, Prepared};
use crate::model::{ModelConfig, StereoNet};
use crate::params::{Bound, ParamStore};
use crate::rda::{attend_window, AttentionBlock, AttentionConfig, AttentionKind, RowWindow};
use crate::tensor::Tensor;
use crate::variant::VariantSpec;

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 10;

pub struct CheckTarget {
    pub module: &'static str,
    pub name: &'static str,
    run: fn(u64) -> Result<GradReport>,
}

impl CheckTarget {
    pub fn run(&self, seed: u64) -> Result<GradReport> {
        (self.run)(seed)
    }
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub module: &'static str,
    pub name: &'static str,
    pub seed: u64,
    pub worst: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst <= GRADCHECK_TOL
    }
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ salt)
}

fn randn(shape: &[usize], seed: u64, salt: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed, salt))
}

/// Values bounded away from zero (magnitude in [0.2, 1.2]) so kinks of
/// relu/abs sit far outside the finite-difference step.
fn off_kink(shape: &[usize], seed: u64, salt: u64) -> Tensor<f64> {
    let u = Tensor::<f64>::uniform(shape, -1.0, 1.0, &mut rng(seed, salt));
    u.map(|v| v.signum() * (0.2 + v.abs()))
}

/// `sum(x * w)` with a fixed random `w`: a dense, generic scalar readout.
fn readout(g: &mut Graph<f64>, x: Var, seed: u64, salt: u64) -> Result<Var> {
    let w = g.constant(randn(g.shape(x), seed, salt ^ 0xabcd));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn readouts(g: &mut Graph<f64>, xs: &[Var], seed: u64) -> Result<Var> {
    let mut acc = readout(g, xs[0], seed, 900)?;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        let r = readout(g, x, seed, 900 + i as u64)?;
        acc = g.add(acc, r)?;
    }
    Ok(acc)
}

/// Checks a parametrised block: `extra` inputs come first, then every
/// parameter of `store` in name order.
fn check_with_params(
    store: &ParamStore<f64>,
    extra: Vec<Tensor<f64>>,
    build: impl Fn(&mut Graph<f64>, &Bound, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let n_extra = extra.len();
    let mut inputs = extra;
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    gradcheck(
        |g, v| {
            let bound = Bound::from_pairs(names.iter().map(String::as_str).zip(v[n_extra..].iter().copied()));
            build(g, &bound, &v[..n_extra])
        },
        &inputs,
        GRADCHECK_EPS,
    )
}

/// Redraws biases and zero-initialised kernels so every path carries a
/// gradient.
fn perturbed_biases(mut store: ParamStore<f64>, seed: u64) -> ParamStore<f64> {
    let mut r = rng(seed, 77);
    for (name, t) in store.iter_mut() {
        if name.ends_with(".b") || t.data().iter().all(|v| *v == 0.0) {
            *t = Tensor::randn(t.shape(), 0.3, &mut r);
        }
    }
    store
}

// ---- operators -------------------------------------------------------------

fn op_add(seed: u64) -> Result<GradReport> {
    let s = [2, 3, 4];
    gradcheck(
        |g, v| {
            let y = g.add(v[0], v[1])?;
            readout(g, y, seed, 1)
        },
        &[randn(&s, seed, 1), randn(&s, seed, 2)],
        GRADCHECK_EPS,
    )
}

fn op_sub(seed: u64) -> Result<GradReport> {
    let s = [3, 5];
    gradcheck(
        |g, v| {
            let y = g.sub(v[0], v[1])?;
            readout(g, y, seed, 1)
        },
        &[randn(&s, seed, 1), randn(&s, seed, 2)],
        GRADCHECK_EPS,
    )
}

fn op_mul(seed: u64) -> Result<GradReport> {
    let s = [2, 2, 3, 3];
    gradcheck(
        |g, v| {
            let y = g.mul(v[0], v[1])?;
            readout(g, y, seed, 1)
        },
        &[randn(&s, seed, 1), randn(&s, seed, 2)],
        GRADCHECK_EPS,
    )
}

fn op_scale_sum_mean(seed: u64) -> Result<GradReport> {
    gradcheck(
        |g, v| {
            let y = g.scalar_mul(v[0], -1.7);
            let sq = g.mul(y, v[0])?;
            let a = g.sum(sq);
            let b = g.mean(sq);
            let b = g.scalar_mul(b, 3.0);
            g.add(a, b)
        },
        &[randn(&[4, 6], seed, 1)],
        GRADCHECK_EPS,
    )
}

fn op_relu(seed: u64) -> Result<GradReport> {
    gradcheck(
        |g, v| {
            let y = g.relu(v[0]);
            readout(g, y, seed, 1)
        },
        &[off_kink(&[3, 7], seed, 1)],
        GRADCHECK_EPS,
    )
}

fn op_abs(seed: u64) -> Result<GradReport> {
    gradcheck(
        |g, v| {
            let y = g.abs(v[0]);
            readout(g, y, seed, 1)
        },
        &[off_kink(&[3, 7], seed, 1)],
        GRADCHECK_EPS,
    )
}

fn op_conv(seed: u64) -> Result<GradReport> {
    let geoms = [ConvGeom::new(1, 1, 1), ConvGeom::new(2, 1, 1), ConvGeom::new(1, 2, 2), ConvGeom::new(2, 4, 3)];
    let geom = geoms[(seed % 4) as usize];
    gradcheck(
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), geom)?;
            readout(g, y, seed, 1)
        },
        &[randn(&[2, 3, 9, 8], seed, 1), randn(&[4, 3, 3, 3], seed, 2), randn(&[4], seed, 3)],
        GRADCHECK_EPS,
    )
}

fn op_conv_pointwise(seed: u64) -> Result<GradReport> {
    gradcheck(
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, ConvGeom::new(1, 1, 0))?;
            readout(g, y, seed, 1)
        },
        &[randn(&[1, 5, 4, 6], seed, 1), randn(&[3, 5, 1, 1], seed, 2)],
        GRADCHECK_EPS,
    )
}

fn op_matmul(seed: u64) -> Result<GradReport> {
    let (ta, tb) = ((seed & 1) == 1, (seed & 2) == 2);
    let a = if ta { [2, 4, 3] } else { [2, 3, 4] };
    let b = if tb { [2, 5, 4] } else { [2, 4, 5] };
    gradcheck(
        |g, v| {
            let y = g.matmul_t(v[0], v[1], ta, tb)?;
            readout(g, y, seed, 1)
        },
        &[randn(&a, seed, 1), randn(&b, seed, 2)],
        GRADCHECK_EPS,
    )
}

fn op_softmax(seed: u64) -> Result<GradReport> {
    let axis = (seed % 3) as usize;
    gradcheck(
        |g, v| {
            let y = g.softmax(v[0], axis)?;
            readout(g, y, seed, 1)
        },
        &[randn(&[3, 4, 5], seed, 1)],
        GRADCHECK_EPS,
    )
}

fn op_reshape_concat_slice_place(seed: u64) -> Result<GradReport> {
    gradcheck(
        |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let s = g.slice(c, 2, 1, 3)?;
            let p = g.place(s, 2, 2, 6)?;
            let r = g.reshape(p, &[3, 30])?;
            readout(g, r, seed, 1)
        },
        &[randn(&[1, 2, 4, 3], seed, 1), randn(&[1, 3, 4, 3], seed, 2)],
        GRADCHECK_EPS,
    )
}

fn op_upsample(seed: u64) -> Result<GradReport> {
    gradcheck(
        |g, v| {
            let y = g.bilinear_upsample2x(v[0])?;
            readout(g, y, seed, 1)
        },
        &[randn(&[1, 2, 3, 5], seed, 1)],
        GRADCHECK_EPS,
    )
}

fn op_l1_mean(seed: u64) -> Result<GradReport> {
    let n = 24;
    let mask: Vec<bool> = (0..n).map(|i| (i as u64 * 7 + seed) % 3 != 0).collect();
    let a = off_kink(&[1, 1, 4, 6], seed, 1);
    let b = Tensor::zeros(&[1, 1, 4, 6]);
    gradcheck(
        |g, v| {
            let d = g.add(v[0], v[1])?;
            let zero = g.constant(b.clone());
            g.l1_mean(d, zero, Some(&mask))
        },
        &[a, Tensor::zeros(&[1, 1, 4, 6])],
        GRADCHECK_EPS,
    )
}

// ---- blocks ----------------------------------------------------------------

fn block_attend_window(seed: u64) -> Result<GradReport> {
    let w = RowWindow { start: 1, rows: 3 };
    gradcheck(
        |g, v| {
            let (out, scores) = attend_window(g, v[0], v[1], v[2], w, 0.5)?;
            readouts(g, &[out, scores], seed)
        },
        &[randn(&[1, 3, 5, 4], seed, 1), randn(&[1, 3, 5, 4], seed, 2), randn(&[1, 2, 5, 4], seed, 3)],
        GRADCHECK_EPS,
    )
}

fn attention_check(seed: u64, kind: AttentionKind, value_dilated: bool) -> Result<GradReport> {
    let mut cfg = AttentionConfig::new(kind, 3);
    cfg.value_dilated = value_dilated;
    let block = AttentionBlock::new("att", cfg);
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng(seed, 5));
    let store = perturbed_biases(store, seed);
    check_with_params(&store, vec![randn(&[1, 3, 6, 5], seed, 1), randn(&[1, 3, 6, 5], seed, 2)], |g, p, v| {
        let r = block.forward(g, p, v[0], v[1])?;
        let mut outs = vec![r.refined];
        outs.extend(r.scores);
        readouts(g, &outs, seed)
    })
}

fn block_rda(seed: u64) -> Result<GradReport> {
    attention_check(seed, AttentionKind::Rda, false)
}

fn block_rda_value_dilated(seed: u64) -> Result<GradReport> {
    attention_check(seed, AttentionKind::Rda, true)
}

fn block_typical(seed: u64) -> Result<GradReport> {
    attention_check(seed, AttentionKind::Typical, false)
}

/// Soft-argmax through real attention scores, then the merge with an
/// upsampled coarser map. Scores are scaled so the expected column stays
/// well away from each query's own column (no kink of `|.|` nearby).
fn block_disparity_merge(seed: u64) -> Result<GradReport> {
    let (h, w) = (6, 6);
    let merge = DisparityMerge::new("m");
    let mut store = ParamStore::new();
    merge.init(&mut store, &mut rng(seed, 5));
    let store = perturbed_biases(store, seed);
    let windows = crate::rda::enumerate_windows(h, 3, 2);
    // logits favour column (x + 2) mod w, keeping E[col] away from x
    let cells = 3 * w;
    let bias = Tensor::from_fn(&[1, cells, cells], |i| {
        let (qi, ki) = (i / cells, i % cells);
        let (qx, kx) = (qi % w, ki % w);
        let target = if qx + 2 < w { qx + 2 } else { qx - 2 };
        if kx == target {
            4.0
        } else {
            0.0
        }
    });
    let extra = vec![randn(&[1, 2, h, w], seed, 1), randn(&[1, 2, h, w], seed, 2), randn(&[1, 1, h / 2, w / 2], seed, 3)];
    check_with_params(&store, extra, |g, p, v| {
        let b = g.constant(bias.clone());
        let mut scores = Vec::new();
        for win in &windows {
            let q = g.slice(v[0], 2, win.start, win.rows)?;
            let k = g.slice(v[1], 2, win.start, win.rows)?;
            let q = g.reshape(q, &[1, 2, cells])?;
            let k = g.reshape(k, &[1, 2, cells])?;
            let logits = g.matmul_t(q, k, true, false)?;
            let logits = g.scalar_mul(logits, 0.2);
            let logits = g.add(logits, b)?;
            scores.push(g.softmax(logits, 2)?);
        }
        let d = soft_argmax_disp(g, &scores, &windows, h, w)?;
        let merged = merge.merge(g, p, v[2], d)?;
        readouts(g, &[d, merged], seed)
    })
}

fn block_inject(seed: u64) -> Result<GradReport> {
    gradcheck(
        |g, v| {
            let y = inject_disparity(g, v[0], Some(v[1]))?;
            readout(g, y, seed, 1)
        },
        &[randn(&[1, 2, 4, 6], seed, 1), randn(&[1, 1, 2, 3], seed, 2)],
        GRADCHECK_EPS,
    )
}

fn block_aggregate_step(seed: u64) -> Result<GradReport> {
    let dec = Decoder::new(3, [2, 2, 2]);
    let mut full = ParamStore::new();
    dec.init(&mut full, &mut rng(seed, 5));
    let full = perturbed_biases(full, seed);
    let mut store = ParamStore::new();
    for (name, t) in full.iter().filter(|(n, _)| n.starts_with("dec.s1.")) {
        store.insert(name, t.clone());
    }
    let extra = vec![randn(&[1, 3, 3, 4], seed, 1), randn(&[1, 2, 3, 4], seed, 2)];
    check_with_params(&store, extra, |g, p, v| {
        let y = dec.aggregate_step(g, p, 1, v[0], v[1])?;
        readout(g, y, seed, 1)
    })
}

fn block_encoder(seed: u64) -> Result<GradReport> {
    let enc = Encoder::new(EncoderConfig {
        stem: 2,
        channels: [2, 3, 3],
    });
    let mut store = ParamStore::new();
    enc.init(&mut store, &mut rng(seed, 5));
    let store = perturbed_biases(store, seed);
    check_with_params(&store, vec![randn(&[1, 3, 16, 16], seed, 1)], |g, p, v| {
        let f = enc.encode(g, p, v[0])?;
        readouts(g, &f.levels, seed)
    })
}

fn small_extractor() -> FeatureExtractor {
    FeatureExtractor { channels: [2, 3, 3, 2] }
}

fn loss_perceptual(seed: u64) -> Result<GradReport> {
    let ext = small_extractor();
    let weights: ParamStore<f64> = ext.weights(seed);
    let img = |salt| Tensor::<f64>::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng(seed, salt));
    let lambdas = [1.0, 0.5, 0.4, 1.0];
    let (cl, cr) = (img(3), img(4));
    gradcheck(
        |g, v| {
            let w = weights.bind(g, false);
            let (a, b) = (g.constant(cl.clone()), g.constant(cr.clone()));
            perceptual_loss(g, &ext, &w, v[0], v[1], a, b, &lambdas)
        },
        &[img(1), img(2)],
        GRADCHECK_EPS,
    )
}

fn loss_consistency(seed: u64) -> Result<GradReport> {
    let (h, w) = (3, 5);
    let target = |salt| {
        let d = Tensor::<f64>::uniform(&[1, 1, h, w], 0.0, 3.0, &mut rng(seed, salt));
        let mask = (0..h * w).map(|i| (i as u64 + seed + salt) % 4 != 0).collect();
        CoarseTarget { disparity: d, mask }
    };
    let (tl, tr) = (target(1), target(2));
    // predictions sit 0.2..1.2 away from the targets on either side
    let pred = |t: &CoarseTarget<f64>, salt| {
        let off = off_kink(&[1, 1, h, w], seed, salt);
        Tensor::from_fn(&[1, 1, h, w], |i| t.disparity.data()[i] + off.data()[i])
    };
    gradcheck(
        |g, v| {
            let lc = attention_consistency_loss(g, v[0], v[1], &tl, &tr)?;
            let lp = g.mul(v[2], v[2])?;
            let lp = g.sum(lp);
            total_loss(g, lp, lc, 0.7)
        },
        &[pred(&tl, 3), pred(&tr, 4), randn(&[2], seed, 5)],
        GRADCHECK_EPS,
    )
}

/// `L_P + alpha L_C` of the whole network on a 16 x 32 pair with narrow
/// layers, with respect to every model parameter.
fn model_total_loss(seed: u64) -> Result<GradReport> {
    let net = StereoNet::new(ModelConfig {
        encoder: EncoderConfig {
            stem: 2,
            channels: [2, 2, 2],
        },
        variant: VariantSpec::default(),
    });
    let store = perturbed_biases(net.init_params::<f64>(seed), seed);
    let ext = small_extractor();
    let ext_weights: ParamStore<f64> = ext.weights(seed);
    let img = |salt| Tensor::<f64>::uniform(&[1, 3, 16, 32], 0.0, 1.0, &mut rng(seed, salt));
    let target = |salt| CoarseTarget {
        disparity: Tensor::<f64>::uniform(&[1, 1, 4, 8], 0.0, 3.0, &mut rng(seed, salt)),
        mask: (0..32).map(|i| (i + salt as usize) % 5 != 0).collect(),
    };
    let sample = Prepared {
        input_l: img(1),
        input_r: img(2),
        clean_l: img(3),
        clean_r: img(4),
        targets: Some((target(5), target(6))),
    };
    let loss = LossConfig {
        alpha: 0.5,
        ..LossConfig::default()
    };
    check_with_params(&store, Vec::new(), |g, p, _| {
        let ew = ext_weights.bind(g, false);
        Ok(objective(g, &net, p, &ext, &ew, &sample, &loss)?.total)
    })
}

pub fn targets() -> Vec<CheckTarget> {
    macro_rules! t {
        ($m:literal, $n:literal, $f:ident) => {
            CheckTarget { module: $m, name: $n, run: $f }
        };
    }
    vec![
        t!("diffcore", "add", op_add),
        t!("diffcore", "sub", op_sub),
        t!("diffcore", "mul", op_mul),
        t!("diffcore", "scale_sum_mean", op_scale_sum_mean),
        t!("diffcore", "relu", op_relu),
        t!("diffcore", "abs", op_abs),
        t!("diffcore", "conv2d", op_conv),
        t!("diffcore", "conv2d_pointwise", op_conv_pointwise),
        t!("diffcore", "matmul", op_matmul),
        t!("diffcore", "softmax", op_softmax),
        t!("diffcore", "concat_slice_place_reshape", op_reshape_concat_slice_place),
        t!("diffcore", "bilinear_upsample2x", op_upsample),
        t!("diffcore", "l1_mean", op_l1_mean),
        t!("encoder", "encode", block_encoder),
        t!("rda", "attend_window", block_attend_window),
        t!("rda", "rda_forward", block_rda),
        t!("rda", "rda_forward_value_dilated", block_rda_value_dilated),
        t!("rda", "typical_forward", block_typical),
        t!("disparity", "soft_argmax_merge", block_disparity_merge),
        t!("disparity", "inject", block_inject),
        t!("decoder", "aggregate_step", block_aggregate_step),
        t!("losses", "perceptual", loss_perceptual),
        t!("losses", "consistency_total", loss_consistency),
        t!("model", "total_loss", model_total_loss),
    ]
}

pub fn modules() -> Vec<&'static str> {
    let mut m: Vec<&str> = targets().iter().map(|t| t.module).collect();
    m.dedup();
    m
}

/// Runs every target of `module` (all when `None`) for each seed.
pub fn run_checks(module: Option<&str>, seeds: &[u64]) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for t in targets().iter().filter(|t| module.is_none_or(|m| m == t.module)) {
        for &seed in seeds {
            let report = t.run(seed)?;
            out.push(CheckOutcome {
                module: t.module,
                name: t.name,
                seed,
                worst: report.worst(),
            });
        }
    }
    Ok(out)
}
