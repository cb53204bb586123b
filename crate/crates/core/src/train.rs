//! Optimisation loop: Adam, flip augmentation, the per-sample objective,
//! checkpointed training and inference.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{AdamState, Checkpoint};
use crate::config::TrainConfig;
use crate::encoder::LEVEL_STRIDES;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{
    attention_consistency_loss, downsample_target, perceptual_loss, total_loss, CoarseTarget, FeatureExtractor,
    LossConfig,
};
use crate::metrics::{EvalReport, EvalRow};
use crate::model::{StereoNet, StereoOutput};
use crate::params::{Bound, ParamStore};
use crate::synth::StereoSample;
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update. Every gradient is checked before any
/// parameter is touched, so a non-finite gradient leaves the state intact.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    m: &mut ParamStore<T>,
    v: &mut ParamStore<T>,
    t: u64,
    lr: f64,
) -> Result<()> {
    assert!(t >= 1, "adam step counter starts at 1");
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid("adam_step", format!("no gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_step", g.shape(), p.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { name: name.to_string() });
        }
    }
    let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
    let c1 = T::one() - T::lit(BETA1.powi(t as i32));
    let c2 = T::one() - T::lit(BETA2.powi(t as i32));
    let (lr, eps) = (T::lit(lr), T::lit(ADAM_EPS));
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked above");
        if !m.contains(name) {
            m.insert(name, Tensor::zeros(p.shape()));
            v.insert(name, Tensor::zeros(p.shape()));
        }
        let mt = m.get_mut(name).unwrap().data_mut();
        let vt = v.get_mut(name).unwrap().data_mut();
        for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            mt[i] = b1 * mt[i] + (T::one() - b1) * gi;
            vt[i] = b2 * vt[i] + (T::one() - b2) * gi * gi;
            let mhat = mt[i] / c1;
            let vhat = vt[i] / c2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Random vertical and horizontal flips, each with probability 1/2.
pub fn augment(sample: &StereoSample, rng: &mut impl Rng) -> StereoSample {
    let (v, h) = (rng.random_bool(0.5), rng.random_bool(0.5));
    let mut out = if v { sample.flip_vertical() } else { sample.clone() };
    if h {
        out = out.flip_horizontal();
    }
    out
}

/// Graph-ready tensors of one sample.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub input_l: Tensor<T>,
    pub input_r: Tensor<T>,
    pub clean_l: Tensor<T>,
    pub clean_r: Tensor<T>,
    /// `None` for the single-view variant.
    pub targets: Option<(CoarseTarget<T>, CoarseTarget<T>)>,
}

impl<T: Real> Prepared<T> {
    /// With `mono`, the left view stands in for both inputs and both targets.
    pub fn new(s: &StereoSample, mono: bool) -> Result<Self> {
        let f = LEVEL_STRIDES[0];
        if mono {
            return Ok(Prepared {
                input_l: s.input_l.cast(),
                input_r: s.input_l.cast(),
                clean_l: s.clean_l.cast(),
                clean_r: s.clean_l.cast(),
                targets: None,
            });
        }
        Ok(Prepared {
            input_l: s.input_l.cast(),
            input_r: s.input_r.cast(),
            clean_l: s.clean_l.cast(),
            clean_r: s.clean_r.cast(),
            targets: Some((downsample_target(&s.disp_l, &s.mask_l, f)?, downsample_target(&s.disp_r, &s.mask_r, f)?)),
        })
    }
}

/// Graph handles of the objective.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub loss_p: Var,
    pub loss_c: Var,
    pub total: Var,
    pub output: StereoOutput,
}

/// Builds `L_P + alpha L_C` for one sample. Without targets `L_C` is zero.
pub fn objective<T: Real>(
    g: &mut Graph<T>,
    net: &StereoNet,
    p: &Bound,
    extractor: &FeatureExtractor,
    ext_weights: &Bound,
    s: &Prepared<T>,
    loss: &LossConfig,
) -> Result<LossVars> {
    let il = g.constant(s.input_l.clone());
    let ir = g.constant(s.input_r.clone());
    let cl = g.constant(s.clean_l.clone());
    let cr = g.constant(s.clean_r.clone());
    let output = net.forward(g, p, il, ir)?;
    let loss_p = perceptual_loss(g, extractor, ext_weights, output.out_l, output.out_r, cl, cr, &loss.lambdas)?;
    let loss_c = match &s.targets {
        Some((tl, tr)) => attention_consistency_loss(g, output.disp_l[0], output.disp_r[0], tl, tr)?,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    let total = total_loss(g, loss_p, loss_c, loss.alpha)?;
    Ok(LossVars {
        loss_p,
        loss_c,
        total,
        output,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss_p: f64,
    pub loss_c: f64,
    pub loss_total: f64,
}

pub const METRICS_HEADER: &str = "step,epoch,lr,loss_p,loss_c,loss_total";

impl StepStats {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:e},{:.9e},{:.9e},{:.9e}",
            self.step, self.epoch, self.lr, self.loss_p, self.loss_c, self.loss_total
        )
    }
}

pub fn metrics_csv(stats: &[StepStats]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for s in stats {
        let _ = writeln!(out, "{}", s.csv_line());
    }
    out
}

/// Loss values and parameter gradients of one sample.
struct SampleGrad {
    loss_p: f64,
    loss_c: f64,
    total: f64,
    grads: ParamStore<f32>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub net: StereoNet,
    pub extractor: FeatureExtractor,
    pub ext_weights: ParamStore<f32>,
    loss: LossConfig,
    mono: bool,
    pub params: ParamStore<f32>,
    pub adam: AdamState,
    pub epoch: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = StereoNet::new(config.model_config()?);
        let params = net.init_params(config.seed);
        Self::assemble(config, net, params, AdamState::default(), 0)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let net = StereoNet::new(ckpt.config.model_config()?);
        check_params(&net, &ckpt.params)?;
        let extractor = FeatureExtractor::default();
        let expected = extractor.weights::<f32>(ckpt.config.extractor_seed);
        if ckpt.extractor.names().ne(expected.names()) {
            return Err(Error::Config("checkpoint extractor weights do not match the extractor layout".into()));
        }
        let mut t = Self::assemble(ckpt.config, net, ckpt.params, ckpt.adam, ckpt.epoch)?;
        t.ext_weights = ckpt.extractor;
        Ok(t)
    }

    fn assemble(
        config: TrainConfig,
        net: StereoNet,
        params: ParamStore<f32>,
        adam: AdamState,
        epoch: u64,
    ) -> Result<Self> {
        let extractor = FeatureExtractor::default();
        let loss = config.loss_config();
        Ok(Trainer {
            ext_weights: extractor.weights(loss.extractor_seed),
            mono: net.cfg.variant.mono,
            loss,
            extractor,
            net,
            params,
            adam,
            epoch,
            config,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            extractor: self.ext_weights.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
        }
    }

    pub fn step(&self) -> u64 {
        self.adam.t
    }

    fn sample_grad(&self, s: &Prepared<f32>) -> Result<SampleGrad> {
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, true);
        let ew = self.ext_weights.bind(&mut g, false);
        let vars = objective(&mut g, &self.net, &p, &self.extractor, &ew, s, &self.loss)?;
        g.check_finite()?;
        let mut grads = g.backward(vars.total)?;
        let scalar = |v: Var| g.value(v).data()[0] as f64;
        Ok(SampleGrad {
            loss_p: scalar(vars.loss_p),
            loss_c: scalar(vars.loss_c),
            total: scalar(vars.total),
            grads: p.gradients(&g, &mut grads),
        })
    }

    /// One optimizer step on the mean objective of `batch`.
    pub fn train_step(&mut self, batch: &[StereoSample], lr: f64) -> Result<StepStats> {
        let prepared = batch
            .iter()
            .map(|s| Prepared::new(s, self.mono))
            .collect::<Result<Vec<_>>>()?;
        let results: Vec<Result<SampleGrad>> = if self.config.deterministic {
            prepared.iter().map(|s| self.sample_grad(s)).collect()
        } else {
            prepared.par_iter().map(|s| self.sample_grad(s)).collect()
        };
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        // accumulate in batch order so both modes agree bit-for-bit
        let n = results.len() as f32;
        let mut mean = results[0].grads.clone();
        for r in &results[1..] {
            for (name, acc) in mean.iter_mut() {
                for (a, b) in acc.data_mut().iter_mut().zip(r.grads.get(name).unwrap().data()) {
                    *a += *b;
                }
            }
        }
        for (_, acc) in mean.iter_mut() {
            acc.data_mut().iter_mut().for_each(|a| *a /= n);
        }
        let avg = |f: fn(&SampleGrad) -> f64| results.iter().map(f).sum::<f64>() / results.len() as f64;
        let (loss_p, loss_c, loss_total) = (avg(|r| r.loss_p), avg(|r| r.loss_c), avg(|r| r.total));
        if !loss_total.is_finite() {
            return Err(Error::NonFinite { node: 0, op: "loss" });
        }
        let t = self.adam.t + 1;
        adam_step(&mut self.params, &mean, &mut self.adam.m, &mut self.adam.v, t, lr)?;
        self.adam.t = t;
        Ok(StepStats {
            step: t,
            epoch: self.epoch,
            lr,
            loss_p,
            loss_c,
            loss_total,
        })
    }

    /// Per-epoch order, derived from (seed, epoch) so resumed runs match.
    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_0000_0000 ^ self.epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    fn augment_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_mul(0x9e37_79b9).wrapping_add(self.adam.t))
    }

    /// Trains until `config.epochs` (or `max_steps`). `on_step` sees every
    /// step; `on_epoch` runs after each completed epoch.
    pub fn run(
        &mut self,
        data: &[StereoSample],
        mut on_step: impl FnMut(&StepStats) -> Result<()>,
        mut on_epoch: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        for s in data {
            if (s.width(), s.height()) != (self.config.width, self.config.height) {
                return Err(Error::Config(format!(
                    "sample is {}x{} but the config expects {}x{}",
                    s.width(),
                    s.height(),
                    self.config.width,
                    self.config.height
                )));
            }
        }
        let batch = self.config.batch;
        while (self.epoch as usize) < self.config.epochs {
            let lr = self.config.lr_at_epoch(self.epoch as usize);
            let order = self.epoch_order(data.len());
            for chunk in order.chunks(batch) {
                if self.config.max_steps.is_some_and(|m| self.adam.t as usize >= m) {
                    return Ok(());
                }
                let mut rng = self.augment_rng();
                let samples: Vec<StereoSample> = chunk
                    .iter()
                    .map(|&i| if self.config.augment { augment(&data[i], &mut rng) } else { data[i].clone() })
                    .collect();
                let stats = self.train_step(&samples, lr)?;
                on_step(&stats)?;
            }
            self.epoch += 1;
            on_epoch(self)?;
        }
        Ok(())
    }
}

fn check_params(net: &StereoNet, params: &ParamStore<f32>) -> Result<()> {
    let expected = net.init_params::<f32>(0);
    for (name, t) in expected.iter() {
        match params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            Some(p) => return Err(Error::Config(format!("parameter `{name}` has shape {:?}, model expects {:?}", p.shape(), t.shape()))),
            None => return Err(Error::Config(format!("checkpoint lacks parameter `{name}`"))),
        }
    }
    if params.len() != expected.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, model expects {}",
            params.len(),
            expected.len()
        )));
    }
    Ok(())
}

/// Where a training run writes its artifacts.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOutputs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub metrics: Option<&'a Path>,
}

/// Full training run. On a numerical failure the state before the failing
/// step is written to the checkpoint path before the error is returned.
pub fn train(config: TrainConfig, data: &[StereoSample], out: TrainOutputs) -> Result<(Checkpoint, Vec<StepStats>)> {
    let mut trainer = Trainer::new(config)?;
    let mut log = Vec::new();
    let mut metrics = match out.metrics {
        Some(path) => {
            let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
            Some((path, f))
        }
        None => None,
    };
    let every = trainer.config.checkpoint_every;
    let result = trainer.run(
        data,
        |s| {
            log.push(*s);
            if s.step % 10 == 1 {
                info!("step {} epoch {} loss {:.5} (p {:.5}, c {:.5})", s.step, s.epoch, s.loss_total, s.loss_p, s.loss_c);
            }
            if let Some((path, f)) = metrics.as_mut() {
                writeln!(f, "{}", s.csv_line()).map_err(|e| Error::io(*path, e))?;
            }
            Ok(())
        },
        |t| match out.checkpoint {
            Some(path) if every > 0 && t.epoch % every as u64 == 0 => t.checkpoint().save(path),
            _ => Ok(()),
        },
    );
    if let Err(e) = result {
        if let (true, Some(path)) = (e.is_numerical(), out.checkpoint) {
            warn!("halting: {e}; keeping last good state in {}", path.display());
            trainer.checkpoint().save(path)?;
        }
        return Err(e);
    }
    let ckpt = trainer.checkpoint();
    if let Some(path) = out.checkpoint {
        ckpt.save(path)?;
    }
    Ok((ckpt, log))
}

/// Clamped restorations and level-1 merged disparity (cells of 4 pixels).
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub out_l: Tensor<f32>,
    pub out_r: Tensor<f32>,
    pub disp_l: Tensor<f32>,
    pub disp_r: Tensor<f32>,
}

/// Restores one stereo pair with a trained model.
pub fn infer(ckpt: &Checkpoint, input_l: &Tensor<f32>, input_r: &Tensor<f32>) -> Result<Inference> {
    let cfg = &ckpt.config;
    for t in [input_l, input_r] {
        let (_, c, h, w) = t.dims4()?;
        if c != 3 || (w, h) != (cfg.width, cfg.height) {
            return Err(Error::Config(format!(
                "input is {c}x{w}x{h} but the checkpoint was trained on 3x{}x{}",
                cfg.width, cfg.height
            )));
        }
    }
    let net = StereoNet::new(cfg.model_config()?);
    check_params(&net, &ckpt.params)?;
    let run = |l: &Tensor<f32>, r: &Tensor<f32>| -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
        let mut g = Graph::<f32>::new();
        let p = ckpt.params.bind(&mut g, false);
        let (lv, rv) = (g.constant(l.clone()), g.constant(r.clone()));
        let out = net.forward(&mut g, &p, lv, rv)?;
        g.check_finite()?;
        let clamp = |t: &Tensor<f32>| t.map(|v| v.clamp(0.0, 1.0));
        Ok((
            clamp(g.value(out.out_l)),
            clamp(g.value(out.out_r)),
            g.value(out.disp_l[0]).clone(),
            g.value(out.disp_r[0]).clone(),
        ))
    };
    if net.cfg.variant.mono {
        let (out_l, _, disp_l, _) = run(input_l, input_l)?;
        let (out_r, _, disp_r, _) = run(input_r, input_r)?;
        return Ok(Inference { out_l, out_r, disp_l, disp_r });
    }
    let (out_l, out_r, disp_l, disp_r) = run(input_l, input_r)?;
    Ok(Inference { out_l, out_r, disp_l, disp_r })
}

/// Restores every sample and scores both views against the clean images.
/// With `checkpoint` = `None` the corrupted inputs themselves are scored.
pub fn evaluate(ckpt: Option<&Checkpoint>, data: &[StereoSample], labels: &[String]) -> Result<EvalReport> {
    if labels.len() != data.len() {
        return Err(Error::invalid("evaluate", format!("{} labels for {} samples", labels.len(), data.len())));
    }
    let start = Instant::now();
    let rows = data
        .par_iter()
        .zip(labels)
        .map(|(s, label)| match ckpt {
            Some(c) => {
                let out = infer(c, &s.input_l, &s.input_r)?;
                EvalRow::evaluate(label.clone(), (&out.out_l, &out.out_r), (&s.clean_l, &s.clean_r))
            }
            None => EvalRow::evaluate(label.clone(), (&s.input_l, &s.input_r), (&s.clean_l, &s.clean_r)),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        variant: ckpt.map_or_else(|| "input".to_string(), |c| c.config.variant.clone()),
        rows,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// One trained (variant, seed) cell of an ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub train_secs: f64,
}

pub const ABLATION_HEADER: &str = "variant,seed,psnr,ssim,train_secs";

impl AblationRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{:.6},{:.6},{:.1}", self.variant, self.seed, self.psnr, self.ssim, self.train_secs)
    }
}

/// Trains each variant from `base` once per seed on `train_set` and scores it
/// on `test_set`. `on_row` sees each cell as soon as it is done.
pub fn ablate(
    base: &TrainConfig,
    variants: &[&str],
    seeds: &[u64],
    train_set: &[StereoSample],
    test_set: &[StereoSample],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let labels: Vec<String> = (0..test_set.len()).map(|i| format!("test{i:03}")).collect();
    let mut out = Vec::new();
    for &seed in seeds {
        for &v in variants {
            let cfg = TrainConfig {
                variant: v.to_string(),
                seed,
                ..base.clone()
            };
            let start = Instant::now();
            let (ckpt, _) = train(cfg, train_set, TrainOutputs::default())?;
            let train_secs = start.elapsed().as_secs_f64();
            let agg = evaluate(Some(&ckpt), test_set, &labels)?.aggregate();
            let row = AblationRow {
                variant: ckpt.config.variant.clone(),
                seed,
                psnr: agg.mean_psnr(),
                ssim: agg.mean_ssim(),
                train_secs,
            };
            info!("ablation {} seed {}: psnr {:.3} ssim {:.4}", row.variant, seed, row.psnr, row.ssim);
            on_row(&row);
            out.push(row);
        }
    }
    Ok(out)
}
