//! Perceptual loss over a frozen random feature extractor, the attention
//! consistency loss, and the combined objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{conv, init_conv, Bound, ParamStore};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_LAMBDAS: [f64; 4] = [1.0, 0.5, 0.4, 1.0];
pub const DEFAULT_ALPHA: f64 = 5e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambdas: [f64; 4],
    pub alpha: f64,
    pub extractor_seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambdas: DEFAULT_LAMBDAS,
            alpha: DEFAULT_ALPHA,
            extractor_seed: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.iter().any(|l| !(*l >= 0.0)) || !(self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative (lambdas {:?}, alpha {})",
                self.lambdas, self.alpha
            )));
        }
        Ok(())
    }
}

/// Four-tap conv pyramid with fixed seeded weights; tap `t` has stride `2^t`.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub channels: [usize; 4],
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        FeatureExtractor {
            // a wide first tap: with only a few random filters, colour errors
            // at full resolution hide in the null space of the features
            channels: [64, 32, 32, 32],
        }
    }
}

impl FeatureExtractor {
    /// Extractor weights, deterministic in `seed`, stored as `extractor.t*`.
    pub fn weights<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cin = 3;
        for (t, &c) in self.channels.iter().enumerate() {
            init_conv(&mut store, &mut rng, &format!("extractor.t{t}"), c, cin, 3, false);
            cin = c;
        }
        store
    }

    /// Tap activations of `image` (weights bound as constants).
    pub fn extract<T: Real>(&self, g: &mut Graph<T>, weights: &Bound, image: Var) -> Result<[Var; 4]> {
        let mut taps = Vec::with_capacity(4);
        let mut x = image;
        for t in 0..4 {
            let geom = if t == 0 { ConvGeom::same(3, 1) } else { ConvGeom::new(2, 1, 1) };
            let y = conv(g, weights, &format!("extractor.t{t}"), x, geom)?;
            x = g.relu(y);
            taps.push(x);
        }
        Ok([taps[0], taps[1], taps[2], taps[3]])
    }
}

/// `sum_t lambda_t (|phi_t(O_l) - phi_t(C_l)|_1 + |phi_t(O_r) - phi_t(C_r)|_1)`
/// with mean-reduced l1 per tap. Targets are the clean images.
#[allow(clippy::too_many_arguments)]
pub fn perceptual_loss<T: Real>(
    g: &mut Graph<T>,
    extractor: &FeatureExtractor,
    weights: &Bound,
    out_l: Var,
    out_r: Var,
    clean_l: Var,
    clean_r: Var,
    lambdas: &[f64; 4],
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (out, clean) in [(out_l, clean_l), (out_r, clean_r)] {
        if g.shape(out) != g.shape(clean) {
            return Err(Error::shape("perceptual_loss", g.shape(out), g.shape(clean)));
        }
        let fo = extractor.extract(g, weights, out)?;
        let fc = extractor.extract(g, weights, clean)?;
        for t in 0..4 {
            let d = g.l1_mean(fo[t], fc[t], None)?;
            let d = g.scalar_mul(d, T::lit(lambdas[t]));
            total = Some(match total {
                None => d,
                Some(acc) => g.add(acc, d)?,
            });
        }
    }
    Ok(total.expect("two views"))
}

/// Ground-truth disparity and validity at a coarser resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseTarget<T> {
    /// `1 x 1 x H/f x W/f`, in coarse-cell units.
    pub disparity: Tensor<T>,
    pub mask: Vec<bool>,
}

/// Block-reduces full-resolution disparity (pixels) and mask by `factor`:
/// a cell is valid only if every pixel of its block is valid, and its value
/// is the block mean divided by `factor`.
pub fn downsample_target<T: Real>(
    disparity: &Tensor<f32>,
    mask: &Tensor<f32>,
    factor: usize,
) -> Result<CoarseTarget<T>> {
    let (_, _, h, w) = disparity.dims4()?;
    if mask.shape() != disparity.shape() {
        return Err(Error::shape("downsample_target", mask.shape(), disparity.shape()));
    }
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid("downsample_target", format!("{w}x{h} not divisible by {factor}")));
    }
    let (ch, cw) = (h / factor, w / factor);
    let mut values = Vec::with_capacity(ch * cw);
    let mut valid = Vec::with_capacity(ch * cw);
    for cy in 0..ch {
        for cx in 0..cw {
            let mut sum = 0.0f64;
            let mut ok = true;
            for y in cy * factor..(cy + 1) * factor {
                for x in cx * factor..(cx + 1) * factor {
                    ok &= mask.at4(0, 0, y, x) > 0.5;
                    sum += disparity.at4(0, 0, y, x) as f64;
                }
            }
            let mean = sum / (factor * factor) as f64;
            values.push(T::lit(if ok { mean / factor as f64 } else { 0.0 }));
            valid.push(ok);
        }
    }
    Ok(CoarseTarget {
        disparity: Tensor::from_vec(&[1, 1, ch, cw], values)?,
        mask: valid,
    })
}

/// Masked mean-l1 between predicted and target disparity, summed over views.
pub fn attention_consistency_loss<T: Real>(
    g: &mut Graph<T>,
    d_l: Var,
    d_r: Var,
    target_l: &CoarseTarget<T>,
    target_r: &CoarseTarget<T>,
) -> Result<Var> {
    let tl = g.constant(target_l.disparity.clone());
    let tr = g.constant(target_r.disparity.clone());
    let ll = g.l1_mean(d_l, tl, Some(&target_l.mask))?;
    let lr = g.l1_mean(d_r, tr, Some(&target_r.mask))?;
    g.add(ll, lr)
}

/// `L_P + alpha * L_C`.
pub fn total_loss<T: Real>(g: &mut Graph<T>, lp: Var, lc: Var, alpha: f64) -> Result<Var> {
    let weighted = g.scalar_mul(lc, T::lit(alpha));
    g.add(lp, weighted)
}
