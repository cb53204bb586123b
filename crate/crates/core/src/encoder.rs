//! Trainable three-level feature pyramid (strides 4, 8, 16).

use rand::Rng;

use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{conv, init_conv, rescale_conv, Bound, ParamStore};
use crate::tensor::Real;

/// Pixels per feature cell at levels 1, 2, 3.
pub const LEVEL_STRIDES: [usize; 3] = [4, 8, 16];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub stem: usize,
    pub channels: [usize; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stem: 16,
            channels: [16, 32, 64],
        }
    }
}

/// Per-view feature maps, `levels[i]` is level `i + 1`.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 3],
}

impl FeaturePyramid {
    pub fn stride(level: usize) -> usize {
        LEVEL_STRIDES[level - 1]
    }

    pub fn level(&self, level: usize) -> Var {
        self.levels[level - 1]
    }
}

/// One convolution in the layer list: kernel, stride, padding.
#[derive(Clone, Copy, Debug)]
struct Layer {
    k: usize,
    stride: usize,
    pad: usize,
}

const DOWN: Layer = Layer { k: 3, stride: 2, pad: 1 };
const SAME: Layer = Layer { k: 3, stride: 1, pad: 1 };

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Self {
        Encoder { cfg }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.cfg.channels[level - 1]
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        init_conv(store, rng, "enc.stem", self.cfg.stem, 3, 3, true);
        let mut cin = self.cfg.stem;
        for (i, &c) in self.cfg.channels.iter().enumerate() {
            let l = i + 1;
            init_conv(store, rng, &format!("enc.l{l}.down"), c, cin, 3, true);
            init_conv(store, rng, &format!("enc.l{l}.res.a"), c, c, 3, true);
            init_conv(store, rng, &format!("enc.l{l}.res.b"), c, c, 3, true);
            // residual branches start closed so activations keep their scale
            rescale_conv(store, &format!("enc.l{l}.res.b"), 0.0, 0.0);
            cin = c;
        }
    }

    /// Rejects images whose sides are not multiples of 16.
    pub fn check_dims(h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            let pad = |v: usize| (16 - v % 16) % 16;
            return Err(Error::invalid(
                "encode",
                format!(
                    "image {w}x{h} must have sides that are multiples of 16 (pad by {} columns and {} rows)",
                    pad(w),
                    pad(h)
                ),
            ));
        }
        Ok(())
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<FeaturePyramid> {
        let shape = g.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::invalid("encode", format!("expected N x 3 x H x W, got {shape:?}")));
        }
        Self::check_dims(shape[2], shape[3])?;
        let down = ConvGeom::new(2, 1, 1);
        let same = ConvGeom::same(3, 1);
        let stem = conv(g, p, "enc.stem", image, down)?;
        let mut x = g.relu(stem);
        let mut levels = Vec::with_capacity(3);
        for l in 1..=3 {
            let d = conv(g, p, &format!("enc.l{l}.down"), x, down)?;
            let d = g.relu(d);
            let a = conv(g, p, &format!("enc.l{l}.res.a"), d, same)?;
            let a = g.relu(a);
            let b = conv(g, p, &format!("enc.l{l}.res.b"), a, same)?;
            x = g.add(d, b)?;
            levels.push(x);
        }
        Ok(FeaturePyramid {
            levels: [levels[0], levels[1], levels[2]],
        })
    }

    fn layers(level: usize) -> Vec<Layer> {
        let mut layers = vec![DOWN];
        for _ in 0..level {
            layers.extend([DOWN, SAME, SAME]);
        }
        layers
    }

    /// Inclusive range of input pixel coordinates (along one axis) that can
    /// influence feature cell `cell` of `level`, derived from the layer list.
    pub fn receptive_interval(level: usize, cell: usize) -> (i64, i64) {
        let (mut lo, mut hi) = (cell as i64, cell as i64);
        for layer in Self::layers(level).iter().rev() {
            lo = lo * layer.stride as i64 - layer.pad as i64;
            hi = hi * layer.stride as i64 - layer.pad as i64 + layer.k as i64 - 1;
        }
        (lo, hi)
    }
}
