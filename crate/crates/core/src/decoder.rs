//! Coarse-to-fine aggregation of refined features and the RGB head.

use rand::Rng;

use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{conv, init_conv, rescale_conv, Bound, ParamStore};
use crate::tensor::Real;

pub const RES_BLOCKS: usize = 2;

#[derive(Clone, Debug)]
pub struct Decoder {
    /// Channels of the aggregated maps (those of the top pyramid level).
    pub width: usize,
    /// Channels of the refined maps A_1, A_2, A_3.
    pub refined_channels: [usize; 3],
}

impl Decoder {
    pub fn new(width: usize, refined_channels: [usize; 3]) -> Self {
        Decoder {
            width,
            refined_channels,
        }
    }

    /// Step `i` (2, 1, 0) consumes A_{i+1} and produces P_i.
    fn step_name(i: usize) -> String {
        format!("dec.s{i}")
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for i in 0..3 {
            let s = Self::step_name(i);
            init_conv(store, rng, &format!("{s}.fuse"), self.width, self.width + self.refined_channels[i], 3, true);
            for r in 0..RES_BLOCKS {
                init_conv(store, rng, &format!("{s}.res{r}.a"), self.width, self.width, 3, true);
                init_conv(store, rng, &format!("{s}.res{r}.b"), self.width, self.width, 3, true);
                rescale_conv(store, &format!("{s}.res{r}.b"), 0.0, 0.0);
            }
        }
        init_conv(store, rng, "dec.head", 3, self.width, 3, true);
        // start near mid-grey instead of at the scale of the features
        rescale_conv(store, "dec.head", 0.1, 0.5);
    }

    /// `P_i = up2(P_{i+1} + Res(conv3x3(P_{i+1} ++ A_{i+1})))`.
    pub fn aggregate_step<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        step: usize,
        p_next: Var,
        a_next: Var,
    ) -> Result<Var> {
        let (ps, as_) = (g.shape(p_next), g.shape(a_next));
        if ps.len() != 4 || as_.len() != 4 || ps[0] != as_[0] || ps[2..] != as_[2..] {
            return Err(Error::shape("aggregate_step", ps, as_));
        }
        let s = Self::step_name(step);
        let same = ConvGeom::same(3, 1);
        let cat = g.concat(&[p_next, a_next], 1)?;
        let mut x = conv(g, p, &format!("{s}.fuse"), cat, same)?;
        for r in 0..RES_BLOCKS {
            let a = conv(g, p, &format!("{s}.res{r}.a"), x, same)?;
            let a = g.relu(a);
            let b = conv(g, p, &format!("{s}.res{r}.b"), a, same)?;
            x = g.add(x, b)?;
        }
        let skip = g.add(p_next, x)?;
        g.bilinear_upsample2x(skip)
    }

    /// Aggregates `refined = [A_1, A_2, A_3]` starting from `P_3 = top`, then
    /// projects to RGB at full resolution. Output is unclamped.
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, p: &Bound, top: Var, refined: [Var; 3]) -> Result<Var> {
        let mut agg = top;
        for step in (0..3).rev() {
            agg = self.aggregate_step(g, p, step, agg, refined[step])?;
        }
        let up = g.bilinear_upsample2x(agg)?;
        conv(g, p, "dec.head", up, ConvGeom::same(3, 1))
    }
}
