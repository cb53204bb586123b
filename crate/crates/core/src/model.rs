//! Full stereo restoration network: shared encoder, per-level attention in
//! both directions, disparity estimation and merge, per-view decoding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::Decoder;
use crate::disparity::{inject_disparity, soft_argmax_disp, DisparityMerge};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::rda::{AttentionBlock, AttentionConfig, AttentionResult};
use crate::tensor::Real;
use crate::variant::VariantSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub variant: VariantSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            variant: VariantSpec::default(),
        }
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct StereoOutput {
    pub out_l: Var,
    pub out_r: Var,
    /// Merged disparity D_1, D_2, D_3 (left as query).
    pub disp_l: [Var; 3],
    pub disp_r: [Var; 3],
    /// Per-level soft-argmax estimates before merging.
    pub raw_disp_l: [Var; 3],
    pub raw_disp_r: [Var; 3],
    pub attention_l: Vec<AttentionResult>,
    pub attention_r: Vec<AttentionResult>,
}

#[derive(Clone, Debug)]
pub struct StereoNet {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    /// Attention blocks for levels 1, 2, 3.
    pub attention: [AttentionBlock; 3],
    /// Merges into levels 1 and 2.
    pub merges: [DisparityMerge; 2],
    pub decoder: Decoder,
}

impl StereoNet {
    pub fn new(cfg: ModelConfig) -> Self {
        let encoder = Encoder::new(cfg.encoder);
        let v = &cfg.variant;
        let level_channels = |l: usize| {
            let extra = usize::from(l < 3 && v.disparity_concat);
            encoder.channels(l) + extra
        };
        let attention = [1, 2, 3].map(|l| {
            let mut a = AttentionConfig::new(v.attention[l - 1], level_channels(l));
            a.value_dilated = v.value_dilated;
            a.rows = v.rows;
            a.stride = v.stride;
            AttentionBlock::new(format!("att.l{l}"), a)
        });
        let decoder = Decoder::new(
            encoder.channels(3),
            [level_channels(1), level_channels(2), level_channels(3)],
        );
        StereoNet {
            encoder,
            attention,
            merges: [DisparityMerge::new("disp.merge1"), DisparityMerge::new("disp.merge2")],
            decoder,
            cfg,
        }
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, &mut rng);
        for a in &self.attention {
            a.init(&mut store, &mut rng);
        }
        for m in &self.merges {
            m.init(&mut store, &mut rng);
        }
        self.decoder.init(&mut store, &mut rng);
        store
    }

    /// Runs both views. `left`/`right` are `N x 3 x H x W` with H, W
    /// multiples of 16.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, left: Var, right: Var) -> Result<StereoOutput> {
        let pl = self.encoder.encode(g, p, left)?;
        let pr = self.encoder.encode(g, p, right)?;
        let concat = self.cfg.variant.disparity_concat;

        let mut att_l: Vec<Option<AttentionResult>> = vec![None, None, None];
        let mut att_r: Vec<Option<AttentionResult>> = vec![None, None, None];
        let mut raw_l = Vec::new();
        let mut raw_r = Vec::new();
        let mut merged_l: Vec<Var> = Vec::new();
        let mut merged_r: Vec<Var> = Vec::new();
        let mut next: Option<(Var, Var)> = None;

        for level in (1..=3).rev() {
            let (mut fl, mut fr) = (pl.level(level), pr.level(level));
            if let (Some((dl, dr)), true) = (next, concat) {
                fl = inject_disparity(g, fl, Some(dl))?;
                fr = inject_disparity(g, fr, Some(dr))?;
            }
            let block = &self.attention[level - 1];
            let al = block.forward(g, p, fl, fr)?;
            let ar = block.forward(g, p, fr, fl)?;
            let (h, w) = (g.shape(fl)[2], g.shape(fl)[3]);
            let disp_l = soft_argmax_disp(g, &al.scores, &al.windows, h, w)?;
            let disp_r = soft_argmax_disp(g, &ar.scores, &ar.windows, h, w)?;
            let (dl, dr) = match next {
                None => (disp_l, disp_r),
                Some((nl, nr)) => {
                    let m = &self.merges[level - 1];
                    (m.merge(g, p, nl, disp_l)?, m.merge(g, p, nr, disp_r)?)
                }
            };
            raw_l.push(disp_l);
            raw_r.push(disp_r);
            merged_l.push(dl);
            merged_r.push(dr);
            att_l[level - 1] = Some(al);
            att_r[level - 1] = Some(ar);
            next = Some((dl, dr));
        }
        // collected coarse-to-fine; store fine-to-coarse
        let rev = |v: Vec<Var>| [v[2], v[1], v[0]];
        let att_l: Vec<AttentionResult> = att_l.into_iter().map(Option::unwrap).collect();
        let att_r: Vec<AttentionResult> = att_r.into_iter().map(Option::unwrap).collect();
        let refined = |a: &[AttentionResult]| [a[0].refined, a[1].refined, a[2].refined];
        let out_l = self.decoder.decode(g, p, pl.level(3), refined(&att_l))?;
        let out_r = self.decoder.decode(g, p, pr.level(3), refined(&att_r))?;
        Ok(StereoOutput {
            out_l,
            out_r,
            disp_l: rev(merged_l),
            disp_r: rev(merged_r),
            raw_disp_l: rev(raw_l),
            raw_disp_r: rev(raw_r),
            attention_l: att_l,
            attention_r: att_r,
        })
    }
}
