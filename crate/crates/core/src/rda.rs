//! Row-wise dilated attention and the typical (1x1) attention baseline.
//!
//! Query and key maps are built from a 1x1 projection plus a distilled
//! concatenation of one shared 3x3 kernel applied at dilations 1, 2 and 4;
//! values use a 1x1 projection only. Attention is evaluated inside bands of
//! `rows` feature rows taken every `stride` rows, so a query cell only ever
//! sees reference cells of nearby scanlines.

use rand::Rng;

use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{conv, init_conv, Bound, ParamStore};
use crate::tensor::{Real, Tensor};

/// Dilations of the shared 3x3 branch kernel.
pub const DILATIONS: [usize; 3] = [1, 2, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    /// Query/key from 1x1 kernels only.
    Typical,
    /// Query/key from 1x1 plus dilated 3x3 branches.
    Rda,
}

/// A band of consecutive feature rows shared by queries and keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RowWindow {
    pub start: usize,
    pub rows: usize,
}

impl RowWindow {
    pub fn contains(&self, row: usize) -> bool {
        row >= self.start && row < self.start + self.rows
    }
}

/// Window starts `0, stride, 2*stride, ...`; a window that would run past the
/// bottom edge is clamped to start at `h - rows`. Maps shorter than `rows`
/// get one window covering every row.
pub fn enumerate_windows(h: usize, rows: usize, stride: usize) -> Vec<RowWindow> {
    assert!(h >= 1 && rows >= 1 && stride >= 1, "degenerate window parameters");
    if h <= rows {
        return vec![RowWindow { start: 0, rows: h }];
    }
    let mut out: Vec<RowWindow> = (0..)
        .map(|i| i * stride)
        .take_while(|s| s + rows <= h)
        .map(|start| RowWindow { start, rows })
        .collect();
    let last_end = out.last().map_or(0, |w| w.start + w.rows);
    if last_end < h {
        out.push(RowWindow { start: h - rows, rows });
    }
    out
}

/// Number of windows containing each row.
pub fn coverage(h: usize, windows: &[RowWindow]) -> Vec<usize> {
    (0..h)
        .map(|r| windows.iter().filter(|w| w.contains(r)).count())
        .collect()
}

/// Constant `N x C x H x W` tensor holding `1 / coverage(row)`.
pub(crate) fn inverse_coverage<T: Real>(shape: &[usize], cov: &[usize]) -> Tensor<T> {
    let (h, w) = (shape[2], shape[3]);
    Tensor::from_fn(shape, |i| T::lit(1.0 / cov[(i / w) % h] as f64))
}

/// Attends every query cell of window `w` to every key cell of the same
/// window. Returns the attended values (`N x Cv x rows x W`) and the
/// row-normalised score matrices (`N x rows*W x rows*W`, query-major).
pub fn attend_window<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    w: RowWindow,
    scale: T,
) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 4 || qs != ks || qs[0] != vs[0] || qs[2..] != vs[2..] {
        return Err(Error::shape("attend_window", &qs, &vs));
    }
    let (n, width) = (qs[0], qs[3]);
    let cells = w.rows * width;
    let band = |g: &mut Graph<T>, x: Var, c: usize| -> Result<Var> {
        let s = g.slice(x, 2, w.start, w.rows)?;
        g.reshape(s, &[n, c, cells])
    };
    let qb = band(g, q, qs[1])?;
    let kb = band(g, k, ks[1])?;
    let vb = band(g, v, vs[1])?;
    let logits = g.matmul_t(qb, kb, true, false)?;
    let logits = g.scalar_mul(logits, scale);
    let scores = g.softmax(logits, 2)?;
    let attended = g.matmul_t(vb, scores, false, true)?;
    let attended = g.reshape(attended, &[n, vs[1], w.rows, width])?;
    Ok((attended, scores))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    /// Channels of the incoming feature map (and of the refined output).
    pub channels: usize,
    /// Query/key dimension.
    pub attn_dim: usize,
    /// Adds the dilated branch to the value projection as well.
    pub value_dilated: bool,
    pub rows: usize,
    pub stride: usize,
}

impl AttentionConfig {
    pub fn new(kind: AttentionKind, channels: usize) -> Self {
        AttentionConfig {
            kind,
            channels,
            attn_dim: channels,
            value_dilated: false,
            rows: 3,
            stride: 2,
        }
    }
}

/// Output of one attention direction.
#[derive(Clone, Debug)]
pub struct AttentionResult {
    /// `F + proj(attended)`, same shape as the query features.
    pub refined: Var,
    /// One score matrix per window.
    pub scores: Vec<Var>,
    pub windows: Vec<RowWindow>,
    /// Windows per query row.
    pub coverage: Vec<usize>,
}

/// Attention parameters of one pyramid level, shared by both directions.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub prefix: String,
    pub cfg: AttentionConfig,
}

impl AttentionBlock {
    pub fn new(prefix: impl Into<String>, cfg: AttentionConfig) -> Self {
        AttentionBlock {
            prefix: prefix.into(),
            cfg,
        }
    }

    fn name(&self, k: &str) -> String {
        format!("{}.{k}", self.prefix)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let AttentionConfig {
            channels: c,
            attn_dim: d,
            ..
        } = self.cfg;
        // key projections carry no bias: a per-key offset only shifts every
        // logit of a query row by the same amount
        init_conv(store, rng, &self.name("k1"), d, c, 1, true);
        init_conv(store, rng, &self.name("k3"), d, c, 1, false);
        if self.cfg.kind == AttentionKind::Rda {
            init_conv(store, rng, &self.name("k1p"), c, c, 3, true);
            init_conv(store, rng, &self.name("k2"), d, 3 * c, 1, true);
            init_conv(store, rng, &self.name("k2p"), c, c, 3, false);
            init_conv(store, rng, &self.name("k4"), d, 3 * c, 1, false);
        }
        init_conv(store, rng, &self.name("k5"), c, c, 1, true);
        if self.cfg.value_dilated {
            init_conv(store, rng, &self.name("k5p"), c, c, 3, true);
            init_conv(store, rng, &self.name("k7"), c, 3 * c, 1, true);
        }
        init_conv(store, rng, &self.name("k6"), c, c, 1, true);
    }

    /// `F *1 a + (concat_j F *j b) *1 c`.
    fn dilated_projection<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        f: Var,
        pointwise: &str,
        branch: &str,
        distill: &str,
    ) -> Result<Var> {
        let direct = conv(g, p, &self.name(pointwise), f, ConvGeom::new(1, 1, 0))?;
        let mut parts = Vec::with_capacity(DILATIONS.len());
        for d in DILATIONS {
            parts.push(conv(g, p, &self.name(branch), f, ConvGeom::same(3, d))?);
        }
        let cat = g.concat(&parts, 1)?;
        let distilled = conv(g, p, &self.name(distill), cat, ConvGeom::new(1, 1, 0))?;
        g.add(direct, distilled)
    }

    pub fn make_query<T: Real>(&self, g: &mut Graph<T>, p: &Bound, f: Var) -> Result<Var> {
        match self.cfg.kind {
            AttentionKind::Rda => self.dilated_projection(g, p, f, "k1", "k1p", "k2"),
            AttentionKind::Typical => conv(g, p, &self.name("k1"), f, ConvGeom::new(1, 1, 0)),
        }
    }

    pub fn make_key<T: Real>(&self, g: &mut Graph<T>, p: &Bound, f: Var) -> Result<Var> {
        match self.cfg.kind {
            AttentionKind::Rda => self.dilated_projection(g, p, f, "k3", "k2p", "k4"),
            AttentionKind::Typical => conv(g, p, &self.name("k3"), f, ConvGeom::new(1, 1, 0)),
        }
    }

    pub fn make_value<T: Real>(&self, g: &mut Graph<T>, p: &Bound, f: Var) -> Result<Var> {
        if self.cfg.value_dilated {
            self.dilated_projection(g, p, f, "k5", "k5p", "k7")
        } else {
            conv(g, p, &self.name("k5"), f, ConvGeom::new(1, 1, 0))
        }
    }

    /// Refines `f_query` with features gathered from `f_ref` along its rows.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        f_query: Var,
        f_ref: Var,
    ) -> Result<AttentionResult> {
        let shape = g.shape(f_query).to_vec();
        if shape != g.shape(f_ref) {
            return Err(Error::shape("attention", &shape, g.shape(f_ref)));
        }
        if shape.len() != 4 || shape[1] != self.cfg.channels {
            return Err(Error::invalid(
                "attention",
                format!("{} expects {} channels, got {shape:?}", self.prefix, self.cfg.channels),
            ));
        }
        let h = shape[2];
        let q = self.make_query(g, p, f_query)?;
        let k = self.make_key(g, p, f_ref)?;
        let v = self.make_value(g, p, f_ref)?;
        let scale = T::one() / T::lit(self.cfg.attn_dim as f64).sqrt();
        let windows = enumerate_windows(h, self.cfg.rows, self.cfg.stride);
        let cov = coverage(h, &windows);
        let mut scores = Vec::with_capacity(windows.len());
        let mut acc: Option<Var> = None;
        for w in &windows {
            let (vals, s) = attend_window(g, q, k, v, *w, scale)?;
            scores.push(s);
            let full = if w.rows == h { vals } else { g.place(vals, 2, w.start, h)? };
            acc = Some(match acc {
                None => full,
                Some(a) => g.add(a, full)?,
            });
        }
        let acc = acc.expect("at least one window");
        let mixed = if cov.iter().all(|&c| c == 1) {
            acc
        } else {
            let inv = g.constant(inverse_coverage(g.shape(acc), &cov));
            g.mul(acc, inv)?
        };
        let projected = conv(g, p, &self.name("k6"), mixed, ConvGeom::new(1, 1, 0))?;
        let refined = g.add(f_query, projected)?;
        Ok(AttentionResult {
            refined,
            scores,
            windows,
            coverage: cov,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn starts(h: usize, rows: usize, stride: usize) -> Vec<usize> {
        enumerate_windows(h, rows, stride).iter().map(|w| w.start).collect()
    }

    #[test]
    fn window_enumeration() {
        assert_eq!(starts(7, 3, 2), vec![0, 2, 4]);
        assert_eq!(starts(6, 3, 2), vec![0, 2, 3]);
        assert_eq!(enumerate_windows(2, 3, 2), vec![RowWindow { start: 0, rows: 2 }]);
        assert_eq!(starts(4, 1, 1), vec![0, 1, 2, 3]);
        assert_eq!(starts(12, 5, 2), vec![0, 2, 4, 6, 7]);
    }

    #[test]
    fn every_row_is_covered() {
        for h in 1..30 {
            for (rows, stride) in [(1, 1), (3, 2), (5, 2)] {
                let w = enumerate_windows(h, rows, stride);
                assert!(coverage(h, &w).iter().all(|&c| c >= 1), "h={h} rows={rows}");
            }
        }
    }
}
