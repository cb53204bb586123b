//! Disparity from attention scores (soft-argmax over key columns), the
//! coarse-to-fine merge, and feedback of coarse disparity into finer features.

use rand::Rng;

use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{conv, init_conv, Bound, ParamStore};
use crate::rda::{coverage, inverse_coverage, RowWindow};
use crate::tensor::{Real, Tensor};

/// Per-cell `|query column - E[key column]|` for every window, averaged over
/// overlapping windows. Returns an `N x 1 x H x W` map in feature cells.
///
/// Each score matrix is `N x rows*W x rows*W`, query-major, as produced by
/// [`attend_window`](crate::rda::attend_window). Keys in every row of the
/// window contribute their own column index.
pub fn soft_argmax_disp<T: Real>(
    g: &mut Graph<T>,
    scores: &[Var],
    windows: &[RowWindow],
    h: usize,
    w: usize,
) -> Result<Var> {
    if scores.len() != windows.len() || scores.is_empty() {
        return Err(Error::invalid(
            "soft_argmax_disp",
            format!("{} score matrices for {} windows", scores.len(), windows.len()),
        ));
    }
    let n = g.shape(scores[0])[0];
    let mut acc: Option<Var> = None;
    for (&s, win) in scores.iter().zip(windows) {
        let cells = win.rows * w;
        if g.shape(s) != [n, cells, cells] {
            return Err(Error::shape("soft_argmax_disp", g.shape(s), &[n, cells, cells]));
        }
        let column = |i: usize| T::lit((i % cells % w) as f64);
        let key_cols = g.constant(Tensor::from_fn(&[n, cells, 1], column));
        let query_cols = g.constant(Tensor::from_fn(&[n, cells, 1], column));
        let expected = g.matmul(s, key_cols)?;
        let diff = g.sub(query_cols, expected)?;
        let disp = g.abs(diff);
        let disp = g.reshape(disp, &[n, 1, win.rows, w])?;
        let full = if win.rows == h { disp } else { g.place(disp, 2, win.start, h)? };
        acc = Some(match acc {
            None => full,
            Some(a) => g.add(a, full)?,
        });
    }
    let acc = acc.expect("non-empty");
    let cov = coverage(h, windows);
    if cov.iter().all(|&c| c == 1) {
        return Ok(acc);
    }
    let inv = g.constant(inverse_coverage(&[n, 1, h, w], &cov));
    g.mul(acc, inv)
}

/// Upsamples a coarser disparity map by two and doubles its values so they
/// are expressed in cells of the finer level.
pub fn upsample_disp<T: Real>(g: &mut Graph<T>, d_next: Var) -> Result<Var> {
    let up = g.bilinear_upsample2x(d_next)?;
    Ok(g.scalar_mul(up, T::lit(2.0)))
}

/// Appends the rescaled coarser disparity as one extra feature channel.
/// `None` (the no-concatenation ablation) passes the features through.
pub fn inject_disparity<T: Real>(g: &mut Graph<T>, f: Var, d_next: Option<Var>) -> Result<Var> {
    let Some(d) = d_next else { return Ok(f) };
    let up = upsample_disp(g, d)?;
    let (fs, us) = (g.shape(f), g.shape(up));
    if fs.len() != 4 || us.len() != 4 || fs[0] != us[0] || fs[2..] != us[2..] {
        return Err(Error::shape("inject_disparity", fs, us));
    }
    g.concat(&[f, up], 1)
}

/// Fuses the rescaled coarser map with this level's estimate through a 3x3
/// convolution (2 channels in, 1 out).
#[derive(Clone, Debug)]
pub struct DisparityMerge {
    pub name: String,
}

impl DisparityMerge {
    pub fn new(name: impl Into<String>) -> Self {
        DisparityMerge { name: name.into() }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        init_conv(store, rng, &self.name, 1, 2, 3, true);
    }

    pub fn merge<T: Real>(&self, g: &mut Graph<T>, p: &Bound, d_next: Var, disp: Var) -> Result<Var> {
        let up = upsample_disp(g, d_next)?;
        if g.shape(up) != g.shape(disp) {
            return Err(Error::shape("merge_disp", g.shape(up), g.shape(disp)));
        }
        let cat = g.concat(&[up, disp], 1)?;
        conv(g, p, &self.name, cat, ConvGeom::same(3, 1))
    }
}
