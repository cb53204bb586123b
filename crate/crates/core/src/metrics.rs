//! Image quality metrics and evaluation reports.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
/// Smallest side for which the five-scale variant is used.
pub const MS_SSIM_MIN_SIDE: usize = 176;
const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn check_pair(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::shape("metric", a.shape(), b.shape()));
    }
    match a.shape() {
        [1, c, h, w] | [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::invalid("metric", format!("expected an image, got {s:?}"))),
    }
}

/// Peak signal-to-noise ratio for `[0, 1]` images, capped at 99 dB.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian filtering over the valid region.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = win.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|i| win[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| win[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

/// Mean SSIM and mean contrast-structure term of one channel pair.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let win = gaussian_window();
    let (mu_a, _, _) = filter_valid(a, h, w, &win);
    let (mu_b, _, _) = filter_valid(b, h, w, &win);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (aa, _, _) = filter_valid(&prod(a, a), h, w, &win);
    let (bb, _, _) = filter_valid(&prod(b, b), h, w, &win);
    let (ab, _, _) = filter_valid(&prod(a, b), h, w, &win);
    let n = mu_a.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let c = (2.0 * cov + C2) / (va + vb + C2);
        let l = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        ssim += l * c;
        cs += c;
    }
    (ssim / n, cs / n)
}

fn planes(t: &Tensor<f32>, c: usize, h: usize, w: usize) -> Vec<Vec<f64>> {
    (0..c)
        .map(|ch| t.data()[ch * h * w..(ch + 1) * h * w].iter().map(|v| *v as f64).collect())
        .collect()
}

/// Single-scale SSIM (11x11 Gaussian window, sigma 1.5), channel-averaged.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let (c, h, w) = check_pair(a, b)?;
    if h.min(w) < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("images are {w}x{h}; SSIM needs both sides >= {SSIM_WINDOW}"),
        ));
    }
    let (pa, pb) = (planes(a, c, h, w), planes(b, c, h, w));
    Ok((0..c).map(|ch| ssim_plane(&pa[ch], &pb[ch], h, w).0).sum::<f64>() / c as f64)
}

fn avg_pool2(p: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = 0.25
                * (p[2 * y * w + 2 * x] + p[2 * y * w + 2 * x + 1] + p[(2 * y + 1) * w + 2 * x] + p[(2 * y + 1) * w + 2 * x + 1]);
        }
    }
    (out, ho, wo)
}

/// Five-scale SSIM; requires both sides >= 176.
pub fn ms_ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let (c, h, w) = check_pair(a, b)?;
    if h.min(w) < MS_SSIM_MIN_SIDE {
        return Err(Error::invalid(
            "ms_ssim",
            format!("images are {w}x{h}; MS-SSIM needs both sides >= {MS_SSIM_MIN_SIDE}"),
        ));
    }
    let (pa, pb) = (planes(a, c, h, w), planes(b, c, h, w));
    let mut total = 0.0;
    for ch in 0..c {
        let (mut x, mut y, mut hh, mut ww) = (pa[ch].clone(), pb[ch].clone(), h, w);
        let mut value = 1.0;
        for (s, weight) in MS_SSIM_WEIGHTS.iter().enumerate() {
            let (full, cs) = ssim_plane(&x, &y, hh, ww);
            let term = if s + 1 == MS_SSIM_WEIGHTS.len() { full } else { cs };
            value *= term.max(0.0).powf(*weight);
            let (nx, nh, nw) = avg_pool2(&x, hh, ww);
            let (ny, _, _) = avg_pool2(&y, hh, ww);
            (x, y, hh, ww) = (nx, ny, nh, nw);
        }
        total += value;
    }
    Ok(total / c as f64)
}

/// MS-SSIM when the image is large enough, single-scale SSIM otherwise.
pub fn structural_similarity(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let (_, h, w) = check_pair(a, b)?;
    if h.min(w) >= MS_SSIM_MIN_SIDE {
        ms_ssim(a, b)
    } else {
        ssim(a, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub sample: String,
    pub psnr_l: f64,
    pub psnr_r: f64,
    pub ssim_l: f64,
    pub ssim_r: f64,
}

impl EvalRow {
    pub fn evaluate(
        sample: impl Into<String>,
        pred: (&Tensor<f32>, &Tensor<f32>),
        gt: (&Tensor<f32>, &Tensor<f32>),
    ) -> Result<Self> {
        Ok(EvalRow {
            sample: sample.into(),
            psnr_l: psnr(pred.0, gt.0)?,
            psnr_r: psnr(pred.1, gt.1)?,
            ssim_l: structural_similarity(pred.0, gt.0)?,
            ssim_r: structural_similarity(pred.1, gt.1)?,
        })
    }

    pub fn mean_psnr(&self) -> f64 {
        0.5 * (self.psnr_l + self.psnr_r)
    }

    pub fn mean_ssim(&self) -> f64 {
        0.5 * (self.ssim_l + self.ssim_r)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub variant: String,
    pub rows: Vec<EvalRow>,
    pub runtime_secs: f64,
}

impl EvalReport {
    /// Arithmetic mean over rows.
    pub fn aggregate(&self) -> EvalRow {
        let n = self.rows.len().max(1) as f64;
        let mean = |f: fn(&EvalRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        EvalRow {
            sample: "aggregate".into(),
            psnr_l: mean(|r| r.psnr_l),
            psnr_r: mean(|r| r.psnr_r),
            ssim_l: mean(|r| r.ssim_l),
            ssim_r: mean(|r| r.ssim_r),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,psnr_l,psnr_r,ssim_l,ssim_r\n");
        for r in self.rows.iter().chain(std::iter::once(&self.aggregate())) {
            let _ = writeln!(out, "{},{:.6},{:.6},{:.6},{:.6}", r.sample, r.psnr_l, r.psnr_r, r.ssim_l, r.ssim_r);
        }
        out
    }
}
