//! Brute-force reference implementations used only by tests. None of these
//! call into the graph or the im2col path.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stereodrop::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Direct nested-loop cross-correlation with zero padding.
pub fn conv_naive(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    dilation: usize,
    pad: usize,
) -> Tensor<f64> {
    let (n, c, h, w) = x.dims4().unwrap();
    let (o, ci, kh, kw) = k.dims4().unwrap();
    assert_eq!(c, ci);
    let ho = (h + 2 * pad - dilation * (kh - 1) - 1) / stride + 1;
    let wo = (w + 2 * pad - dilation * (kw - 1) - 1) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bv| bv[oc]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky * dilation) as i64 - pad as i64;
                                let ix = (ox * stride + kx * dilation) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                acc += x.at4(b, ic, iy as usize, ix as usize) * k.at4(oc, ic, ky, kx);
                            }
                        }
                    }
                    out.set4(b, oc, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Bilinear x2 upsampling written as a tent-filter sum over every source
/// pixel, with half-pixel centers clamped to the image.
pub fn upsample_naive(x: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, w) = x.dims4().unwrap();
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let coord = |o: usize, len: usize| ((o as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, (len - 1) as f64);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    let (sy, sx) = (coord(oy, h), coord(ox, w));
                    let mut acc = 0.0;
                    for iy in 0..h {
                        for ix in 0..w {
                            let wy = (1.0 - (sy - iy as f64).abs()).max(0.0);
                            let wx = (1.0 - (sx - ix as f64).abs()).max(0.0);
                            acc += wy * wx * x.at4(b, ch, iy, ix);
                        }
                    }
                    out.set4(b, ch, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Dense attention restricted to rows `[start, start + rows)`, computed by
/// explicit loops. Returns (attended values `C x rows x W`, score matrix
/// `(rows*W) x (rows*W)` row-major) for batch element `b`.
pub fn window_attention_naive(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    b: usize,
    start: usize,
    rows: usize,
    scale: f64,
) -> (Vec<f64>, Vec<f64>) {
    let (_, cq, _, w) = q.dims4().unwrap();
    let cv = v.dims4().unwrap().1;
    let cells = rows * w;
    let mut scores = vec![0.0; cells * cells];
    for qi in 0..cells {
        let (qy, qx) = (start + qi / w, qi % w);
        let logits: Vec<f64> = (0..cells)
            .map(|ki| {
                let (ky, kx) = (start + ki / w, ki % w);
                (0..cq).map(|c| q.at4(b, c, qy, qx) * k.at4(b, c, ky, kx)).sum::<f64>() * scale
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for ki in 0..cells {
            scores[qi * cells + ki] = (logits[ki] - m).exp() / z;
        }
    }
    let mut out = vec![0.0; cv * cells];
    for c in 0..cv {
        for qi in 0..cells {
            out[c * cells + qi] = (0..cells)
                .map(|ki| scores[qi * cells + ki] * v.at4(b, c, start + ki / w, ki % w))
                .sum();
        }
    }
    (out, scores)
}

/// Expected horizontal index under each score row, minus the query column,
/// in absolute value.
pub fn soft_argmax_naive(scores: &[f64], rows: usize, w: usize) -> Vec<f64> {
    let cells = rows * w;
    (0..cells)
        .map(|qi| {
            let mut f = 0.0;
            for ki in 0..cells {
                f += scores[qi * cells + ki] * (ki % w) as f64;
            }
            ((qi % w) as f64 - f).abs()
        })
        .collect()
}

/// Window starts written as `min(i * stride, h - rows)` for as many windows
/// as it takes to reach the last row.
pub fn window_starts_naive(h: usize, rows: usize, stride: usize) -> Vec<(usize, usize)> {
    if h <= rows {
        return vec![(0, h)];
    }
    let count = (h - rows).div_ceil(stride) + 1;
    (0..count).map(|i| ((i * stride).min(h - rows), rows)).collect()
}

/// 1x1 / kxk convolution of a named parameter pair from a store, via the
/// nested-loop oracle.
pub fn conv_named(
    p: &stereodrop::ParamStore<f64>,
    name: &str,
    x: &Tensor<f64>,
    stride: usize,
    dilation: usize,
    pad: usize,
) -> Tensor<f64> {
    let w = p.get(&format!("{name}.w")).unwrap();
    let b = p.get(&format!("{name}.b")).map(|b| b.data().to_vec());
    conv_naive(x, w, b.as_deref(), stride, dilation, pad)
}

pub fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    assert_eq!(a.shape(), b.shape());
    Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
}

/// Channel concatenation of NCHW tensors.
pub fn concat_channels(parts: &[Tensor<f64>]) -> Tensor<f64> {
    let (n, _, h, w) = parts[0].dims4().unwrap();
    let c: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for b in 0..n {
        let mut off = 0;
        for p in parts {
            for ch in 0..p.shape()[1] {
                for y in 0..h {
                    for x in 0..w {
                        out.set4(b, off + ch, y, x, p.at4(b, ch, y, x));
                    }
                }
            }
            off += p.shape()[1];
        }
    }
    out
}

/// Randomises every bias so zero-initialised ones take part in oracles.
pub fn randomize_biases(p: &mut stereodrop::ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    for (name, t) in p.iter_mut() {
        if name.ends_with(".b") {
            *t = Tensor::randn(t.shape(), 0.3, &mut r);
        }
    }
}

/// Fraction of non-occluded cells whose attention-derived disparity lies
/// within `tol` of `s`, for a pair where the left view is the right view
/// shifted by `s` columns and every column carries a unique embedding.
pub fn shift_recovery(s: usize, tol: f64) -> f64 {
    use stereodrop::disparity::soft_argmax_disp;
    use stereodrop::rda::{AttentionBlock, AttentionConfig, AttentionKind};
    use stereodrop::{Graph, ParamStore};
    let (h, w) = (6, 24);
    let c = w;
    // logit of a match is amp^2 / sqrt(c)
    let amp = (16.0 * (c as f64).sqrt()).sqrt();
    let mut right = Tensor::zeros(&[1, c, h, w]);
    let mut left = Tensor::zeros(&[1, c, h, w]);
    for y in 0..h {
        for x in 0..w {
            right.set4(0, x, y, x, amp);
            if x >= s {
                left.set4(0, x - s, y, x, amp);
            }
        }
    }
    let block = AttentionBlock::new("a", AttentionConfig::new(AttentionKind::Typical, c));
    let mut p = ParamStore::<f64>::new();
    block.init(&mut p, &mut rng(0));
    let eye = Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 });
    p.insert("a.k1.w", eye.clone());
    p.insert("a.k3.w", eye);
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let (l, r) = (g.constant(left), g.constant(right));
    let res = block.forward(&mut g, &b, l, r).unwrap();
    let d = soft_argmax_disp(&mut g, &res.scores, &res.windows, h, w).unwrap();
    let d = g.value(d);
    let mut good = 0;
    let mut total = 0;
    for y in 0..h {
        for x in s..w {
            total += 1;
            if (d.at4(0, 0, y, x) - s as f64).abs() <= tol {
                good += 1;
            }
        }
    }
    good as f64 / total as f64
}

/// Offsets `(dy, dx)` at which make_query changes when one input cell of a
/// random feature map is perturbed.
pub fn query_response_offsets(kind: stereodrop::rda::AttentionKind, seed: u64) -> Vec<(i64, i64)> {
    use stereodrop::rda::{AttentionBlock, AttentionConfig};
    use stereodrop::{Graph, ParamStore};
    let (c, h, w, cy, cx) = (3, 17, 17, 8, 8);
    let block = AttentionBlock::new("a", AttentionConfig::new(kind, c));
    let mut p = ParamStore::<f64>::new();
    block.init(&mut p, &mut rng(seed));
    let base = randn(&[1, c, h, w], seed + 1);
    let mut bumped = base.clone();
    bumped.set4(0, 1, cy, cx, base.at4(0, 1, cy, cx) + 1.0);
    let query = |f: Tensor<f64>| {
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let f = g.constant(f);
        let q = block.make_query(&mut g, &b, f).unwrap();
        g.value(q).clone()
    };
    let (q0, q1) = (query(base), query(bumped));
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if (0..c).any(|ch| q0.at4(0, ch, y, x) != q1.at4(0, ch, y, x)) {
                out.push((y as i64 - cy as i64, x as i64 - cx as i64));
            }
        }
    }
    out
}
