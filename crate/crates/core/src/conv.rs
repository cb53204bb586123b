//! Raw 2-D cross-correlation kernels (im2col + GEMM) and their adjoints.

use crate::tensor::{gemm, MatRef, Real, Tensor};

/// Stride, dilation and symmetric zero padding of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        ConvGeom {
            stride,
            dilation,
            padding,
        }
    }

    /// Padding that keeps spatial size for stride 1 (odd kernels).
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvGeom::new(1, dilation, dilation * (kernel - 1) / 2)
    }

    /// Output extent along one axis, `None` if the kernel does not fit.
    pub fn out_len(&self, len: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = len + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.padding == 0
    }
}

struct Layout {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeom,
}

impl Layout {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Source coordinate for output index `o` and tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let pos = (o * self.geom.stride + k * self.geom.dilation) as isize - self.geom.padding as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }
}

fn im2col<T: Real>(x: &[T], l: &Layout, col: &mut [T]) {
    let cols = l.cols();
    for c in 0..l.c {
        let plane = &x[c * l.h * l.w..(c + 1) * l.h * l.w];
        for ky in 0..l.kh {
            for kx in 0..l.kw {
                let row = (c * l.kh + ky) * l.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..l.ho {
                    let line = &mut dst[oy * l.wo..(oy + 1) * l.wo];
                    match l.src(oy, ky, l.h) {
                        None => line.iter_mut().for_each(|v| *v = T::zero()),
                        Some(iy) => {
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match l.src(ox, kx, l.w) {
                                    Some(ix) => plane[iy * l.w + ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], l: &Layout, dx: &mut [T]) {
    let cols = l.cols();
    for c in 0..l.c {
        let plane = &mut dx[c * l.h * l.w..(c + 1) * l.h * l.w];
        for ky in 0..l.kh {
            for kx in 0..l.kw {
                let row = (c * l.kh + ky) * l.kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..l.ho {
                    let Some(iy) = l.src(oy, ky, l.h) else { continue };
                    for ox in 0..l.wo {
                        if let Some(ix) = l.src(ox, kx, l.w) {
                            plane[iy * l.w + ix] += src[oy * l.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn layout(xs: &[usize], ks: &[usize], geom: ConvGeom) -> Layout {
    let (kh, kw) = (ks[2], ks[3]);
    Layout {
        c: xs[1],
        h: xs[2],
        w: xs[3],
        kh,
        kw,
        ho: geom.out_len(xs[2], kh).expect("validated conv geometry"),
        wo: geom.out_len(xs[3], kw).expect("validated conv geometry"),
        geom,
    }
}

/// Forward cross-correlation. Shapes must already be validated.
pub(crate) fn forward<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Tensor<T> {
    let n = x.shape()[0];
    let cout = k.shape()[0];
    let l = layout(x.shape(), k.shape(), geom);
    let (rows, cols) = (l.rows(), l.cols());
    let mut out = Tensor::zeros(&[n, cout, l.ho, l.wo]);
    let in_stride = l.c * l.h * l.w;
    let out_stride = cout * cols;
    let mut col = if geom.is_pointwise(l.kh, l.kw) {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols]
    };
    let kmat = MatRef::new(k.data(), cout, rows);
    for b in 0..n {
        let xb = &x.data()[b * in_stride..(b + 1) * in_stride];
        let ob = &mut out.data_mut()[b * out_stride..(b + 1) * out_stride];
        if let Some(bias) = bias {
            for (o, chunk) in ob.chunks_mut(cols).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias.data()[o]);
            }
        }
        let src = if col.is_empty() {
            xb
        } else {
            im2col(xb, &l, &mut col);
            &col
        };
        gemm(kmat, MatRef::new(src, rows, cols), ob, T::one());
    }
    out
}

/// Vector-Jacobian products of [`forward`]. Each requested gradient buffer
/// is accumulated into (not overwritten).
pub(crate) fn backward<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    geom: ConvGeom,
    dy: &Tensor<T>,
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let n = x.shape()[0];
    let cout = k.shape()[0];
    let l = layout(x.shape(), k.shape(), geom);
    let (rows, cols) = (l.rows(), l.cols());
    let in_stride = l.c * l.h * l.w;
    let out_stride = cout * cols;
    let pointwise = geom.is_pointwise(l.kh, l.kw);
    let mut col = vec![T::zero(); if pointwise { 0 } else { rows * cols }];
    let mut dcol = vec![T::zero(); if pointwise || dx.is_none() { 0 } else { rows * cols }];
    let kmat = MatRef::new(k.data(), cout, rows);
    for b in 0..n {
        let xb = &x.data()[b * in_stride..(b + 1) * in_stride];
        let gb = MatRef::new(&dy.data()[b * out_stride..(b + 1) * out_stride], cout, cols);
        if let Some(db) = db.as_deref_mut() {
            for (o, chunk) in dy.data()[b * out_stride..(b + 1) * out_stride]
                .chunks(cols)
                .enumerate()
            {
                db[o] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dk) = dk.as_deref_mut() {
            let src = if pointwise {
                xb
            } else {
                im2col(xb, &l, &mut col);
                &col
            };
            gemm(gb, MatRef::new(src, rows, cols).t(), dk, T::one());
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_stride..(b + 1) * in_stride];
            if pointwise {
                gemm(kmat.t(), gb, dxb, T::one());
            } else {
                gemm(kmat.t(), gb, &mut dcol, T::zero());
                col2im(&dcol, &l, dxb);
            }
        }
    }
}
