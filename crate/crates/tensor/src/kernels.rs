//! Numeric kernels behind the differentiable ops: convolution via im2col and
//! GEMM, pooling, bilinear upsampling, and batch statistics.

use crate::Tensor;

/// `c = a · b + beta · c` for row/column-strided matrices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the addressed ranges for the given dimensions
    // and strides, which are those of dense row- or column-major matrices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Output spatial size of a convolution, or `None` if the kernel does not fit.
pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Self {
        let (_, c, h, w) = x.dims4();
        let (_, wc, kh, kw) = weight.dims4();
        assert_eq!(c, wc, "conv2d: input has {c} channels, weight expects {wc}");
        let ho = conv_out_size(h, kh, stride, pad).expect("conv2d: kernel larger than input");
        let wo = conv_out_size(w, kw, stride, pad).expect("conv2d: kernel larger than input");
        ConvGeom { c, h, w, kh, kw, stride, pad, ho, wo }
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.cols();
    for ci in 0..g.c {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let p = g.cols();
    for ci in 0..g.c {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let g = ConvGeom::new(x, weight, stride, pad);
    let n = x.shape()[0];
    let co = weight.shape()[0];
    let (k, p) = (g.rows(), g.cols());
    let in_len = g.c * g.h * g.w;
    let mut out = vec![0.0; n * co * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for b in 0..n {
        let img = &x.data()[b * in_len..(b + 1) * in_len];
        let colsref: &[f64] = if g.is_pointwise() {
            img
        } else {
            im2col(img, &g, &mut cols);
            &cols
        };
        let dst = &mut out[b * co * p..(b + 1) * co * p];
        if let Some(bias) = bias {
            for (o, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(bias.data()[o]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(
            co,
            k,
            p,
            weight.data(),
            (k as isize, 1),
            colsref,
            (p as isize, 1),
            beta,
            dst,
            (p as isize, 1),
        );
    }
    Tensor::new(&[n, co, g.ho, g.wo], out)
}

/// Gradients of a convolution with respect to its input and weight.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let g = ConvGeom::new(x, weight, stride, pad);
    let n = x.shape()[0];
    let co = weight.shape()[0];
    let (k, p) = (g.rows(), g.cols());
    let in_len = g.c * g.h * g.w;
    let mut gx = need_input.then(|| vec![0.0; x.len()]);
    let mut gw = need_weight.then(|| vec![0.0; weight.len()]);
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { k * p }];
    let mut dcols = vec![0.0; if need_input && !g.is_pointwise() { k * p } else { 0 }];
    for b in 0..n {
        let go = &gout.data()[b * co * p..(b + 1) * co * p];
        let img = &x.data()[b * in_len..(b + 1) * in_len];
        if let Some(gw) = gw.as_mut() {
            let colsref: &[f64] = if g.is_pointwise() {
                img
            } else {
                im2col(img, &g, &mut cols);
                &cols
            };
            // gw[co×k] += go[co×p] · colsᵀ[p×k]
            gemm(co, p, k, go, (p as isize, 1), colsref, (1, p as isize), 1.0, gw, (k as isize, 1));
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[b * in_len..(b + 1) * in_len];
            // dcols[k×p] = wᵀ[k×co] · go[co×p]
            if g.is_pointwise() {
                gemm(k, co, p, weight.data(), (1, k as isize), go, (p as isize, 1), 1.0, dst, (p as isize, 1));
            } else {
                gemm(
                    k,
                    co,
                    p,
                    weight.data(),
                    (1, k as isize),
                    go,
                    (p as isize, 1),
                    0.0,
                    &mut dcols,
                    (p as isize, 1),
                );
                col2im(&dcols, &g, dst);
            }
        }
    }
    (
        gx.map(|d| Tensor::new(x.shape(), d)),
        gw.map(|d| Tensor::new(weight.shape(), d)),
    )
}

/// Per-channel sum over batch and spatial positions of an NCHW tensor.
pub(crate) fn channel_sums(t: &Tensor) -> Vec<f64> {
    let (n, c, h, w) = t.dims4();
    let hw = h * w;
    let mut sums = vec![0.0; c];
    for b in 0..n {
        for (ci, s) in sums.iter_mut().enumerate() {
            let off = (b * c + ci) * hw;
            *s += t.data()[off..off + hw].iter().sum::<f64>();
        }
    }
    sums
}

/// 2×2 max pooling with stride 2; returns the pooled tensor and flat argmax indices.
pub(crate) fn maxpool2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let d = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
    }
    (Tensor::new(&[n, c, ho, wo], out), arg)
}

/// Source taps `(i0, i1, w1)` of 2× bilinear upsampling with half-pixel centres.
pub(crate) fn upsample_taps(n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n_in)
        .map(|o| {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample2_forward(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * ho * wo];
    let d = x.data();
    for plane in 0..n * c {
        let src = &d[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                dst[oy * wo + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub(crate) fn upsample2_backward(x_shape: &[usize], gout: &Tensor) -> Tensor {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (ho, wo) = (2 * h, 2 * w);
    let mut gx = vec![0.0; n * c * h * w];
    let g = gout.data();
    for plane in 0..n * c {
        let src = &g[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = src[oy * wo + ox];
                dst[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                dst[y0 * w + x1] += v * (1.0 - ly) * lx;
                dst[y1 * w + x0] += v * ly * (1.0 - lx);
                dst[y1 * w + x1] += v * ly * lx;
            }
        }
    }
    Tensor::new(x_shape, gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as the reference.
    fn conv_direct(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, wd) = x.dims4();
        let (co, _, kh, kw) = w.dims4();
        let ho = conv_out_size(h, kh, stride, pad).unwrap();
        let wo = conv_out_size(wd, kw, stride, pad).unwrap();
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for b in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((b * c + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * c + ci) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &(k, s, p) in &[(3, 1, 1), (4, 1, 1), (4, 2, 1), (1, 1, 0), (3, 2, 0)] {
            let x = Tensor::randn(&[2, 3, 9, 8], 1.0, &mut rng);
            let w = Tensor::randn(&[4, 3, k, k], 1.0, &mut rng);
            let fast = conv2d_forward(&x, &w, None, s, p);
            let slow = conv_direct(&x, &w, s, p);
            assert_eq!(fast.shape(), slow.shape());
            let err = fast.zip_map(&slow, |a, b| a - b).max_abs();
            assert!(err < 1e-12, "k={k} s={s} p={p}: {err}");
        }
    }

    #[test]
    fn upsample_taps_replicate_edges() {
        let taps = upsample_taps(3);
        assert_eq!(taps[0], (0, 1, 0.0));
        assert_eq!(taps[1], (0, 1, 0.25));
        assert_eq!(taps[2], (0, 1, 0.75));
        assert_eq!(taps[5], (2, 2, 0.25));
    }

    #[test]
    fn maxpool_picks_window_maximum() {
        let x = Tensor::new(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0]);
        let (y, arg) = maxpool2(&x);
        assert_eq!(y.data(), &[5.0, 9.0]);
        assert_eq!(arg, vec![1, 6]);
    }
}
