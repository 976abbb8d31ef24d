//! Raw forward/backward kernels for the tensor primitives.
//!
//! These are plain functions over [`Tensor`]; the tape records which kernel
//! produced a node and replays the matching backward. Inner loops are written
//! over contiguous slices so they vectorize; all accumulation is in fixed
//! index order.

use crate::tensor::{nchw, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn pointwise() -> Self {
        Conv2dSpec {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.dilation * (kh - 1) - 1) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.dilation * (kw - 1) - 1) / self.stride + 1;
        (oh, ow)
    }
}

/// Valid output range [lo, hi) for one kernel tap along an axis, i.e. the
/// output positions whose input index `o*stride + k*dilation - padding` lands
/// inside [0, len).
#[inline]
fn tap_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    // input index = o*stride + offset, require 0 <= idx < in_len
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize + stride - 1) / stride
    };
    let hi_in = in_len as isize - 1 - offset;
    if hi_in < 0 {
        return (0, 0);
    }
    let hi = (hi_in as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

pub fn conv2d_forward<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, spec: &Conv2dSpec) -> Tensor<F> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = spec.out_hw(h, wd, kh, kw);
    let g = spec.groups;
    let co_per_g = cout / g;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let xd = x.data();
    let wdat = w.data();
    let od = out.data_mut();
    for b in 0..n {
        for gi in 0..g {
            for co_l in 0..co_per_g {
                let co = gi * co_per_g + co_l;
                let obase = nchw(cout, oh, ow, b, co, 0, 0);
                for ci_l in 0..cin_g {
                    let ci = gi * cin_g + ci_l;
                    let xbase = nchw(cin, h, wd, b, ci, 0, 0);
                    for ky in 0..kh {
                        let yoff = (ky * spec.dilation) as isize - spec.padding as isize;
                        let (oy_lo, oy_hi) = tap_range(oh, h, spec.stride, yoff);
                        for kx in 0..kw {
                            let xoff = (kx * spec.dilation) as isize - spec.padding as isize;
                            let (ox_lo, ox_hi) = tap_range(ow, wd, spec.stride, xoff);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let wv = wdat[((co * cin_g + ci_l) * kh + ky) * kw + kx];
                            for oy in oy_lo..oy_hi {
                                let iy = (oy * spec.stride) as isize + yoff;
                                let orow = obase + oy * ow;
                                let xrow = xbase + iy as usize * wd;
                                if spec.stride == 1 {
                                    let ix0 = (ox_lo as isize + xoff) as usize;
                                    let olen = ox_hi - ox_lo;
                                    let (dst, src) = (
                                        &mut od[orow + ox_lo..orow + ox_hi],
                                        &xd[xrow + ix0..xrow + ix0 + olen],
                                    );
                                    for (o, &v) in dst.iter_mut().zip(src.iter()) {
                                        *o += wv * v;
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        let ix = (ox * spec.stride) as isize + xoff;
                                        od[orow + ox] += wv * xd[xrow + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients w.r.t. input and weight. `gx`/`gw` are accumulated into.
pub fn conv2d_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    spec: &Conv2dSpec,
    gout: &Tensor<F>,
    gx: Option<&mut Tensor<F>>,
    gw: Option<&mut Tensor<F>>,
) {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = spec.out_hw(h, wd, kh, kw);
    let g = spec.groups;
    let co_per_g = cout / g;
    let xd = x.data();
    let wdat = w.data();
    let gd = gout.data();
    let mut gxd = gx.map(|t| t.data_mut());
    let mut gwd = gw.map(|t| t.data_mut());
    for b in 0..n {
        for gi in 0..g {
            for co_l in 0..co_per_g {
                let co = gi * co_per_g + co_l;
                let obase = nchw(cout, oh, ow, b, co, 0, 0);
                for ci_l in 0..cin_g {
                    let ci = gi * cin_g + ci_l;
                    let xbase = nchw(cin, h, wd, b, ci, 0, 0);
                    for ky in 0..kh {
                        let yoff = (ky * spec.dilation) as isize - spec.padding as isize;
                        let (oy_lo, oy_hi) = tap_range(oh, h, spec.stride, yoff);
                        for kx in 0..kw {
                            let xoff = (kx * spec.dilation) as isize - spec.padding as isize;
                            let (ox_lo, ox_hi) = tap_range(ow, wd, spec.stride, xoff);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let widx = ((co * cin_g + ci_l) * kh + ky) * kw + kx;
                            let wv = wdat[widx];
                            let mut wacc = F::zero();
                            for oy in oy_lo..oy_hi {
                                let iy = ((oy * spec.stride) as isize + yoff) as usize;
                                let orow = obase + oy * ow;
                                let xrow = xbase + iy * wd;
                                if spec.stride == 1 {
                                    let ix0 = (ox_lo as isize + xoff) as usize;
                                    let olen = ox_hi - ox_lo;
                                    let gslice = &gd[orow + ox_lo..orow + ox_hi];
                                    if let Some(gxd) = gxd.as_deref_mut() {
                                        let dst = &mut gxd[xrow + ix0..xrow + ix0 + olen];
                                        for (d, &gv) in dst.iter_mut().zip(gslice.iter()) {
                                            *d += wv * gv;
                                        }
                                    }
                                    if gwd.is_some() {
                                        let src = &xd[xrow + ix0..xrow + ix0 + olen];
                                        for (&gv, &xv) in gslice.iter().zip(src.iter()) {
                                            wacc += gv * xv;
                                        }
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        let ix = ((ox * spec.stride) as isize + xoff) as usize;
                                        let gv = gd[orow + ox];
                                        if let Some(gxd) = gxd.as_deref_mut() {
                                            gxd[xrow + ix] += wv * gv;
                                        }
                                        wacc += gv * xd[xrow + ix];
                                    }
                                }
                            }
                            if let Some(gwd) = gwd.as_deref_mut() {
                                gwd[widx] += wacc;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3x3 max pool, padding 1. Returns output and flat argmax input indices.
pub fn max_pool3_forward<F: Scalar>(x: &Tensor<F>, stride: usize) -> (Tensor<F>, Vec<u32>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oh = (h + 2 - 3) / stride + 1;
    let ow = (w + 2 - 3) / stride + 1;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0u32; out.numel()];
    let xd = x.data();
    let od = out.data_mut();
    let mut oi = 0usize;
    for b in 0..n {
        for ch in 0..c {
            let base = nchw(c, h, w, b, ch, 0, 0);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = F::neg_infinity();
                    let mut besti = 0u32;
                    for ky in 0..3usize {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            // strict > keeps the first maximum on ties
                            if xd[idx] > best {
                                best = xd[idx];
                                besti = idx as u32;
                            }
                        }
                    }
                    od[oi] = best;
                    arg[oi] = besti;
                    oi += 1;
                }
            }
        }
    }
    (out, arg)
}

/// 3x3 average pool, padding 1, padded zeros included in the count (every
/// window divides by 9).
pub fn avg_pool3_forward<F: Scalar>(x: &Tensor<F>, stride: usize) -> Tensor<F> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oh = (h + 2 - 3) / stride + 1;
    let ow = (w + 2 - 3) / stride + 1;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let ninth = F::from_f64(1.0 / 9.0);
    let xd = x.data();
    let od = out.data_mut();
    let mut oi = 0usize;
    for b in 0..n {
        for ch in 0..c {
            let base = nchw(c, h, w, b, ch, 0, 0);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = F::zero();
                    for ky in 0..3usize {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += xd[base + iy as usize * w + ix as usize];
                        }
                    }
                    od[oi] = acc * ninth;
                    oi += 1;
                }
            }
        }
    }
    out
}

pub fn avg_pool3_backward<F: Scalar>(gout: &Tensor<F>, gx: &mut Tensor<F>, stride: usize) {
    let (n, c, oh, ow) = (
        gout.shape()[0],
        gout.shape()[1],
        gout.shape()[2],
        gout.shape()[3],
    );
    let (h, w) = (gx.shape()[2], gx.shape()[3]);
    let ninth = F::from_f64(1.0 / 9.0);
    let gd = gout.data();
    let gxd = gx.data_mut();
    let mut oi = 0usize;
    for b in 0..n {
        for ch in 0..c {
            let base = ((b * c + ch) * h) * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = gd[oi] * ninth;
                    oi += 1;
                    for ky in 0..3usize {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gxd[base + iy as usize * w + ix as usize] += gv;
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel batch statistics of an NCHW tensor: (mean, inverse std).
/// Variance is the biased estimate over N*H*W samples.
pub fn batch_stats<F: Scalar>(x: &Tensor<F>, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let m = (n * h * w) as f64;
    let xd = x.data();
    let plane = h * w;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let mut s = 0.0f64;
            for &v in &xd[base..base + plane] {
                s += v.to_f64();
            }
            mean[ch] += s;
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let mu = mean[ch];
            let mut s = 0.0f64;
            for &v in &xd[base..base + plane] {
                let d = v.to_f64() - mu;
                s += d * d;
            }
            var[ch] += s;
        }
    }
    let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v / m + eps).sqrt()).collect();
    (mean, invstd)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let y = conv2d_forward(&x, &w, &Conv2dSpec::pointwise());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_3x3_sum_kernel_padded() {
        // all-ones 3x3 kernel on all-ones input, padding 1: center sees 9, corner 4
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let spec = Conv2dSpec {
            stride: 1,
            padding: 1,
            dilation: 1,
            groups: 1,
        };
        let y = conv2d_forward(&x, &w, &spec);
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn conv_stride2_shape() {
        let x = Tensor::<f64>::zeros(&[2, 3, 16, 16]);
        let w = Tensor::<f64>::zeros(&[4, 3, 3, 3]);
        let spec = Conv2dSpec {
            stride: 2,
            padding: 1,
            dilation: 1,
            groups: 1,
        };
        let y = conv2d_forward(&x, &w, &spec);
        assert_eq!(y.shape(), &[2, 4, 8, 8]);
    }

    #[test]
    fn conv_dilated_shape_preserved_with_pad2() {
        let x = Tensor::<f64>::zeros(&[1, 2, 8, 8]);
        let w = Tensor::<f64>::zeros(&[2, 1, 3, 3]);
        let spec = Conv2dSpec {
            stride: 1,
            padding: 2,
            dilation: 2,
            groups: 2,
        };
        let y = conv2d_forward(&x, &w, &spec);
        assert_eq!(y.shape(), &[1, 2, 8, 8]);
    }

    #[test]
    fn avg_pool_border_counts_padding() {
        // constant input c: corner window has 4 valid cells -> 4c/9,
        // edge 6c/9, interior 9c/9
        let c = 0.9;
        let x = Tensor::<f64>::full(&[1, 1, 4, 4], c);
        let y = avg_pool3_forward(&x, 1);
        let d = y.data();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        assert!(close(d[0], 4.0 * c / 9.0), "corner {}", d[0]);
        assert!(close(d[1], 6.0 * c / 9.0), "edge {}", d[1]);
        assert!(close(d[5], c), "interior {}", d[5]);
    }

    #[test]
    fn avg_pool_matches_bruteforce_window_sum() {
        let mut rng = crate::rng::stream(3, &[1]);
        use rand::Rng;
        let vals: Vec<f64> = (0..2 * 3 * 5 * 5).map(|_| rng.gen::<f64>()).collect();
        let x = t(&[2, 3, 5, 5], &vals);
        for stride in [1usize, 2] {
            let y = avg_pool3_forward(&x, stride);
            let (oh, ow) = (y.shape()[2], y.shape()[3]);
            for b in 0..2 {
                for ch in 0..3 {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let iy = (oy * stride) as isize + ky - 1;
                                    let ix = (ox * stride) as isize + kx - 1;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 5 {
                                        acc += vals[((b * 3 + ch) * 5 + iy as usize) * 5
                                            + ix as usize];
                                    }
                                }
                            }
                            let got = y.data()[((b * 3 + ch) * oh + oy) * ow + ox];
                            assert!((got - acc / 9.0).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn max_pool_tie_takes_first() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 2.5);
        let (y, arg) = max_pool3_forward(&x, 1);
        assert!(y.data().iter().all(|&v| v == 2.5));
        // window centered at (0,0) has first valid cell at input (0,0)
        assert_eq!(arg[0], 0);
    }
}
