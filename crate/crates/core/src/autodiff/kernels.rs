//! Raw forward/backward loops over `B×C×H×W` buffers.
//!
//! Forward kernels take a `madds` counter and add the number of
//! multiply-accumulates they actually execute. Zero padding is materialized,
//! so a padded 3×3 tap still counts as one multiply-accumulate.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

pub fn strided_len(len: usize, stride: usize) -> usize {
    (len - 1) / stride + 1
}

fn subsample(x: &[f64], c: usize, h: usize, w: usize, stride: usize) -> Vec<f64> {
    let (ho, wo) = (strided_len(h, stride), strided_len(w, stride));
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                out.push(plane[i * stride * w + j * stride]);
            }
        }
    }
    out
}

/// Pointwise convolution, `w` is `co×ci`.
pub fn conv1x1_forward(x: &[f64], d: Dims, w: &[f64], co: usize, stride: usize, madds: &mut u64) -> Vec<f64> {
    let (ho, wo) = (strided_len(d.h, stride), strided_len(d.w, stride));
    let po = ho * wo;
    let ci = d.c;
    let mut out = vec![0.0; d.b * co * po];
    for b in 0..d.b {
        let xb = &x[b * ci * d.plane()..(b + 1) * ci * d.plane()];
        let sub;
        let xs: &[f64] = if stride == 1 {
            xb
        } else {
            sub = subsample(xb, ci, d.h, d.w, stride);
            &sub
        };
        let ob = &mut out[b * co * po..(b + 1) * co * po];
        for o in 0..co {
            let orow = &mut ob[o * po..(o + 1) * po];
            for i in 0..ci {
                let wv = w[o * ci + i];
                let xrow = &xs[i * po..(i + 1) * po];
                for (acc, &xv) in orow.iter_mut().zip(xrow) {
                    *acc += wv * xv;
                }
                *madds += po as u64;
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w)`.
pub fn conv1x1_backward(x: &[f64], d: Dims, w: &[f64], co: usize, stride: usize, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (ho, wo) = (strided_len(d.h, stride), strided_len(d.w, stride));
    let po = ho * wo;
    let ci = d.c;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gxs = vec![0.0; ci * po];
    for b in 0..d.b {
        let xb = &x[b * ci * d.plane()..(b + 1) * ci * d.plane()];
        let sub;
        let xs: &[f64] = if stride == 1 {
            xb
        } else {
            sub = subsample(xb, ci, d.h, d.w, stride);
            &sub
        };
        let gb = &g[b * co * po..(b + 1) * co * po];
        gxs.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..co {
            let grow = &gb[o * po..(o + 1) * po];
            for i in 0..ci {
                let xrow = &xs[i * po..(i + 1) * po];
                let mut acc = 0.0;
                for (&gv, &xv) in grow.iter().zip(xrow) {
                    acc += gv * xv;
                }
                gw[o * ci + i] += acc;
                let wv = w[o * ci + i];
                for (dst, &gv) in gxs[i * po..(i + 1) * po].iter_mut().zip(grow) {
                    *dst += wv * gv;
                }
            }
        }
        let gxb = &mut gx[b * ci * d.plane()..(b + 1) * ci * d.plane()];
        for i in 0..ci {
            for r in 0..ho {
                for c in 0..wo {
                    gxb[i * d.plane() + r * stride * d.w + c * stride] += gxs[i * po + r * wo + c];
                }
            }
        }
    }
    (gx, gw)
}

fn padded_plane(src: &[f64], h: usize, w: usize, buf: &mut [f64]) {
    let pw = w + 2;
    buf.iter_mut().for_each(|v| *v = 0.0);
    for r in 0..h {
        buf[(r + 1) * pw + 1..(r + 1) * pw + 1 + w].copy_from_slice(&src[r * w..(r + 1) * w]);
    }
}

/// 3×3 depthwise convolution with zero padding 1; `w` is `c×9`.
pub fn depthwise3x3_forward(x: &[f64], d: Dims, w: &[f64], stride: usize, madds: &mut u64) -> Vec<f64> {
    let (ho, wo) = (strided_len(d.h, stride), strided_len(d.w, stride));
    let pw = d.w + 2;
    let mut pad = vec![0.0; (d.h + 2) * pw];
    let mut out = vec![0.0; d.b * d.c * ho * wo];
    for b in 0..d.b {
        for ch in 0..d.c {
            let base = (b * d.c + ch) * d.plane();
            padded_plane(&x[base..base + d.plane()], d.h, d.w, &mut pad);
            let obase = (b * d.c + ch) * ho * wo;
            let oplane = &mut out[obase..obase + ho * wo];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = w[ch * 9 + ky * 3 + kx];
                    for i in 0..ho {
                        let prow = &pad[(i * stride + ky) * pw..];
                        let orow = &mut oplane[i * wo..(i + 1) * wo];
                        for (j, acc) in orow.iter_mut().enumerate() {
                            *acc += wv * prow[j * stride + kx];
                        }
                    }
                    *madds += (ho * wo) as u64;
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w)`.
pub fn depthwise3x3_backward(x: &[f64], d: Dims, w: &[f64], stride: usize, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (ho, wo) = (strided_len(d.h, stride), strided_len(d.w, stride));
    let pw = d.w + 2;
    let mut pad = vec![0.0; (d.h + 2) * pw];
    let mut gpad = vec![0.0; (d.h + 2) * pw];
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for b in 0..d.b {
        for ch in 0..d.c {
            let base = (b * d.c + ch) * d.plane();
            padded_plane(&x[base..base + d.plane()], d.h, d.w, &mut pad);
            gpad.iter_mut().for_each(|v| *v = 0.0);
            let gplane = &g[(b * d.c + ch) * ho * wo..(b * d.c + ch + 1) * ho * wo];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = w[ch * 9 + ky * 3 + kx];
                    let mut acc = 0.0;
                    for i in 0..ho {
                        let row = (i * stride + ky) * pw;
                        for j in 0..wo {
                            let gv = gplane[i * wo + j];
                            let p = row + j * stride + kx;
                            acc += gv * pad[p];
                            gpad[p] += wv * gv;
                        }
                    }
                    gw[ch * 9 + ky * 3 + kx] += acc;
                }
            }
            let gxp = &mut gx[base..base + d.plane()];
            for r in 0..d.h {
                gxp[r * d.w..(r + 1) * d.w].copy_from_slice(&gpad[(r + 1) * pw + 1..(r + 1) * pw + 1 + d.w]);
            }
        }
    }
    (gx, gw)
}

pub fn avg_pool_forward(x: &[f64], d: Dims, oh: usize, ow: usize) -> Vec<f64> {
    let (kh, kw) = (d.h / oh, d.w / ow);
    let norm = 1.0 / (kh * kw) as f64;
    let mut out = vec![0.0; d.b * d.c * oh * ow];
    for bc in 0..d.b * d.c {
        let plane = &x[bc * d.plane()..(bc + 1) * d.plane()];
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for r in i * kh..(i + 1) * kh {
                    for c in j * kw..(j + 1) * kw {
                        acc += plane[r * d.w + c];
                    }
                }
                out[(bc * oh + i) * ow + j] = acc * norm;
            }
        }
    }
    out
}

pub fn avg_pool_backward(d: Dims, oh: usize, ow: usize, g: &[f64]) -> Vec<f64> {
    let (kh, kw) = (d.h / oh, d.w / ow);
    let norm = 1.0 / (kh * kw) as f64;
    let mut gx = vec![0.0; d.b * d.c * d.plane()];
    for bc in 0..d.b * d.c {
        for r in 0..d.h {
            for c in 0..d.w {
                gx[bc * d.plane() + r * d.w + c] = g[(bc * oh + r / kh) * ow + c / kw] * norm;
            }
        }
    }
    gx
}

/// Source taps for one output coordinate of a 2× align-corners-false resize.
#[derive(Clone, Copy, Debug)]
pub struct Taps {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: f64,
    pub w_hi: f64,
}

pub fn upsample_taps(len: usize) -> Vec<Taps> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            let frac = src - lo as f64;
            Taps {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

pub fn upsample2x_forward(x: &[f64], d: Dims) -> Vec<f64> {
    let (ty, tx) = (upsample_taps(d.h), upsample_taps(d.w));
    let (oh, ow) = (2 * d.h, 2 * d.w);
    let mut out = vec![0.0; d.b * d.c * oh * ow];
    for bc in 0..d.b * d.c {
        let plane = &x[bc * d.plane()..(bc + 1) * d.plane()];
        let oplane = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for (i, y) in ty.iter().enumerate() {
            for (j, xt) in tx.iter().enumerate() {
                let top = xt.w_lo * plane[y.lo * d.w + xt.lo] + xt.w_hi * plane[y.lo * d.w + xt.hi];
                let bot = xt.w_lo * plane[y.hi * d.w + xt.lo] + xt.w_hi * plane[y.hi * d.w + xt.hi];
                oplane[i * ow + j] = y.w_lo * top + y.w_hi * bot;
            }
        }
    }
    out
}

pub fn upsample2x_backward(d: Dims, g: &[f64]) -> Vec<f64> {
    let (ty, tx) = (upsample_taps(d.h), upsample_taps(d.w));
    let (oh, ow) = (2 * d.h, 2 * d.w);
    let mut gx = vec![0.0; d.b * d.c * d.plane()];
    for bc in 0..d.b * d.c {
        let gplane = &g[bc * oh * ow..(bc + 1) * oh * ow];
        let dst = &mut gx[bc * d.plane()..(bc + 1) * d.plane()];
        for (i, y) in ty.iter().enumerate() {
            for (j, xt) in tx.iter().enumerate() {
                let gv = gplane[i * ow + j];
                dst[y.lo * d.w + xt.lo] += gv * y.w_lo * xt.w_lo;
                dst[y.lo * d.w + xt.hi] += gv * y.w_lo * xt.w_hi;
                dst[y.hi * d.w + xt.lo] += gv * y.w_hi * xt.w_lo;
                dst[y.hi * d.w + xt.hi] += gv * y.w_hi * xt.w_hi;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_taps_match_half_pixel_centres() {
        let t = upsample_taps(2);
        // output 0 -> src -0.25 clamps to 0; output 1 -> src 0.25
        assert_eq!((t[0].lo, t[0].hi), (0, 1));
        assert_eq!(t[0].w_hi, 0.0);
        assert!((t[1].w_hi - 0.25).abs() < 1e-15);
        // output 3 -> src 1.25, both taps clamp to the last row
        assert_eq!((t[3].lo, t[3].hi), (1, 1));
    }

    #[test]
    fn depthwise_counts_padded_taps() {
        let d = Dims { b: 1, c: 2, h: 3, w: 3 };
        let mut madds = 0;
        depthwise3x3_forward(&[1.0; 18], d, &[1.0; 18], 1, &mut madds);
        assert_eq!(madds, 3 * 3 * 2 * 9);
    }
}
