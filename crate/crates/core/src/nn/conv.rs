//! Convolution kernels lowered to GEMM via im2col / col2im.
//!
//! Everything is handled as a 3-D convolution over `[B, C, T, H, W]`; a 2-D
//! convolution is the special case `T = 1`, `kt = 1`.

use serde::{Deserialize, Serialize};

use super::tensor::{gemm, MatRef, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    /// Kernel extent as (time, height, width).
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn new2d(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel: [1, kernel, kernel], stride: [1, stride, stride], pad: [0, pad, pad] }
    }

    pub fn new3d(kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        Self { kernel, stride, pad }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output extent of a convolution over an input of extent `input`.
    pub fn conv_out(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for d in 0..3 {
            let padded = input[d] + 2 * self.pad[d];
            if padded < self.kernel[d] || self.stride[d] == 0 {
                return Err(Error::Shape(format!(
                    "kernel {:?} does not fit input {input:?} with padding {:?}",
                    self.kernel, self.pad
                )));
            }
            out[d] = (padded - self.kernel[d]) / self.stride[d] + 1;
        }
        Ok(out)
    }

    /// Output extent of a transposed convolution: `(in - 1) * s - 2p + k`.
    pub fn transpose_out(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for d in 0..3 {
            let full = (input[d].max(1) - 1) * self.stride[d] + self.kernel[d];
            if full < 2 * self.pad[d] + 1 {
                return Err(Error::Shape(format!(
                    "transposed conv with padding {:?} empties input {input:?}",
                    self.pad
                )));
            }
            out[d] = full - 2 * self.pad[d];
        }
        Ok(out)
    }
}

/// Splits a 4-D `[B, C, H, W]` or 5-D `[B, C, T, H, W]` shape into
/// `(batch, channels, [T, H, W])`.
pub fn split_shape(shape: &[usize]) -> Result<(usize, usize, [usize; 3])> {
    match *shape {
        [b, c, h, w] => Ok((b, c, [1, h, w])),
        [b, c, t, h, w] => Ok((b, c, [t, h, w])),
        _ => Err(Error::Shape(format!("convolution input must be 4-D or 5-D, got {shape:?}"))),
    }
}

pub fn join_shape(b: usize, c: usize, spatial: [usize; 3], five_d: bool) -> Vec<usize> {
    if five_d {
        vec![b, c, spatial[0], spatial[1], spatial[2]]
    } else {
        vec![b, c, spatial[1], spatial[2]]
    }
}

fn vol(d: [usize; 3]) -> usize {
    d[0] * d[1] * d[2]
}

/// Unfolds `x: [B, C, input]` into `[C * kvol, B * vol(out)]`.
fn im2col<T: Real>(
    x: &[T],
    batch: usize,
    channels: usize,
    input: [usize; 3],
    out: [usize; 3],
    g: &ConvGeom,
) -> Vec<T> {
    let p_out = vol(out);
    let cols = batch * p_out;
    let kvol = g.kernel_volume();
    let mut col = vec![T::zero(); channels * kvol * cols];
    let in_vol = vol(input);
    let [it, ih, iw] = input.map(|v| v as isize);
    let [ot, oh, ow] = out;
    let [st, sh, sw] = g.stride.map(|v| v as isize);
    let [pt, ph, pw] = g.pad.map(|v| v as isize);
    for c in 0..channels {
        for kt in 0..g.kernel[0] {
            for kh in 0..g.kernel[1] {
                for kw in 0..g.kernel[2] {
                    let row = ((c * g.kernel[0] + kt) * g.kernel[1] + kh) * g.kernel[2] + kw;
                    let row_buf = &mut col[row * cols..(row + 1) * cols];
                    for b in 0..batch {
                        let src = &x[(b * channels + c) * in_vol..(b * channels + c + 1) * in_vol];
                        let dst = &mut row_buf[b * p_out..(b + 1) * p_out];
                        for t in 0..ot {
                            let ti = t as isize * st - pt + kt as isize;
                            if ti < 0 || ti >= it {
                                continue;
                            }
                            for h in 0..oh {
                                let hi = h as isize * sh - ph + kh as isize;
                                if hi < 0 || hi >= ih {
                                    continue;
                                }
                                let src_row = ((ti * ih + hi) * iw) as usize;
                                let dst_row = (t * oh + h) * ow;
                                for w in 0..ow {
                                    let wi = w as isize * sw - pw + kw as isize;
                                    if wi >= 0 && wi < iw {
                                        dst[dst_row + w] = src[src_row + wi as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds `col` back into `[B, C, input]`.
fn col2im<T: Real>(
    col: &[T],
    batch: usize,
    channels: usize,
    input: [usize; 3],
    out: [usize; 3],
    g: &ConvGeom,
) -> Vec<T> {
    let p_out = vol(out);
    let cols = batch * p_out;
    let in_vol = vol(input);
    let mut x = vec![T::zero(); batch * channels * in_vol];
    let [it, ih, iw] = input.map(|v| v as isize);
    let [ot, oh, ow] = out;
    let [st, sh, sw] = g.stride.map(|v| v as isize);
    let [pt, ph, pw] = g.pad.map(|v| v as isize);
    for c in 0..channels {
        for kt in 0..g.kernel[0] {
            for kh in 0..g.kernel[1] {
                for kw in 0..g.kernel[2] {
                    let row = ((c * g.kernel[0] + kt) * g.kernel[1] + kh) * g.kernel[2] + kw;
                    let row_buf = &col[row * cols..(row + 1) * cols];
                    for b in 0..batch {
                        let dst = &mut x[(b * channels + c) * in_vol..(b * channels + c + 1) * in_vol];
                        let src = &row_buf[b * p_out..(b + 1) * p_out];
                        for t in 0..ot {
                            let ti = t as isize * st - pt + kt as isize;
                            if ti < 0 || ti >= it {
                                continue;
                            }
                            for h in 0..oh {
                                let hi = h as isize * sh - ph + kh as isize;
                                if hi < 0 || hi >= ih {
                                    continue;
                                }
                                let dst_row = ((ti * ih + hi) * iw) as usize;
                                let src_row = (t * oh + h) * ow;
                                for w in 0..ow {
                                    let wi = w as isize * sw - pw + kw as isize;
                                    if wi >= 0 && wi < iw {
                                        dst[dst_row + wi as usize] =
                                            dst[dst_row + wi as usize] + src[src_row + w];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[B, C, P]` -> `[C, B * P]`.
fn to_channel_major<T: Real>(x: &[T], batch: usize, channels: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            out[c * batch * p + b * p..c * batch * p + (b + 1) * p]
                .copy_from_slice(&x[(b * channels + c) * p..(b * channels + c + 1) * p]);
        }
    }
    out
}

/// `[C, B * P]` -> `[B, C, P]`, adding an optional per-channel bias.
fn from_channel_major<T: Real>(
    x: &[T],
    batch: usize,
    channels: usize,
    p: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = &x[c * batch * p + b * p..c * batch * p + (b + 1) * p];
            let dst = &mut out[(b * channels + c) * p..(b * channels + c + 1) * p];
            match bias {
                Some(bias) => {
                    let bc = bias[c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + bc;
                    }
                }
                None => dst.copy_from_slice(src),
            }
        }
    }
    out
}

fn bias_grad<T: Real>(dy: &[T], batch: usize, channels: usize, p: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, acc) in db.iter_mut().enumerate() {
            let s: T = dy[(b * channels + c) * p..(b * channels + c + 1) * p].iter().copied().sum();
            *acc = *acc + s;
        }
    }
    db
}

/// Problem dimensions shared by forward and backward passes.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

/// Cross-correlation. `w` is `[c_out, c_in, kt, kh, kw]` (any rank with the
/// same element order).
pub fn conv_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, d: &ConvDims, g: &ConvGeom) -> Vec<T> {
    let krows = d.c_in * g.kernel_volume();
    let cols = d.batch * vol(d.output);
    let col = im2col(x, d.batch, d.c_in, d.input, d.output, g);
    let mut y = vec![T::zero(); d.c_out * cols];
    gemm(MatRef::new(w, d.c_out, krows), MatRef::new(&col, krows, cols), T::zero(), &mut y);
    from_channel_major(&y, d.batch, d.c_out, vol(d.output), bias)
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    d: &ConvDims,
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let krows = d.c_in * g.kernel_volume();
    let p_out = vol(d.output);
    let cols = d.batch * p_out;
    let dy_cm = to_channel_major(dy, d.batch, d.c_out, p_out);
    let dw = need.1.then(|| {
        let col = im2col(x, d.batch, d.c_in, d.input, d.output, g);
        let mut dw = vec![T::zero(); d.c_out * krows];
        gemm(MatRef::new(&dy_cm, d.c_out, cols), MatRef::t(&col, krows, cols), T::zero(), &mut dw);
        dw
    });
    let dx = need.0.then(|| {
        let mut dcol = vec![T::zero(); krows * cols];
        gemm(MatRef::t(w, d.c_out, krows), MatRef::new(&dy_cm, d.c_out, cols), T::zero(), &mut dcol);
        col2im(&dcol, d.batch, d.c_in, d.input, d.output, g)
    });
    let db = need.2.then(|| bias_grad(dy, d.batch, d.c_out, p_out));
    ConvGrads { dx, dw, db }
}

/// Transposed convolution (the adjoint of [`conv_forward`] in `x`).
/// `w` is `[c_in, c_out, kt, kh, kw]`; `d.input` is the (small) input extent
/// and `d.output` the upsampled extent.
pub fn conv_transpose_forward<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
    g: &ConvGeom,
) -> Vec<T> {
    let krows = d.c_out * g.kernel_volume();
    let p_in = vol(d.input);
    let cols = d.batch * p_in;
    let x_cm = to_channel_major(x, d.batch, d.c_in, p_in);
    let mut col = vec![T::zero(); krows * cols];
    gemm(MatRef::t(w, d.c_in, krows), MatRef::new(&x_cm, d.c_in, cols), T::zero(), &mut col);
    let mut y = col2im(&col, d.batch, d.c_out, d.output, d.input, g);
    if let Some(bias) = bias {
        let p_out = vol(d.output);
        for b in 0..d.batch {
            for (c, &bc) in bias.iter().enumerate() {
                for v in &mut y[(b * d.c_out + c) * p_out..(b * d.c_out + c + 1) * p_out] {
                    *v = *v + bc;
                }
            }
        }
    }
    y
}

pub fn conv_transpose_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    d: &ConvDims,
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let krows = d.c_out * g.kernel_volume();
    let p_in = vol(d.input);
    let cols = d.batch * p_in;
    let dcol = im2col(dy, d.batch, d.c_out, d.output, d.input, g);
    let dx = need.0.then(|| {
        let mut dx_cm = vec![T::zero(); d.c_in * cols];
        gemm(MatRef::new(w, d.c_in, krows), MatRef::new(&dcol, krows, cols), T::zero(), &mut dx_cm);
        from_channel_major(&dx_cm, d.batch, d.c_in, p_in, None)
    });
    let dw = need.1.then(|| {
        let x_cm = to_channel_major(x, d.batch, d.c_in, p_in);
        let mut dw = vec![T::zero(); d.c_in * krows];
        gemm(MatRef::new(&x_cm, d.c_in, cols), MatRef::t(&dcol, krows, cols), T::zero(), &mut dw);
        dw
    });
    let db = need.2.then(|| bias_grad(dy, d.batch, d.c_out, vol(d.output)));
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-loop cross-correlation used as an independent reference.
    fn naive_conv(x: &[f64], w: &[f64], d: &ConvDims, g: &ConvGeom) -> Vec<f64> {
        let [it, ih, iw] = d.input;
        let [ot, oh, ow] = d.output;
        let [kt, kh, kw] = g.kernel;
        let mut y = vec![0.0; d.batch * d.c_out * ot * oh * ow];
        for b in 0..d.batch {
            for co in 0..d.c_out {
                for t in 0..ot {
                    for h in 0..oh {
                        for wo in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..d.c_in {
                                for a in 0..kt {
                                    for bb in 0..kh {
                                        for c in 0..kw {
                                            let ti = (t * g.stride[0] + a) as isize - g.pad[0] as isize;
                                            let hi = (h * g.stride[1] + bb) as isize - g.pad[1] as isize;
                                            let wi = (wo * g.stride[2] + c) as isize - g.pad[2] as isize;
                                            if ti < 0 || hi < 0 || wi < 0 {
                                                continue;
                                            }
                                            let (ti, hi, wi) = (ti as usize, hi as usize, wi as usize);
                                            if ti >= it || hi >= ih || wi >= iw {
                                                continue;
                                            }
                                            let xv = x[(((b * d.c_in + ci) * it + ti) * ih + hi) * iw + wi];
                                            let wv = w[(((co * d.c_in + ci) * kt + a) * kh + bb) * kw + c];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            y[(((b * d.c_out + co) * ot + t) * oh + h) * ow + wo] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_loops_3d() {
        let g = ConvGeom::new3d([3, 3, 2], [2, 1, 2], [1, 1, 0]);
        let input = [5, 4, 6];
        let output = g.conv_out(input).unwrap();
        let d = ConvDims { batch: 2, c_in: 3, c_out: 2, input, output };
        let x = lcg(2 * 3 * 5 * 4 * 6, 1);
        let w = lcg(2 * 3 * g.kernel_volume(), 2);
        let got = conv_forward(&x, &w, None, &d, &g);
        let want = naive_conv(&x, &w, &d, &g);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn output_size_one_dimensional_hand_case() {
        // length 10, kernel 4, stride 3, pad 1: windows start at -1, 2, 5; one at 8
        // would cover index 11, past the padded end at 10
        let g = ConvGeom::new3d([1, 1, 4], [1, 1, 3], [0, 0, 1]);
        assert_eq!(g.conv_out([1, 1, 10]).unwrap(), [1, 1, 3]);
        let g = ConvGeom::new2d(8, 4, 0);
        assert_eq!(g.conv_out([1, 32, 32]).unwrap(), [1, 7, 7]);
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_transpose(y)> with the same kernel layout
        let g = ConvGeom::new2d(4, 2, 1);
        let small = [1, 4, 4];
        let big = g.transpose_out(small).unwrap();
        assert_eq!(big, [1, 8, 8]);
        assert_eq!(g.conv_out(big).unwrap(), small);
        let (c_big, c_small) = (2, 3);
        // conv: big (c_big) -> small (c_small), kernel [c_small, c_big, k]
        // transpose: small (c_small) -> big (c_big), kernel [c_small, c_big, k]
        let w = lcg(c_small * c_big * 16, 3);
        let x = lcg(c_big * 64, 4);
        let y = lcg(c_small * 16, 5);
        let dc = ConvDims { batch: 1, c_in: c_big, c_out: c_small, input: big, output: small };
        let dt = ConvDims { batch: 1, c_in: c_small, c_out: c_big, input: small, output: big };
        let cx = conv_forward(&x, &w, None, &dc, &g);
        let ty = conv_transpose_forward(&y, &w, None, &dt, &g);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
