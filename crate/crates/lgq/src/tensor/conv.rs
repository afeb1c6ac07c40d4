//! 2-D convolution and average pooling over NCHW tensors.
//!
//! Convolution lowers each sample to a column matrix (im2col) and runs a
//! single gemm; the backward pass recomputes columns per sample instead of
//! saving them, trading a little compute for flat memory use.

use super::ops::gemm;
use super::{op_output, Tensor};
use crate::error::{Error, Result};

struct ConvDims {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
    stride: usize,
    pad: usize,
}

fn conv_dims(x: &[usize], wt: &[usize], stride: usize, pad: usize) -> Result<ConvDims> {
    if x.len() != 4 || wt.len() != 4 || x[1] != wt[1] {
        return Err(Error::shape("conv2d", x, wt));
    }
    if stride == 0 {
        return Err(Error::contract("conv2d", "stride must be >= 1"));
    }
    let (h, w, kh, kw) = (x[2], x[3], wt[2], wt[3]);
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::contract(
            "conv2d",
            format!("kernel {kh}x{kw} exceeds padded input {h}x{w} (pad {pad})"),
        ));
    }
    Ok(ConvDims {
        n: x[0],
        c_in: x[1],
        h,
        w,
        c_out: wt[0],
        kh,
        kw,
        h_out: (h + 2 * pad - kh) / stride + 1,
        w_out: (w + 2 * pad - kw) / stride + 1,
        stride,
        pad,
    })
}

/// Fills `col` (`[c_in*kh*kw, h_out*w_out]` row-major) from one sample.
fn im2col(x: &[f32], d: &ConvDims, col: &mut [f32]) {
    let l = d.h_out * d.w_out;
    for c in 0..d.c_in {
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = ((c * d.kh + i) * d.kw + j) * l;
                for oh in 0..d.h_out {
                    let ih = (oh * d.stride + i) as isize - d.pad as isize;
                    for ow in 0..d.w_out {
                        let iw = (ow * d.stride + j) as isize - d.pad as isize;
                        col[row + oh * d.w_out + ow] = if ih >= 0
                            && (ih as usize) < d.h
                            && iw >= 0
                            && (iw as usize) < d.w
                        {
                            x[(c * d.h + ih as usize) * d.w + iw as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column gradient back onto one sample (inverse of im2col).
fn col2im(col: &[f32], d: &ConvDims, gx: &mut [f32]) {
    let l = d.h_out * d.w_out;
    for c in 0..d.c_in {
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = ((c * d.kh + i) * d.kw + j) * l;
                for oh in 0..d.h_out {
                    let ih = (oh * d.stride + i) as isize - d.pad as isize;
                    if ih < 0 || ih as usize >= d.h {
                        continue;
                    }
                    for ow in 0..d.w_out {
                        let iw = (ow * d.stride + j) as isize - d.pad as isize;
                        if iw < 0 || iw as usize >= d.w {
                            continue;
                        }
                        gx[(c * d.h + ih as usize) * d.w + iw as usize] +=
                            col[row + oh * d.w_out + ow];
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// Cross-correlation of `[N, C_in, H, W]` with `[C_out, C_in, kh, kw]`
    /// at the given stride and symmetric zero padding.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let d = conv_dims(self.shape(), weight.shape(), stride, pad)?;
        let l = d.h_out * d.w_out;
        let kdim = d.c_in * d.kh * d.kw;
        let mut out = vec![0.0f32; d.n * d.c_out * l];
        let mut col = vec![0.0f32; kdim * l];
        {
            let (xd, wd) = (self.data(), weight.data());
            let sample = d.c_in * d.h * d.w;
            for n in 0..d.n {
                im2col(&xd[n * sample..(n + 1) * sample], &d, &mut col);
                gemm(
                    d.c_out,
                    kdim,
                    l,
                    1.0,
                    &wd,
                    kdim as isize,
                    1,
                    &col,
                    l as isize,
                    1,
                    0.0,
                    &mut out[n * d.c_out * l..(n + 1) * d.c_out * l],
                    l as isize,
                    1,
                );
            }
        }
        let (x, wt) = (self.clone(), weight.clone());
        Ok(op_output(
            vec![self.clone(), weight.clone()],
            out,
            vec![d.n, d.c_out, d.h_out, d.w_out],
            move |up| {
                let (xd, wd) = (x.data(), wt.data());
                let sample = d.c_in * d.h * d.w;
                let mut gx = vec![0.0f32; xd.len()];
                let mut gw = vec![0.0f32; wd.len()];
                let mut col = vec![0.0f32; kdim * l];
                let mut gcol = vec![0.0f32; kdim * l];
                for n in 0..d.n {
                    let g = &up[n * d.c_out * l..(n + 1) * d.c_out * l];
                    im2col(&xd[n * sample..(n + 1) * sample], &d, &mut col);
                    // dW += g . col^T
                    gemm(
                        d.c_out,
                        l,
                        kdim,
                        1.0,
                        g,
                        l as isize,
                        1,
                        &col,
                        1,
                        l as isize,
                        1.0,
                        &mut gw,
                        kdim as isize,
                        1,
                    );
                    // dcol = W^T . g, scattered back to the sample
                    gemm(
                        kdim,
                        d.c_out,
                        l,
                        1.0,
                        &wd,
                        1,
                        kdim as isize,
                        g,
                        l as isize,
                        1,
                        0.0,
                        &mut gcol,
                        l as isize,
                        1,
                    );
                    col2im(&gcol, &d, &mut gx[n * sample..(n + 1) * sample]);
                }
                Ok(vec![Some(gx), Some(gw)])
            },
        ))
    }

    /// Non-overlapping-friendly average pooling with square windows.
    pub fn avgpool2d(&self, kernel: usize, stride: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape("avgpool2d", s, &[0, 0, 0, 0]));
        }
        if kernel == 0 || stride == 0 || s[2] < kernel || s[3] < kernel {
            return Err(Error::contract(
                "avgpool2d",
                format!("kernel {kernel} stride {stride} on {}x{}", s[2], s[3]),
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let h_out = (h - kernel) / stride + 1;
        let w_out = (w - kernel) / stride + 1;
        let inv = 1.0 / (kernel * kernel) as f32;
        let mut out = vec![0.0f32; n * c * h_out * w_out];
        {
            let xd = self.data();
            for nc in 0..n * c {
                let plane = &xd[nc * h * w..(nc + 1) * h * w];
                let o = &mut out[nc * h_out * w_out..(nc + 1) * h_out * w_out];
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let mut acc = 0.0f32;
                        for i in 0..kernel {
                            for j in 0..kernel {
                                acc += plane[(oh * stride + i) * w + ow * stride + j];
                            }
                        }
                        o[oh * w_out + ow] = acc * inv;
                    }
                }
            }
        }
        let in_len = self.numel();
        Ok(op_output(
            vec![self.clone()],
            out,
            vec![n, c, h_out, w_out],
            move |up| {
                let mut gx = vec![0.0f32; in_len];
                for nc in 0..n * c {
                    let g = &up[nc * h_out * w_out..(nc + 1) * h_out * w_out];
                    let gp = &mut gx[nc * h * w..(nc + 1) * h * w];
                    for oh in 0..h_out {
                        for ow in 0..w_out {
                            let v = g[oh * w_out + ow] * inv;
                            for i in 0..kernel {
                                for j in 0..kernel {
                                    gp[(oh * stride + i) * w + ow * stride + j] += v;
                                }
                            }
                        }
                    }
                }
                Ok(vec![Some(gx)])
            },
        ))
    }
}
