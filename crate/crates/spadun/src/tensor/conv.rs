//! Convolution and spatial resampling primitives (direct loops, NCHW).

use rayon::prelude::*;

use super::kernels::Elem;
use super::ops::finish_op;
use super::{Result, Storage, Tensor, TensorError};

/// Spatial scale change used between U-net levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleMode {
    AvgPool2,
    NearestUp2,
}

fn conv_out_dim(
    op: &'static str,
    size: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<usize> {
    if size + 2 * pad < k {
        return Err(TensorError::ShapeMismatch {
            op,
            details: format!("kernel {k} larger than padded input {size}+2*{pad}"),
        });
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

fn expect_rank4(op: &'static str, t: &Tensor) -> Result<()> {
    if t.rank() != 4 {
        return Err(TensorError::ShapeMismatch {
            op,
            details: format!("expected rank-4 NCHW tensor, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}

struct ConvDims {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

// Valid output-x range for a kernel column: ix = ox*stride + kx - pad must
// land in [0, w).
fn ox_range(w: usize, ow: usize, stride: usize, pad: usize, kx: usize) -> (usize, usize) {
    if kx + 1 > w + pad {
        return (0, 0);
    }
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx).div_ceil(stride)
    };
    let max_ix = w + pad - kx - 1;
    let hi = (max_ix / stride + 1).min(ow);
    (lo.min(hi), hi)
}

fn conv2d_fwd<T: Elem>(x: &[T], wt: &[T], bias: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let mut out = vec![T::ZERO; d.b * d.cout * d.oh * d.ow];
    let plane = d.oh * d.ow;
    out.par_chunks_mut(plane).enumerate().for_each(|(pi, op)| {
        let bi = pi / d.cout;
        let co = pi % d.cout;
        if let Some(bv) = bias {
            op.fill(bv[co]);
        }
        for ci in 0..d.cin {
            let xin = &x[(bi * d.cin + ci) * d.h * d.w..(bi * d.cin + ci + 1) * d.h * d.w];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let wv = wt[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                    let (ox_lo, ox_hi) = ox_range(d.w, d.ow, d.stride, d.pad, kx);
                    for oy in 0..d.oh {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let irow = iy as usize * d.w;
                        let orow = oy * d.ow;
                        let xoff = kx as isize - d.pad as isize;
                        for ox in ox_lo..ox_hi {
                            let ix = (ox * d.stride) as isize + xoff;
                            op[orow + ox] += wv * xin[irow + ix as usize];
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv2d_grad_input<T: Elem>(up: &[T], wt: &[T], d: &ConvDims) -> Vec<T> {
    let mut gin = vec![T::ZERO; d.b * d.cin * d.h * d.w];
    let plane = d.h * d.w;
    gin.par_chunks_mut(plane).enumerate().for_each(|(pi, gp)| {
        let bi = pi / d.cin;
        let ci = pi % d.cin;
        for co in 0..d.cout {
            let urow0 = (bi * d.cout + co) * d.oh * d.ow;
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let wv = wt[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                    let (ox_lo, ox_hi) = ox_range(d.w, d.ow, d.stride, d.pad, kx);
                    for oy in 0..d.oh {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let irow = iy as usize * d.w;
                        let xoff = kx as isize - d.pad as isize;
                        for ox in ox_lo..ox_hi {
                            let ix = ((ox * d.stride) as isize + xoff) as usize;
                            gp[irow + ix] += wv * up[urow0 + oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    });
    gin
}

fn conv2d_grad_weight<T: Elem>(up: &[T], x: &[T], d: &ConvDims) -> Vec<T> {
    let mut gw = vec![T::ZERO; d.cout * d.cin * d.kh * d.kw];
    let per_co = d.cin * d.kh * d.kw;
    gw.par_chunks_mut(per_co).enumerate().for_each(|(co, gwp)| {
        for bi in 0..d.b {
            let urow0 = (bi * d.cout + co) * d.oh * d.ow;
            for ci in 0..d.cin {
                let xin = &x[(bi * d.cin + ci) * d.h * d.w..(bi * d.cin + ci + 1) * d.h * d.w];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let (ox_lo, ox_hi) = ox_range(d.w, d.ow, d.stride, d.pad, kx);
                        let mut acc = T::ZERO;
                        for oy in 0..d.oh {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let irow = iy as usize * d.w;
                            let xoff = kx as isize - d.pad as isize;
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * d.stride) as isize + xoff) as usize;
                                acc += up[urow0 + oy * d.ow + ox] * xin[irow + ix];
                            }
                        }
                        let slot = (ci * d.kh + ky) * d.kw + kx;
                        gwp[slot] += acc;
                    }
                }
            }
        }
    });
    gw
}

fn conv2d_grad_bias<T: Elem>(up: &[T], d: &ConvDims) -> Vec<T> {
    let mut gb = vec![T::ZERO; d.cout];
    let plane = d.oh * d.ow;
    for bi in 0..d.b {
        for (co, g) in gb.iter_mut().enumerate() {
            let base = (bi * d.cout + co) * plane;
            for v in &up[base..base + plane] {
                *g += *v;
            }
        }
    }
    gb
}

#[allow(clippy::too_many_arguments)]
fn conv2d_node<T: Elem>(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    d: ConvDims,
) -> Tensor {
    let x = T::slice(input.storage());
    let wt = T::slice(weight.storage());
    let bv = bias.map(|b| T::slice(b.storage()));
    let out = conv2d_fwd(x, wt, bv, &d);
    let out_shape = vec![d.b, d.cout, d.oh, d.ow];
    let mut inputs = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    finish_op(
        T::storage(out),
        out_shape,
        "conv2d",
        inputs,
        move |inputs, _out, up| {
            let uv = T::slice(up);
            let x = T::slice(inputs[0].storage());
            let wt = T::slice(inputs[1].storage());
            let mut grads: Vec<Option<Storage>> = vec![None; inputs.len()];
            if inputs[0].tracks_grad() {
                grads[0] = Some(T::storage(conv2d_grad_input(uv, wt, &d)));
            }
            if inputs[1].tracks_grad() {
                grads[1] = Some(T::storage(conv2d_grad_weight(uv, x, &d)));
            }
            if inputs.len() == 3 && inputs[2].tracks_grad() {
                grads[2] = Some(T::storage(conv2d_grad_bias(uv, &d)));
            }
            Ok(grads)
        },
    )
}

// Depthwise: one k×k filter per channel, channel i of the output depends
// only on channel i of the input.
fn dwconv2d_fwd<T: Elem>(x: &[T], wt: &[T], d: &ConvDims) -> Vec<T> {
    let mut out = vec![T::ZERO; d.b * d.cin * d.oh * d.ow];
    let plane = d.oh * d.ow;
    out.par_chunks_mut(plane).enumerate().for_each(|(pi, op)| {
        let bi = pi / d.cin;
        let c = pi % d.cin;
        let xin = &x[(bi * d.cin + c) * d.h * d.w..(bi * d.cin + c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let wv = wt[(c * d.kh + ky) * d.kw + kx];
                let (ox_lo, ox_hi) = ox_range(d.w, d.ow, d.stride, d.pad, kx);
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let irow = iy as usize * d.w;
                    let orow = oy * d.ow;
                    let xoff = kx as isize - d.pad as isize;
                    for ox in ox_lo..ox_hi {
                        let ix = ((ox * d.stride) as isize + xoff) as usize;
                        op[orow + ox] += wv * xin[irow + ix];
                    }
                }
            }
        }
    });
    out
}

fn dwconv2d_grad_input<T: Elem>(up: &[T], wt: &[T], d: &ConvDims) -> Vec<T> {
    let mut gin = vec![T::ZERO; d.b * d.cin * d.h * d.w];
    let plane = d.h * d.w;
    gin.par_chunks_mut(plane).enumerate().for_each(|(pi, gp)| {
        let bi = pi / d.cin;
        let c = pi % d.cin;
        let urow0 = (bi * d.cin + c) * d.oh * d.ow;
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let wv = wt[(c * d.kh + ky) * d.kw + kx];
                let (ox_lo, ox_hi) = ox_range(d.w, d.ow, d.stride, d.pad, kx);
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let irow = iy as usize * d.w;
                    let xoff = kx as isize - d.pad as isize;
                    for ox in ox_lo..ox_hi {
                        let ix = ((ox * d.stride) as isize + xoff) as usize;
                        gp[irow + ix] += wv * up[urow0 + oy * d.ow + ox];
                    }
                }
            }
        }
    });
    gin
}

fn dwconv2d_grad_weight<T: Elem>(up: &[T], x: &[T], d: &ConvDims) -> Vec<T> {
    let mut gw = vec![T::ZERO; d.cin * d.kh * d.kw];
    let per_c = d.kh * d.kw;
    gw.par_chunks_mut(per_c).enumerate().for_each(|(c, gwp)| {
        for bi in 0..d.b {
            let urow0 = (bi * d.cin + c) * d.oh * d.ow;
            let xin = &x[(bi * d.cin + c) * d.h * d.w..(bi * d.cin + c + 1) * d.h * d.w];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let (ox_lo, ox_hi) = ox_range(d.w, d.ow, d.stride, d.pad, kx);
                    let mut acc = T::ZERO;
                    for oy in 0..d.oh {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let irow = iy as usize * d.w;
                        let xoff = kx as isize - d.pad as isize;
                        for ox in ox_lo..ox_hi {
                            let ix = ((ox * d.stride) as isize + xoff) as usize;
                            acc += up[urow0 + oy * d.ow + ox] * xin[irow + ix];
                        }
                    }
                    gwp[ky * d.kw + kx] += acc;
                }
            }
        }
    });
    gw
}

impl Tensor {
    /// 2-D convolution, NCHW input against `[cout, cin, kh, kw]` weights,
    /// symmetric zero padding.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        expect_rank4("conv2d", self)?;
        expect_rank4("conv2d", weight)?;
        if self.dtype() != weight.dtype() {
            return Err(TensorError::DTypeMismatch {
                op: "conv2d",
                lhs: self.dtype(),
                rhs: weight.dtype(),
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                details: "stride must be >= 1".into(),
            });
        }
        let (b, cin, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        let (cout, wcin, kh, kw) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        if wcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                details: format!(
                    "input has {cin} channels but weight expects {wcin} (weight shape {:?})",
                    weight.shape()
                ),
            });
        }
        if let Some(bt) = bias {
            if bt.shape() != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    details: format!("bias shape {:?} != [{cout}]", bt.shape()),
                });
            }
            if bt.dtype() != self.dtype() {
                return Err(TensorError::DTypeMismatch {
                    op: "conv2d",
                    lhs: self.dtype(),
                    rhs: bt.dtype(),
                });
            }
        }
        let oh = conv_out_dim("conv2d", h, kh, stride, padding)?;
        let ow = conv_out_dim("conv2d", w, kw, stride, padding)?;
        let dims = ConvDims {
            b,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
            stride,
            pad: padding,
        };
        Ok(match self.storage() {
            Storage::F32(_) => conv2d_node::<f32>(self, weight, bias, dims),
            Storage::F64(_) => conv2d_node::<f64>(self, weight, bias, dims),
        })
    }

    /// Depthwise 2-D convolution with `[c, 1, kh, kw]` weights.
    pub fn dwconv2d(&self, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        expect_rank4("dwconv2d", self)?;
        expect_rank4("dwconv2d", weight)?;
        if self.dtype() != weight.dtype() {
            return Err(TensorError::DTypeMismatch {
                op: "dwconv2d",
                lhs: self.dtype(),
                rhs: weight.dtype(),
            });
        }
        let (b, c, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        if weight.shape()[0] != c || weight.shape()[1] != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "dwconv2d",
                details: format!(
                    "weight shape {:?} incompatible with {c}-channel input (want [{c},1,kh,kw])",
                    weight.shape()
                ),
            });
        }
        let (kh, kw) = (weight.shape()[2], weight.shape()[3]);
        let oh = conv_out_dim("dwconv2d", h, kh, stride, padding)?;
        let ow = conv_out_dim("dwconv2d", w, kw, stride, padding)?;
        let dims = ConvDims {
            b,
            cin: c,
            h,
            w,
            cout: c,
            kh,
            kw,
            oh,
            ow,
            stride,
            pad: padding,
        };
        fn node<T: Elem>(input: &Tensor, weight: &Tensor, d: ConvDims) -> Tensor {
            let out = dwconv2d_fwd(T::slice(input.storage()), T::slice(weight.storage()), &d);
            let out_shape = vec![d.b, d.cin, d.oh, d.ow];
            finish_op(
                T::storage(out),
                out_shape,
                "dwconv2d",
                vec![input.clone(), weight.clone()],
                move |inputs, _out, up| {
                    let uv = T::slice(up);
                    let mut grads: Vec<Option<Storage>> = vec![None, None];
                    if inputs[0].tracks_grad() {
                        let wt = T::slice(inputs[1].storage());
                        grads[0] = Some(T::storage(dwconv2d_grad_input(uv, wt, &d)));
                    }
                    if inputs[1].tracks_grad() {
                        let x = T::slice(inputs[0].storage());
                        grads[1] = Some(T::storage(dwconv2d_grad_weight(uv, x, &d)));
                    }
                    Ok(grads)
                },
            )
        }
        Ok(match self.storage() {
            Storage::F32(_) => node::<f32>(self, weight, dims),
            Storage::F64(_) => node::<f64>(self, weight, dims),
        })
    }

    /// Halves both spatial dims by averaging 2x2 windows.
    pub fn avg_pool2(&self) -> Result<Tensor> {
        expect_rank4("avg_pool2", self)?;
        let (b, c, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "avg_pool2",
                details: format!("spatial dims must be even, got {h}x{w}"),
            });
        }
        fn run<T: Elem>(x: &Tensor, b: usize, c: usize, h: usize, w: usize) -> Tensor {
            let (oh, ow) = (h / 2, w / 2);
            let xv = T::slice(x.storage());
            let quarter = T::from_f64(0.25);
            let mut out = vec![T::ZERO; b * c * oh * ow];
            for p in 0..b * c {
                let xp = &xv[p * h * w..(p + 1) * h * w];
                let op = &mut out[p * oh * ow..(p + 1) * oh * ow];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let i = 2 * oy * w + 2 * ox;
                        op[oy * ow + ox] =
                            (xp[i] + xp[i + 1] + xp[i + w] + xp[i + w + 1]) * quarter;
                    }
                }
            }
            finish_op(
                T::storage(out),
                vec![b, c, oh, ow],
                "avg_pool2",
                vec![x.clone()],
                move |_inputs, _out, up| {
                    let uv = T::slice(up);
                    let mut g = vec![T::ZERO; b * c * h * w];
                    for p in 0..b * c {
                        let gp = &mut g[p * h * w..(p + 1) * h * w];
                        let up_p = &uv[p * oh * ow..(p + 1) * oh * ow];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let v = up_p[oy * ow + ox] * quarter;
                                let i = 2 * oy * w + 2 * ox;
                                gp[i] += v;
                                gp[i + 1] += v;
                                gp[i + w] += v;
                                gp[i + w + 1] += v;
                            }
                        }
                    }
                    Ok(vec![Some(T::storage(g))])
                },
            )
        }
        Ok(match self.storage() {
            Storage::F32(_) => run::<f32>(self, b, c, h, w),
            Storage::F64(_) => run::<f64>(self, b, c, h, w),
        })
    }

    /// Doubles both spatial dims by nearest-neighbour replication.
    pub fn upsample_nearest2(&self) -> Result<Tensor> {
        expect_rank4("upsample_nearest2", self)?;
        let (b, c, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        fn run<T: Elem>(x: &Tensor, b: usize, c: usize, h: usize, w: usize) -> Tensor {
            let (oh, ow) = (2 * h, 2 * w);
            let xv = T::slice(x.storage());
            let mut out = vec![T::ZERO; b * c * oh * ow];
            for p in 0..b * c {
                let xp = &xv[p * h * w..(p + 1) * h * w];
                let op = &mut out[p * oh * ow..(p + 1) * oh * ow];
                for iy in 0..h {
                    for ix in 0..w {
                        let v = xp[iy * w + ix];
                        let o = 2 * iy * ow + 2 * ix;
                        op[o] = v;
                        op[o + 1] = v;
                        op[o + ow] = v;
                        op[o + ow + 1] = v;
                    }
                }
            }
            finish_op(
                T::storage(out),
                vec![b, c, oh, ow],
                "upsample_nearest2",
                vec![x.clone()],
                move |_inputs, _out, up| {
                    let uv = T::slice(up);
                    let mut g = vec![T::ZERO; b * c * h * w];
                    for p in 0..b * c {
                        let gp = &mut g[p * h * w..(p + 1) * h * w];
                        let up_p = &uv[p * oh * ow..(p + 1) * oh * ow];
                        for iy in 0..h {
                            for ix in 0..w {
                                let o = 2 * iy * ow + 2 * ix;
                                gp[iy * w + ix] =
                                    up_p[o] + up_p[o + 1] + up_p[o + ow] + up_p[o + ow + 1];
                            }
                        }
                    }
                    Ok(vec![Some(T::storage(g))])
                },
            )
        }
        Ok(match self.storage() {
            Storage::F32(_) => run::<f32>(self, b, c, h, w),
            Storage::F64(_) => run::<f64>(self, b, c, h, w),
        })
    }

    pub fn resample(&self, mode: ResampleMode) -> Result<Tensor> {
        match mode {
            ResampleMode::AvgPool2 => self.avg_pool2(),
            ResampleMode::NearestUp2 => self.upsample_nearest2(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{backward, rand_uniform, DType};
    use super::*;
    use rand::SeedableRng;

    /// Reference six-nested-loop convolution, independent of the
    /// production kernel.
    pub(crate) fn conv2d_naive(
        x: &[f64],
        xs: &[usize],
        w: &[f64],
        ws: &[usize],
        bias: Option<&[f64]>,
        stride: usize,
        pad: usize,
    ) -> (Vec<f64>, Vec<usize>) {
        let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; b * cout * oh * ow];
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.map_or(0.0, |bv| bv[co]);
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                        acc += w[((co * cin + ci) * kh + ky) * kw + kx]
                                            * x[((bi * cin + ci) * h + iy as usize) * wd
                                                + ix as usize];
                                    }
                                }
                            }
                        }
                        out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        (out, vec![b, cout, oh, ow])
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
            .fold(0.0, f64::max)
    }

    #[test]
    fn one_by_one_identity() {
        let x = Tensor::from_f64(vec![1.0, -2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let w = Tensor::from_f64(vec![1.0], &[1, 1, 1, 1]);
        let y = x.conv2d(&w, None, 1, 0).unwrap();
        assert_eq!(y.to_f64_vec(), x.to_f64_vec());
    }

    #[test]
    fn zero_input_bias_only() {
        let x = Tensor::zeros(&[1, 2, 3, 3], DType::F64);
        let w = rand_uniform(
            &[4, 2, 3, 3],
            DType::F64,
            -1.0,
            1.0,
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(0),
        );
        let b = Tensor::full(&[4], DType::F64, 0.5);
        let y = x.conv2d(&w, Some(&b), 1, 1).unwrap();
        assert!(y.to_f64_vec().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn conv2d_matches_naive_oracle_randomized() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for case in 0..50 {
            let b = 1 + (case % 2);
            let cin = 1 + (case % 3);
            let cout = 1 + (case % 4);
            let k = [1, 3, 5][case % 3];
            let stride = 1 + (case % 2);
            let pad = case % 3;
            let h = k + 2 + (case % 4);
            let w = k + 3 + (case % 3);
            let x = rand_uniform(&[b, cin, h, w], DType::F64, -1.0, 1.0, &mut rng);
            let wt = rand_uniform(&[cout, cin, k, k], DType::F64, -1.0, 1.0, &mut rng);
            let bias = rand_uniform(&[cout], DType::F64, -0.5, 0.5, &mut rng);
            let y = x.conv2d(&wt, Some(&bias), stride, pad).unwrap();
            let (expect, eshape) = conv2d_naive(
                &x.to_f64_vec(),
                x.shape(),
                &wt.to_f64_vec(),
                wt.shape(),
                Some(&bias.to_f64_vec()),
                stride,
                pad,
            );
            assert_eq!(y.shape(), &eshape[..]);
            assert!(
                max_rel_err(&y.to_f64_vec(), &expect) < 1e-12,
                "case {case} diverged from naive oracle"
            );
        }
    }

    #[test]
    fn dwconv_delta_kernel_is_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = rand_uniform(&[2, 3, 6, 6], DType::F64, 0.0, 1.0, &mut rng);
        let mut w = vec![0.0; 3 * 25];
        for c in 0..3 {
            w[c * 25 + 12] = 1.0; // centered delta in a 5x5 kernel
        }
        let wt = Tensor::from_f64(w, &[3, 1, 5, 5]);
        let y = x.dwconv2d(&wt, 1, 2).unwrap();
        assert_eq!(y.to_f64_vec(), x.to_f64_vec());
    }

    #[test]
    fn dwconv_equals_conv_on_single_channel() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let x = rand_uniform(&[1, 1, 7, 7], DType::F64, -1.0, 1.0, &mut rng);
        let w = rand_uniform(&[1, 1, 3, 3], DType::F64, -1.0, 1.0, &mut rng);
        let a = x.dwconv2d(&w, 1, 1).unwrap();
        let b = x.conv2d(&w, None, 1, 1).unwrap();
        assert_eq!(a.to_f64_vec(), b.to_f64_vec());
    }

    #[test]
    fn dwconv_matches_per_channel_loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = rand_uniform(&[2, 4, 8, 8], DType::F64, -1.0, 1.0, &mut rng);
        let w = rand_uniform(&[4, 1, 3, 3], DType::F64, -1.0, 1.0, &mut rng);
        let y = x.dwconv2d(&w, 1, 1).unwrap();
        // Per-channel naive loop: run each channel through the 1-channel
        // reference convolution.
        let xv = x.to_f64_vec();
        let wv = w.to_f64_vec();
        for bi in 0..2 {
            for c in 0..4 {
                let xc: Vec<f64> = xv[(bi * 4 + c) * 64..(bi * 4 + c + 1) * 64].to_vec();
                let wc: Vec<f64> = wv[c * 9..(c + 1) * 9].to_vec();
                let (expect, _) = conv2d_naive(&xc, &[1, 1, 8, 8], &wc, &[1, 1, 3, 3], None, 1, 1);
                let got: Vec<f64> = (0..64).map(|i| y.at(&[bi, c, i / 8, i % 8])).collect();
                assert!(max_rel_err(&got, &expect) < 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_structured_error() {
        let x = Tensor::zeros(&[1, 3, 4, 4], DType::F64);
        let w = Tensor::zeros(&[2, 4, 3, 3], DType::F64);
        match x.conv2d(&w, None, 1, 1) {
            Err(TensorError::ShapeMismatch {
                op: "conv2d",
                details,
            }) => {
                assert!(details.contains("3 channels"));
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        let dw = Tensor::zeros(&[4, 1, 3, 3], DType::F64);
        assert!(x.dwconv2d(&dw, 1, 1).is_err());
    }

    #[test]
    fn pool_constant_preserved_and_inverse_pair() {
        let c = Tensor::full(&[1, 2, 4, 4], DType::F64, 0.7);
        assert!(c
            .avg_pool2()
            .unwrap()
            .to_f64_vec()
            .iter()
            .all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(c
            .upsample_nearest2()
            .unwrap()
            .to_f64_vec()
            .iter()
            .all(|&v| v == 0.7));
        // nearest_up2 then avgpool2 is the identity
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let x = rand_uniform(&[1, 3, 4, 4], DType::F64, -1.0, 1.0, &mut rng);
        let y = x.upsample_nearest2().unwrap().avg_pool2().unwrap();
        assert_eq!(y.to_f64_vec(), x.to_f64_vec());
    }

    #[test]
    fn avgpool_direct_average() {
        let x = Tensor::from_f64(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let y = x.avg_pool2().unwrap();
        assert_eq!(y.to_f64_vec(), vec![2.5]);
    }

    #[test]
    fn avgpool_rejects_odd_dims() {
        let x = Tensor::zeros(&[1, 1, 3, 4], DType::F64);
        assert!(x.avg_pool2().is_err());
    }

    #[test]
    fn conv_gradients_flow() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x = rand_uniform(&[1, 2, 4, 4], DType::F64, -1.0, 1.0, &mut rng).requires_grad();
        let w = rand_uniform(&[3, 2, 3, 3], DType::F64, -1.0, 1.0, &mut rng).requires_grad();
        let b = rand_uniform(&[3], DType::F64, -1.0, 1.0, &mut rng).requires_grad();
        let loss = x
            .conv2d(&w, Some(&b), 1, 1)
            .unwrap()
            .mul(&x.conv2d(&w, Some(&b), 1, 1).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        backward(&loss).unwrap();
        assert!(x.grad().unwrap().max_abs() > 0.0);
        assert!(w.grad().unwrap().max_abs() > 0.0);
        assert!(b.grad().unwrap().max_abs() > 0.0);
    }
}
