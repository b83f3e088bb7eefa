//! Layer normalization over the channel axis, per spatial location.

use super::kernels::Elem;
use super::ops::finish_op;
use super::{Result, Storage, Tensor, TensorError};

#[allow(clippy::needless_range_loop)] // strided multi-buffer indexing
fn ln_impl<T: Elem>(input: &Tensor, gain: &Tensor, shift: &Tensor, eps: f64) -> Tensor {
    let (b, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let hw = h * w;
    let xv = T::slice(input.storage());
    let gv = T::slice(gain.storage());
    let sv = T::slice(shift.storage());
    let inv_c = T::from_f64(1.0 / c as f64);
    let epsv = T::from_f64(eps);

    // Per (b, y, x) location: normalize the c channel values. Channel stride
    // within one batch item is hw.
    let mut out = vec![T::ZERO; xv.len()];
    let mut xhat = vec![T::ZERO; xv.len()];
    let mut inv_std = vec![T::ZERO; b * hw];
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let mut mean = T::ZERO;
            for ci in 0..c {
                mean += xv[base + ci * hw + p];
            }
            mean = mean * inv_c;
            let mut var = T::ZERO;
            for ci in 0..c {
                let d = xv[base + ci * hw + p] - mean;
                var += d * d;
            }
            var = var * inv_c;
            let istd = T::ONE / (var + epsv).sqrt();
            inv_std[bi * hw + p] = istd;
            for ci in 0..c {
                let xh = (xv[base + ci * hw + p] - mean) * istd;
                xhat[base + ci * hw + p] = xh;
                out[base + ci * hw + p] = xh * gv[ci] + sv[ci];
            }
        }
    }

    finish_op(
        T::storage(out),
        input.shape().to_vec(),
        "layer_norm",
        vec![input.clone(), gain.clone(), shift.clone()],
        move |inputs, _out, up| {
            let uv = T::slice(up);
            let gv = T::slice(inputs[1].storage());
            let mut grads: Vec<Option<Storage>> = vec![None, None, None];
            if inputs[0].tracks_grad() {
                // dx = istd * (dy - mean_c(dy) - xhat * mean_c(dy * xhat)),
                // dy = upstream * gain (biased variance over c).
                let mut gx = vec![T::ZERO; uv.len()];
                for bi in 0..b {
                    let base = bi * c * hw;
                    for p in 0..hw {
                        let istd = inv_std[bi * hw + p];
                        let mut m_dy = T::ZERO;
                        let mut m_dyxh = T::ZERO;
                        for ci in 0..c {
                            let i = base + ci * hw + p;
                            let dy = uv[i] * gv[ci];
                            m_dy += dy;
                            m_dyxh += dy * xhat[i];
                        }
                        m_dy = m_dy * inv_c;
                        m_dyxh = m_dyxh * inv_c;
                        for ci in 0..c {
                            let i = base + ci * hw + p;
                            let dy = uv[i] * gv[ci];
                            gx[i] = istd * (dy - m_dy - xhat[i] * m_dyxh);
                        }
                    }
                }
                grads[0] = Some(T::storage(gx));
            }
            if inputs[1].tracks_grad() {
                let mut gg = vec![T::ZERO; c];
                for bi in 0..b {
                    let base = bi * c * hw;
                    for (ci, g) in gg.iter_mut().enumerate() {
                        for p in 0..hw {
                            let i = base + ci * hw + p;
                            *g += uv[i] * xhat[i];
                        }
                    }
                }
                grads[1] = Some(T::storage(gg));
            }
            if inputs[2].tracks_grad() {
                let mut gs = vec![T::ZERO; c];
                for bi in 0..b {
                    let base = bi * c * hw;
                    for (ci, g) in gs.iter_mut().enumerate() {
                        for p in 0..hw {
                            *g += uv[base + ci * hw + p];
                        }
                    }
                }
                grads[2] = Some(T::storage(gs));
            }
            Ok(grads)
        },
    )
}

impl Tensor {
    /// Normalizes over the channel axis at each spatial location of an NCHW
    /// tensor, then applies per-channel gain and shift. Variance is the
    /// biased (population) estimate.
    pub fn layer_norm(&self, gain: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                details: format!("expected NCHW input, got {:?}", self.shape()),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                details: "eps must be > 0".into(),
            });
        }
        let c = self.shape()[1];
        if gain.shape() != [c] || shift.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                details: format!(
                    "gain {:?} / shift {:?} must both be [{c}]",
                    gain.shape(),
                    shift.shape()
                ),
            });
        }
        if gain.dtype() != self.dtype() || shift.dtype() != self.dtype() {
            return Err(TensorError::DTypeMismatch {
                op: "layer_norm",
                lhs: self.dtype(),
                rhs: gain.dtype(),
            });
        }
        Ok(match self.storage() {
            Storage::F32(_) => ln_impl::<f32>(self, gain, shift, eps),
            Storage::F64(_) => ln_impl::<f64>(self, gain, shift, eps),
        })
    }
}
