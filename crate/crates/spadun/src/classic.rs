//! Training-free baseline: anisotropic total-variation denoising plugged
//! into the same unfolded stage loop as the learned prior.
//!
//! The denoiser approximately solves `min_u 0.5||u - f||^2 + w * TV(u)`
//! by projected dual ascent (step 1/8, componentwise clamp of the dual
//! field), then projects the result onto the input's value range — the
//! range projection can only lower the objective and gives a testable
//! sup-norm bound.

use thiserror::Error;

use crate::sampling::{MaskStack, Measurement, VideoCube};
use crate::tensor::{no_grad, DType, Tensor};
use crate::unfold::{run_dun, DunConfig, PadMode, StagePrior, UnfoldError};

#[derive(Debug, Error)]
pub enum ClassicError {
    #[error("tv_weight must be > 0, got {0}")]
    BadWeight(f64),
    #[error(transparent)]
    Unfold(#[from] UnfoldError),
    #[error(transparent)]
    Sampling(#[from] crate::sampling::SamplingError),
}

pub type Result<T, E = ClassicError> = std::result::Result<T, E>;

/// Configuration of the plug-and-play TV reconstruction. The prior
/// strength lives here (the learned path absorbs it into the network);
/// `gamma` is the fidelity penalty of the shared stage loop.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvConfig {
    pub tv_weight: f64,
    #[serde(default = "default_inner_iters")]
    pub inner_iters: usize,
    pub stages: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_inner_iters() -> usize {
    20
}

fn default_gamma() -> f64 {
    1.0
}

impl Default for TvConfig {
    fn default() -> Self {
        TvConfig {
            tv_weight: 0.05,
            inner_iters: 20,
            stages: 10,
            gamma: 2.5,
        }
    }
}

impl TvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tv_weight <= 0.0 {
            return Err(ClassicError::BadWeight(self.tv_weight));
        }
        if self.inner_iters == 0 || self.stages == 0 || self.gamma <= 0.0 {
            return Err(ClassicError::BadWeight(self.gamma));
        }
        Ok(())
    }
}

/// Anisotropic TV of a flat [h,w] image (forward differences).
pub fn tv_norm(img: &[f64], h: usize, w: usize) -> f64 {
    let mut acc = 0.0;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                acc += (img[y * w + x + 1] - img[y * w + x]).abs();
            }
            if y + 1 < h {
                acc += (img[(y + 1) * w + x] - img[y * w + x]).abs();
            }
        }
    }
    acc
}

fn tv_denoise_plane(f: &[f64], h: usize, w: usize, weight: f64, iters: usize) -> Vec<f64> {
    let n = h * w;
    let tau = 0.125;
    let mut px = vec![0.0f64; n];
    let mut py = vec![0.0f64; n];
    let mut div = vec![0.0f64; n];
    for _ in 0..iters {
        // div p
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let mut d = px[i] + py[i];
                if x > 0 {
                    d -= px[i - 1];
                }
                if y > 0 {
                    d -= py[i - w];
                }
                div[i] = d;
            }
        }
        // p += tau * grad(div p - f/w), componentwise clamp to [-1, 1]
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let here = div[i] - f[i] / weight;
                if x + 1 < w {
                    let gx = (div[i + 1] - f[i + 1] / weight) - here;
                    px[i] = (px[i] + tau * gx).clamp(-1.0, 1.0);
                }
                if y + 1 < h {
                    let gy = (div[i + w] - f[i + w] / weight) - here;
                    py[i] = (py[i] + tau * gy).clamp(-1.0, 1.0);
                }
            }
        }
    }
    // u = f - w * div p, projected onto the input range
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in f {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut d = px[i] + py[i];
            if x > 0 {
                d -= px[i - 1];
            }
            if y > 0 {
                d -= py[i - w];
            }
            div[i] = (f[i] - weight * d).clamp(lo, hi);
        }
    }
    div
}

/// Denoises one `[h, w]` frame by approximate anisotropic TV minimization.
/// Output values never leave the input's range.
pub fn tv_denoise(img: &Tensor, weight: f64, iters: usize) -> Result<Tensor> {
    if weight <= 0.0 {
        return Err(ClassicError::BadWeight(weight));
    }
    assert_eq!(img.rank(), 2, "tv_denoise expects a single [h,w] frame");
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let out = tv_denoise_plane(&img.to_f64_vec(), h, w, weight, iters);
    Ok(match img.dtype() {
        DType::F32 => Tensor::from_f32(out.iter().map(|&v| v as f32).collect(), &[h, w]),
        DType::F64 => Tensor::from_f64(out, &[h, w]),
    })
}

/// TV denoiser as a stage prior: every frame of the padded stack is
/// denoised independently; the fidelity step supplies temporal coupling.
pub struct TvPrior {
    pub cfg: TvConfig,
}

impl StagePrior for TvPrior {
    fn gamma_value(&self, _k: usize) -> Result<Tensor, UnfoldError> {
        Ok(Tensor::scalar_tensor(self.cfg.gamma, DType::F64))
    }

    fn wants_meas_channel(&self) -> bool {
        false
    }

    fn wants_mask_input(&self) -> bool {
        false
    }

    fn apply(
        &self,
        k: usize,
        vbar: &Tensor,
        _mbar: Option<&Tensor>,
    ) -> Result<Tensor, UnfoldError> {
        let (rows, l, h, w) = (
            vbar.shape()[0],
            vbar.shape()[1],
            vbar.shape()[2],
            vbar.shape()[3],
        );
        let src = vbar.to_f64_vec();
        let mut out = Vec::with_capacity(src.len());
        for plane in 0..rows * l {
            let f = &src[plane * h * w..(plane + 1) * h * w];
            out.extend(tv_denoise_plane(
                f,
                h,
                w,
                self.cfg.tv_weight,
                self.cfg.inner_iters,
            ));
        }
        let t = match vbar.dtype() {
            DType::F32 => Tensor::from_f32(out.iter().map(|&v| v as f32).collect(), vbar.shape()),
            DType::F64 => Tensor::from_f64(out, vbar.shape()),
        };
        let _ = k;
        Ok(t)
    }
}

/// Runs the shared unfolded loop with the TV prior and returns every stage
/// output (useful for residual diagnostics).
pub fn pnp_reconstruct_stages(
    meas: &Measurement,
    mask: &MaskStack,
    cfg: &TvConfig,
    pad_length: usize,
) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let prior = TvPrior { cfg: cfg.clone() };
    let dun = DunConfig {
        stages: cfg.stages,
        pad_length,
        pad_mode: PadMode::Reflective,
    };
    Ok(no_grad(|| run_dun(meas, mask, &prior, &dun))?)
}

/// Training-free reconstruction: final stage output as a video cube.
pub fn pnp_reconstruct(meas: &Measurement, mask: &MaskStack, cfg: &TvConfig) -> Result<VideoCube> {
    // Pad length equal to the CS ratio: TV has no fixed input width, so
    // chunking is unnecessary.
    let outs = pnp_reconstruct_stages(meas, mask, cfg, mask.cs_ratio().max(1))?;
    Ok(VideoCube::new(outs.last().expect("stages >= 1").detach())?)
}
