//! Reconstruction quality metrics: PSNR and single-scale SSIM.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("image {h}x{w} smaller than the 11x11 SSIM window")]
    TooSmall { h: usize, w: usize },
    #[error("peak must be > 0, got {0}")]
    BadPeak(f64),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// PSNR is capped here: identical inputs would otherwise be infinite.
pub const PSNR_CAP_DB: f64 = 100.0;

fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch(
            a.shape().to_vec(),
            b.shape().to_vec(),
        ));
    }
    let av = a.to_f64_vec();
    let bv = b.to_f64_vec();
    let n = av.len() as f64;
    Ok(av
        .iter()
        .zip(&bv)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB, `10*log10(peak^2 / MSE)`, capped at
/// 100 dB (zero-MSE included).
pub fn psnr(reference: &Tensor, test: &Tensor, peak: f64) -> Result<f64> {
    if peak <= 0.0 {
        return Err(MetricsError::BadPeak(peak));
    }
    let e = mse(reference, test)?;
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / e).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Single-scale SSIM over valid 11x11 Gaussian windows (sigma 1.5,
/// K1=0.01, K2=0.03, dynamic range 1.0).
pub fn ssim(reference: &Tensor, test: &Tensor) -> Result<f64> {
    if reference.shape() != test.shape() {
        return Err(MetricsError::ShapeMismatch(
            reference.shape().to_vec(),
            test.shape().to_vec(),
        ));
    }
    if reference.rank() != 2 {
        return Err(MetricsError::ShapeMismatch(
            reference.shape().to_vec(),
            vec![0, 0],
        ));
    }
    let (h, w) = (reference.shape()[0], reference.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricsError::TooSmall { h, w });
    }
    let x = reference.to_f64_vec();
    let y = test.to_f64_vec();
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1; // (K1 * L)^2 with L = 1
    let c2 = SSIM_K2 * SSIM_K2;

    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut acc = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut mx = 0.0;
            let mut my = 0.0;
            let mut mxx = 0.0;
            let mut myy = 0.0;
            let mut mxy = 0.0;
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let wgt = g[ky] * g[kx];
                    let xv = x[(oy + ky) * w + ox + kx];
                    let yv = y[(oy + ky) * w + ox + kx];
                    mx += wgt * xv;
                    my += wgt * yv;
                    mxx += wgt * xv * xv;
                    myy += wgt * yv * yv;
                    mxy += wgt * xv * yv;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cov = mxy - mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            acc += s;
        }
    }
    Ok(acc / (oh * ow) as f64)
}

/// Mean SSIM over the frames of two `[c, h, w]` stacks.
pub fn ssim_video(reference: &Tensor, test: &Tensor) -> Result<f64> {
    if reference.shape() != test.shape() || reference.rank() != 3 {
        return Err(MetricsError::ShapeMismatch(
            reference.shape().to_vec(),
            test.shape().to_vec(),
        ));
    }
    let (c, h, w) = (
        reference.shape()[0],
        reference.shape()[1],
        reference.shape()[2],
    );
    let mut acc = 0.0;
    for t in 0..c {
        let r = frame(reference, t, h, w);
        let s = frame(test, t, h, w);
        acc += ssim(&r, &s)?;
    }
    Ok(acc / c as f64)
}

fn frame(t: &Tensor, idx: usize, h: usize, w: usize) -> Tensor {
    t.slice(0, idx, 1)
        .and_then(|s| s.reshape(&[h, w]))
        .expect("frame extraction from validated shape")
}
