//! Mask generation and the single-exposure capture model.
//!
//! A stack of per-frame modulation masks `M_1..M_c` compresses `c` frames
//! into one 2-D measurement: `Y = sum_t M_t * X_t + Z`. The mask stack is
//! the implicit sensing operator; its matrix form is block diagonal, which
//! keeps the adjoint and the normal-equation diagonal cheap to evaluate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use thiserror::Error;

use crate::tensor::{DType, Tensor};

/// Guard for the measurement normalization divide: a pixel whose mask
/// column never opens carries no signal, so it normalizes to zero.
pub const NORMALIZE_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("master mask {master:?} too small for crop c'={c} patch {h}x{w}")]
    CropTooLarge {
        master: Vec<usize>,
        c: usize,
        h: usize,
        w: usize,
    },
    #[error("ratio set is empty or contains a ratio < 1")]
    BadRatioSet,
    #[error("mask values must lie in [0,1]; found {0}")]
    MaskOutOfRange(f64),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T, E = SamplingError> = std::result::Result<T, E>;

/// Provenance of a mask stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskPattern {
    /// Fully random per-frame binary masks (micromirror-style).
    Dmd,
    /// One physical mask shifted horizontally by one pixel per frame.
    Cacti,
    /// Loaded from file; may be non-binary in [0,1] (real devices are not
    /// ideally binary).
    External,
}

impl std::fmt::Display for MaskPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaskPattern::Dmd => f.write_str("dmd"),
            MaskPattern::Cacti => f.write_str("cacti"),
            MaskPattern::External => f.write_str("external"),
        }
    }
}

/// Per-frame modulation masks, shape `[c, h, w]`, values in [0,1].
#[derive(Clone, Debug)]
pub struct MaskStack {
    pub values: Tensor,
    pub pattern: MaskPattern,
    pub seed: Option<u64>,
}

impl MaskStack {
    pub fn external(values: Tensor) -> Result<MaskStack> {
        if values.rank() != 3 {
            return Err(SamplingError::Shape(format!(
                "mask must be [c,h,w], got {:?}",
                values.shape()
            )));
        }
        for v in values.to_f64_vec() {
            if !v.is_finite() {
                return Err(SamplingError::NonFinite("mask"));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(SamplingError::MaskOutOfRange(v));
            }
        }
        Ok(MaskStack {
            values,
            pattern: MaskPattern::External,
            seed: None,
        })
    }

    pub fn cs_ratio(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn to_dtype(&self, dtype: DType) -> MaskStack {
        MaskStack {
            values: self.values.to_dtype(dtype),
            pattern: self.pattern,
            seed: self.seed,
        }
    }
}

/// Original frames, shape `[c, h, w]`, pixel values in [0,1].
#[derive(Clone, Debug)]
pub struct VideoCube {
    pub frames: Tensor,
}

impl VideoCube {
    pub fn new(frames: Tensor) -> Result<VideoCube> {
        if frames.rank() != 3 {
            return Err(SamplingError::Shape(format!(
                "video must be [c,h,w], got {:?}",
                frames.shape()
            )));
        }
        if !frames.all_finite() {
            return Err(SamplingError::NonFinite("video"));
        }
        Ok(VideoCube { frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    /// Contiguous temporal/spatial crop.
    pub fn crop(
        &self,
        t0: usize,
        c: usize,
        y0: usize,
        h: usize,
        x0: usize,
        w: usize,
    ) -> Result<VideoCube> {
        let frames = self
            .frames
            .slice(0, t0, c)?
            .slice(1, y0, h)?
            .slice(2, x0, w)?;
        Ok(VideoCube { frames })
    }
}

/// The captured 2-D snapshot, plus the CS ratio used at capture time.
#[derive(Clone, Debug)]
pub struct Measurement {
    pub values: Tensor,
    pub cs_ratio: usize,
}

/// Training-time sampling augmentation settings.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SamplingConfig {
    /// Candidate CS ratios, sorted ascending.
    pub ratio_set: Vec<usize>,
    pub patch_h: usize,
    pub patch_w: usize,
    pub noise_sigma: f64,
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ratio_set.is_empty() || self.ratio_set.iter().any(|&c| c < 1) {
            return Err(SamplingError::BadRatioSet);
        }
        if self.noise_sigma < 0.0 {
            return Err(SamplingError::Shape("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Offsets of a sampling-augmentation crop within the master mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropOffsets {
    pub t0: usize,
    pub y0: usize,
    pub x0: usize,
}

fn bernoulli_mask(c: usize, h: usize, w: usize, density: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..c * h * w)
        .map(|_| {
            if rng.random::<f64>() < density {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Fully random binary masks: i.i.d. Bernoulli(`density`) per frame.
/// density = 1 degenerates to the all-open mask.
pub fn gen_mask_dmd(c: usize, h: usize, w: usize, seed: u64, density: f64) -> MaskStack {
    assert!(c >= 1 && h >= 1 && w >= 1, "mask dims must be >= 1");
    assert!(
        density > 0.0 && density <= 1.0,
        "density must be in (0,1], got {density}"
    );
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let data = bernoulli_mask(c, h, w, density, &mut rng);
    MaskStack {
        values: Tensor::from_f32(data, &[c, h, w]),
        pattern: MaskPattern::Dmd,
        seed: Some(seed),
    }
}

/// Shifting-mask stack: frame t is the Bernoulli(0.5) base frame shifted
/// circularly by t pixels to the right.
pub fn gen_mask_cacti(c: usize, h: usize, w: usize, seed: u64) -> MaskStack {
    assert!(c >= 1 && h >= 1 && w >= 1, "mask dims must be >= 1");
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let base = bernoulli_mask(1, h, w, 0.5, &mut rng);
    let mut data = vec![0.0f32; c * h * w];
    for t in 0..c {
        let shift = t % w;
        for i in 0..h {
            for j in 0..w {
                let src = (j + w - shift) % w;
                data[(t * h + i) * w + j] = base[i * w + src];
            }
        }
    }
    MaskStack {
        values: Tensor::from_f32(data, &[c, h, w]),
        pattern: MaskPattern::Cacti,
        seed: Some(seed),
    }
}

fn check_same_spatial(mask: &MaskStack, video: &VideoCube) -> Result<()> {
    if mask.values.shape() != video.frames.shape() {
        return Err(SamplingError::Shape(format!(
            "mask {:?} vs video {:?}",
            mask.values.shape(),
            video.frames.shape()
        )));
    }
    Ok(())
}

/// Simulates the single-exposure capture: `Y = sum_t M_t * X_t + Z` with
/// additive i.i.d. Gaussian noise of standard deviation `noise_sigma`,
/// reproducible from `seed`.
pub fn sample_forward(
    video: &VideoCube,
    mask: &MaskStack,
    noise_sigma: f64,
    seed: u64,
) -> Result<Measurement> {
    check_same_spatial(mask, video)?;
    let modulated = mask.values.mul(&video.frames)?;
    let mut y = modulated.sum_axis(0)?;
    if noise_sigma > 0.0 {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let normal = rand_distr::Normal::new(0.0, noise_sigma).expect("sigma >= 0");
        let (h, w) = (mask.height(), mask.width());
        let noise: Vec<f64> = (0..h * w).map(|_| normal.sample(&mut rng)).collect();
        let noise_t = match y.dtype() {
            DType::F32 => Tensor::from_f32(noise.iter().map(|&v| v as f32).collect(), &[h, w]),
            DType::F64 => Tensor::from_f64(noise, &[h, w]),
        };
        y = y.add(&noise_t)?;
    }
    Ok(Measurement {
        values: y,
        cs_ratio: mask.cs_ratio(),
    })
}

/// Adjoint of the capture operator: frame t of the output is `M_t * Y`.
/// This is exactly the transposed sensing matrix applied to the flattened
/// measurement, reshaped back to `[c, h, w]`.
pub fn sample_adjoint(meas: &Measurement, mask: &MaskStack) -> Result<VideoCube> {
    if meas.values.shape() != [mask.height(), mask.width()] {
        return Err(SamplingError::Shape(format!(
            "measurement {:?} vs mask spatial {}x{}",
            meas.values.shape(),
            mask.height(),
            mask.width()
        )));
    }
    let frames = mask.values.mul(&meas.values)?;
    Ok(VideoCube { frames })
}

/// Per-pixel diagonal of the operator normal matrix: `psi = sum_t M_t^2`.
/// For binary masks this is the per-pixel count of open frames.
pub fn psi(mask: &MaskStack) -> Tensor {
    let sq = mask
        .values
        .mul(&mask.values)
        .expect("mask times itself is always shape-compatible");
    sq.sum_axis(0).expect("mask is rank 3")
}

/// Normalizes a measurement by the summed mask, `Ybar = Y / max(sum_t M_t,
/// eps)`, bringing it into the dynamic range of a single frame.
pub fn normalize_measurement(meas: &Measurement, mask: &MaskStack) -> Result<Tensor> {
    if meas.values.shape() != [mask.height(), mask.width()] {
        return Err(SamplingError::Shape(format!(
            "measurement {:?} vs mask spatial {}x{}",
            meas.values.shape(),
            mask.height(),
            mask.width()
        )));
    }
    let msum = mask.values.sum_axis(0)?.to_f64_vec();
    let y = meas.values.to_f64_vec();
    let out: Vec<f64> = y
        .iter()
        .zip(&msum)
        .map(|(&yv, &mv)| yv / mv.max(NORMALIZE_EPS))
        .collect();
    let (h, w) = (mask.height(), mask.width());
    Ok(match meas.values.dtype() {
        DType::F32 => Tensor::from_f32(out.iter().map(|&v| v as f32).collect(), &[h, w]),
        DType::F64 => Tensor::from_f64(out, &[h, w]),
    })
}

/// Randomly crops a sub-mask from the master: the CS ratio is drawn
/// uniformly from `cfg.ratio_set`, the temporal and spatial offsets
/// uniformly over their valid ranges.
pub fn sample_augment(
    master: &MaskStack,
    cfg: &SamplingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(MaskStack, CropOffsets)> {
    cfg.validate()?;
    let c_max = *cfg.ratio_set.iter().max().unwrap();
    if master.cs_ratio() < c_max || master.height() < cfg.patch_h || master.width() < cfg.patch_w {
        return Err(SamplingError::CropTooLarge {
            master: master.values.shape().to_vec(),
            c: c_max,
            h: cfg.patch_h,
            w: cfg.patch_w,
        });
    }
    let c = cfg.ratio_set[rng.random_range(0..cfg.ratio_set.len())];
    let t0 = rng.random_range(0..=master.cs_ratio() - c);
    let y0 = rng.random_range(0..=master.height() - cfg.patch_h);
    let x0 = rng.random_range(0..=master.width() - cfg.patch_w);
    let values = master
        .values
        .slice(0, t0, c)?
        .slice(1, y0, cfg.patch_h)?
        .slice(2, x0, cfg.patch_w)?
        .detach();
    Ok((
        MaskStack {
            values,
            pattern: master.pattern,
            seed: None,
        },
        CropOffsets { t0, y0, x0 },
    ))
}
