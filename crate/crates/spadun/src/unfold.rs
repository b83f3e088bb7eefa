//! ADMM-unfolded reconstruction: a fixed number of stages, each running the
//! closed-form data-fidelity solve, a pluggable prior module on the
//! reflective-padded degraded stack, and the multiplier update.
//!
//! The fidelity solve exploits the diagonal structure of the operator
//! normal matrix: with `psi = sum_t M_t^2`, the exact minimizer of
//! `0.5||y - Phi v||^2 + (gamma/2)||v - (x+b)||^2` is
//!
//! ```text
//! v = (x+b) + Phi^T[ (y - Phi(x+b)) / (gamma + psi) ]
//! ```
//!
//! computed entirely with per-pixel arithmetic — no matrices are formed.

use thiserror::Error;

use crate::sampling::{self, MaskStack, Measurement, SamplingError};
use crate::tensor::{Parameter, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum UnfoldError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("prior module failed at stage {stage}: {message}")]
    Prior { stage: usize, message: String },
    #[error("{0}")]
    Config(String),
}

pub type Result<T, E = UnfoldError> = std::result::Result<T, E>;

/// The ADMM triple threaded through the unfolded stages. All three share
/// the `[c, h, w]` shape of the frame stack.
#[derive(Clone, Debug)]
pub struct StageState {
    /// Current estimate (prior output).
    pub x: Tensor,
    /// Fidelity variable (closed-form solve output).
    pub v: Tensor,
    /// Scaled multiplier.
    pub b: Tensor,
}

/// Per-stage penalty coefficient, parameterized as softplus(raw) so the
/// value stays strictly positive without clamping kinks.
#[derive(Clone, Debug)]
pub struct GammaParam {
    pub raw: Parameter,
}

impl GammaParam {
    /// Builds a parameter whose initial softplus value equals `value`.
    pub fn with_value(
        name: impl Into<String>,
        value: f64,
        dtype: crate::tensor::DType,
    ) -> GammaParam {
        assert!(value > 0.0, "gamma must be positive");
        // Inverse softplus: raw = ln(exp(v) - 1); for large v this is ~v.
        let raw = if value > 30.0 {
            value
        } else {
            (value.exp() - 1.0).ln()
        };
        GammaParam {
            raw: Parameter::new(name, Tensor::full(&[1], dtype, raw)),
        }
    }

    /// Strictly positive penalty value, differentiable w.r.t. `raw`.
    pub fn value(&self) -> Result<Tensor, TensorError> {
        self.raw.tensor.softplus()
    }
}

/// How a frame stack is brought to the fixed prior length `L`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    /// Palindromic repetition `A1..Ac, Ac..A1, A1..` truncated to L
    /// (smooth inter-frame transitions).
    Reflective,
    /// Plain repetition `A1..Ac, A1..Ac, ..` truncated to L.
    Repeat,
}

/// Inversion record for [`reflective_pad`]: enough to route every padded
/// frame back to its source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PadPlan {
    pub batch: usize,
    pub frames: usize,
    pub length: usize,
    pub mode: PadMode,
}

impl PadPlan {
    /// Number of chunks along the batch axis (1 when `frames < length`).
    pub fn num_chunks(&self) -> usize {
        if self.frames <= self.length {
            1
        } else {
            self.frames.div_ceil(self.length)
        }
    }

    /// Frame indices of the single padded chunk when `frames <= length`.
    pub fn pad_indices(&self) -> Vec<usize> {
        let (c, l) = (self.frames, self.length);
        debug_assert!(c <= l);
        (0..l)
            .map(|i| match self.mode {
                PadMode::Reflective => {
                    let j = i % (2 * c);
                    if j < c {
                        j
                    } else {
                        2 * c - 1 - j
                    }
                }
                PadMode::Repeat => i % c,
            })
            .collect()
    }

    /// Source frame range of chunk `k` in the original stack.
    pub fn chunk_start(&self, k: usize) -> usize {
        let last = self.num_chunks() - 1;
        if k < last {
            k * self.length
        } else {
            self.frames - self.length
        }
    }

    /// Which local slice of chunk `k` the merge takes, as
    /// `(local_start, len)`. Earlier chunks own their full window; the
    /// final overlapping chunk contributes only the tail it alone covers.
    pub fn owned_range(&self, k: usize) -> (usize, usize) {
        let last = self.num_chunks() - 1;
        if k < last {
            (0, self.length)
        } else {
            let covered = last * self.length; // frames already owned
            let start_global = self.chunk_start(last);
            let lo = covered - start_global;
            (lo, self.frames - covered)
        }
    }
}

/// Initial ADMM state: `x0 = Phi^T y` (frame t is `M_t * Y`), `b0 = 0`,
/// `v0 = x0`.
pub fn init_state(meas: &Measurement, mask: &MaskStack) -> Result<StageState> {
    let x = sampling::sample_adjoint(meas, mask)?.frames;
    let b = Tensor::zeros(x.shape(), x.dtype());
    Ok(StageState { v: x.clone(), x, b })
}

/// One-shot data-fidelity solve. Differentiable w.r.t. `x`, `b`, and
/// `gamma` when run while recording.
pub fn fidelity_update(
    state: &StageState,
    meas: &Measurement,
    mask: &MaskStack,
    gamma: &GammaParam,
) -> Result<Tensor> {
    let gamma_value = gamma.value()?;
    let psi = sampling::psi(mask);
    fidelity_update_with(state, meas, mask, &gamma_value, &psi)
}

/// Fidelity solve with precomputed `gamma` value tensor and `psi` diagonal
/// (hot path: both are loop invariants of a reconstruction).
pub(crate) fn fidelity_update_with(
    state: &StageState,
    meas: &Measurement,
    mask: &MaskStack,
    gamma_value: &Tensor,
    psi: &Tensor,
) -> Result<Tensor> {
    let xb = state.x.add(&state.b)?;
    let phi_xb = mask.values.mul(&xb)?.sum_axis(0)?;
    let residual = meas.values.sub(&phi_xb)?;
    let denom = psi.add(gamma_value)?;
    let scaled = residual.div(&denom)?;
    let correction = mask.values.mul(&scaled)?;
    Ok(xb.add(&correction)?)
}

/// Multiplier update `b_new = b - (v - x_new)`.
pub fn multiplier_update(state: &StageState, x_new: &Tensor) -> Result<Tensor> {
    Ok(state.b.sub(&state.v.sub(x_new)?)?)
}

/// Pads or chunks a `[b, c, h, w]` stack to prior length `L`, returning
/// `[b', L, h, w]` with `b' = b * ceil(c/L)` and the inversion plan.
///
/// `c < L`: the sequence is extended by appending its reverse, repeatedly,
/// and truncated to `L` frames. `c >= L`: windows `[0,L), [L,2L), ...` are
/// stacked along the batch axis (chunk-major), the final window being the
/// last `L` frames.
pub fn reflective_pad(seq: &Tensor, length: usize, mode: PadMode) -> Result<(Tensor, PadPlan)> {
    if seq.rank() != 4 {
        return Err(UnfoldError::Config(format!(
            "reflective_pad expects [b,c,h,w], got {:?}",
            seq.shape()
        )));
    }
    if length == 0 {
        return Err(UnfoldError::Config("pad length must be >= 1".into()));
    }
    let (b, c) = (seq.shape()[0], seq.shape()[1]);
    let plan = PadPlan {
        batch: b,
        frames: c,
        length,
        mode,
    };
    if c <= length {
        let padded = seq.index_select(1, &plan.pad_indices())?;
        return Ok((padded, plan));
    }
    let k = plan.num_chunks();
    let mut chunks = Vec::with_capacity(k);
    for ki in 0..k {
        chunks.push(seq.slice(1, plan.chunk_start(ki), length)?);
    }
    let refs: Vec<&Tensor> = chunks.iter().collect();
    let padded = Tensor::concat(&refs, 0)?;
    Ok((padded, plan))
}

/// Inverts [`reflective_pad`]: routes every original frame back from the
/// chunk that owns it. With an identity prior the composition is exact.
pub fn unpad_merge(padded: &Tensor, plan: &PadPlan) -> Result<Tensor> {
    let expect_rows = plan.batch * plan.num_chunks();
    if padded.rank() != 4 || padded.shape()[0] != expect_rows || padded.shape()[1] != plan.length {
        return Err(UnfoldError::Config(format!(
            "padded shape {:?} does not match plan {:?}",
            padded.shape(),
            plan
        )));
    }
    if plan.frames <= plan.length {
        return Ok(padded.slice(1, 0, plan.frames)?);
    }
    let k = plan.num_chunks();
    let mut per_batch = Vec::with_capacity(plan.batch);
    for i in 0..plan.batch {
        let mut parts = Vec::with_capacity(k);
        for ki in 0..k {
            let row = ki * plan.batch + i;
            let (lo, len) = plan.owned_range(ki);
            parts.push(padded.slice(0, row, 1)?.slice(1, lo, len)?);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        per_batch.push(Tensor::concat(&refs, 1)?);
    }
    let refs: Vec<&Tensor> = per_batch.iter().collect();
    Ok(Tensor::concat(&refs, 0)?)
}

/// Prior inputs for one stage: the padded degraded stack with the
/// normalized measurement appended as one extra channel, and the padded
/// mask with the constant `c'/L` plane appended.
pub fn build_prior_inputs(
    state: &StageState,
    meas: &Measurement,
    mask: &MaskStack,
    c_prime: usize,
    length: usize,
) -> Result<(Tensor, Tensor)> {
    if c_prime != mask.cs_ratio() {
        return Err(UnfoldError::Config(format!(
            "c'={c_prime} does not match mask CS ratio {}",
            mask.cs_ratio()
        )));
    }
    let ybar = sampling::normalize_measurement(meas, mask)?;
    let d = state.v.sub(&state.b)?;
    let (vbar, _plan) = assemble_vbar(&d, Some(&ybar), length, PadMode::Reflective)?;
    let mbar = assemble_mbar(mask, length, PadMode::Reflective)?;
    Ok((vbar, mbar))
}

/// Pads `d = V - B` (shape `[c,h,w]`) and appends the normalized
/// measurement plane to every chunk when present.
pub(crate) fn assemble_vbar(
    d: &Tensor,
    ybar: Option<&Tensor>,
    length: usize,
    mode: PadMode,
) -> Result<(Tensor, PadPlan)> {
    let shape = d.shape().to_vec();
    let d4 = d.reshape(&[1, shape[0], shape[1], shape[2]])?;
    let (padded, plan) = reflective_pad(&d4, length, mode)?;
    let vbar = match ybar {
        Some(y) => {
            let rows = padded.shape()[0];
            let plane = y
                .reshape(&[1, 1, shape[1], shape[2]])?
                .broadcast_to(&[rows, 1, shape[1], shape[2]])?;
            Tensor::concat(&[&padded, &plane], 1)?
        }
        None => padded,
    };
    Ok((vbar, plan))
}

/// Pads the mask identically to the degraded stack and appends the
/// constant `c'/L` plane carrying the length information.
pub fn assemble_mbar(mask: &MaskStack, length: usize, mode: PadMode) -> Result<Tensor> {
    let (c, h, w) = (mask.cs_ratio(), mask.height(), mask.width());
    let m4 = mask.values.reshape(&[1, c, h, w])?;
    let (padded, _plan) = reflective_pad(&m4, length, mode)?;
    let rows = padded.shape()[0];
    let ratio = c as f64 / length as f64;
    let plane = Tensor::full(&[rows, 1, h, w], mask.values.dtype(), ratio);
    Ok(Tensor::concat(&[&padded, &plane], 1)?)
}

/// One prior step of the unfolded solver, applied per stage.
pub trait StagePrior {
    /// Number of stages this prior supports, if fixed (learned priors have
    /// one parameter set per stage).
    fn stage_count(&self) -> Option<usize> {
        None
    }

    /// Penalty value for stage `k`, strictly positive, shape `[1]`.
    fn gamma_value(&self, k: usize) -> Result<Tensor>;

    /// Whether the normalized measurement is appended to the prior input.
    fn wants_meas_channel(&self) -> bool;

    /// Whether the padded-mask input is assembled and passed in.
    fn wants_mask_input(&self) -> bool;

    /// Maps the padded degraded stack `[b', L(+1), h, w]` (plus the mask
    /// input when requested) to a denoised stack `[b', L, h, w]`.
    fn apply(&self, k: usize, vbar: &Tensor, mbar: Option<&Tensor>) -> Result<Tensor>;
}

/// Pass-through prior: returns the padded degraded stack unchanged.
/// Exercises the unfolding plumbing (round-trip tests, cold starts).
pub struct IdentityPrior {
    pub gamma: f64,
}

impl Default for IdentityPrior {
    fn default() -> Self {
        IdentityPrior { gamma: 1.0 }
    }
}

impl StagePrior for IdentityPrior {
    fn gamma_value(&self, _k: usize) -> Result<Tensor> {
        Ok(Tensor::scalar_tensor(self.gamma, crate::tensor::DType::F64))
    }
    fn wants_meas_channel(&self) -> bool {
        false
    }
    fn wants_mask_input(&self) -> bool {
        false
    }
    fn apply(&self, _k: usize, vbar: &Tensor, _mbar: Option<&Tensor>) -> Result<Tensor> {
        Ok(vbar.clone())
    }
}

/// Stage count and padding setup of one unfolded run.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct DunConfig {
    pub stages: usize,
    pub pad_length: usize,
    pub pad_mode: PadMode,
}

impl DunConfig {
    pub fn new(stages: usize, pad_length: usize) -> DunConfig {
        DunConfig {
            stages,
            pad_length,
            pad_mode: PadMode::Reflective,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.pad_length == 0 {
            return Err(UnfoldError::Config(
                "stages and pad_length must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Runs the unfolded solver and returns every stage output `X^1..X^N`
/// (training weights the last three).
pub fn run_dun(
    meas: &Measurement,
    mask: &MaskStack,
    prior: &dyn StagePrior,
    cfg: &DunConfig,
) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    if mask.cs_ratio() != meas.cs_ratio {
        return Err(UnfoldError::Config(format!(
            "mask CS ratio {} != measurement CS ratio {}",
            mask.cs_ratio(),
            meas.cs_ratio
        )));
    }
    if let Some(n) = prior.stage_count() {
        if n != cfg.stages {
            return Err(UnfoldError::Config(format!(
                "prior has {n} stages but config requests {}",
                cfg.stages
            )));
        }
    }
    let gamma_dtype = meas.values.dtype();
    let mask = &mask.to_dtype(gamma_dtype);
    let psi = sampling::psi(mask);
    let ybar = if prior.wants_meas_channel() {
        Some(sampling::normalize_measurement(meas, mask)?)
    } else {
        None
    };
    let mbar = if prior.wants_mask_input() {
        Some(assemble_mbar(mask, cfg.pad_length, cfg.pad_mode)?)
    } else {
        None
    };

    let mut state = init_state(meas, mask)?;
    let mut outputs = Vec::with_capacity(cfg.stages);
    for k in 0..cfg.stages {
        let mut gamma = prior.gamma_value(k)?;
        if gamma.dtype() != gamma_dtype {
            if gamma.tracks_grad() {
                return Err(UnfoldError::Config(format!(
                    "stage {k}: learned gamma is {} but the measurement is {}; \
                     match model and data dtypes",
                    gamma.dtype(),
                    gamma_dtype
                )));
            }
            gamma = gamma.to_dtype(gamma_dtype);
        }
        let v = fidelity_update_with(&state, meas, mask, &gamma, &psi)?;
        let d = v.sub(&state.b)?;
        let (vbar, plan) = assemble_vbar(&d, ybar.as_ref(), cfg.pad_length, cfg.pad_mode)?;
        let out = prior.apply(k, &vbar, mbar.as_ref())?;
        if out.shape()
            != [
                plan.batch * plan.num_chunks(),
                cfg.pad_length,
                mask.height(),
                mask.width(),
            ]
        {
            return Err(UnfoldError::Prior {
                stage: k,
                message: format!(
                    "prior output shape {:?} does not match padded input layout",
                    out.shape()
                ),
            });
        }
        let merged = unpad_merge(&out, &plan)?;
        let x_new = merged.reshape(&[mask.cs_ratio(), mask.height(), mask.width()])?;
        let b_new = {
            let tmp = StageState {
                x: state.x.clone(),
                v: v.clone(),
                b: state.b.clone(),
            };
            multiplier_update(&tmp, &x_new)?
        };
        state = StageState {
            x: x_new.clone(),
            v,
            b: b_new,
        };
        outputs.push(x_new);
    }
    Ok(outputs)
}

/// Measurement-consistency residual `||y - Phi x^k||_2` per stage output.
pub fn measurement_residuals(
    outputs: &[Tensor],
    meas: &Measurement,
    mask: &MaskStack,
) -> Result<Vec<f64>> {
    let mask = mask.to_dtype(meas.values.dtype());
    let y = meas.values.to_f64_vec();
    let mut res = Vec::with_capacity(outputs.len());
    for x in outputs {
        let cube = crate::sampling::VideoCube::new(x.detach())?;
        let yk = sampling::sample_forward(&cube, &mask, 0.0, 0)?
            .values
            .to_f64_vec();
        let norm: f64 = y
            .iter()
            .zip(&yk)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        res.push(norm);
    }
    Ok(res)
}
