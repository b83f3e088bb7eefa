//! Central finite-difference gradient verification.

use rayon::prelude::*;

use super::{backward, DType, Result, Tensor, TensorError};

/// Compares analytic gradients against central finite differences for a
/// scalar-valued function of f64 tensors.
///
/// Returns the maximum over all input elements of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// Inputs must be f64; f32 rounding would swamp the comparison. The function
/// is re-evaluated `2 * numel` times, in parallel over elements.
pub fn grad_check<F>(f: &F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor> + Sync,
{
    if inputs.iter().any(|t| t.dtype() != DType::F64) {
        return Err(TensorError::Invalid {
            op: "grad_check",
            details: "all inputs must be f64".into(),
        });
    }
    // Analytic pass at the base point.
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::from_f64(t.to_f64_vec(), t.shape()).requires_grad())
        .collect();
    let loss = f(&leaves)?;
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    backward(&loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| {
            t.grad()
                .map(|g| g.to_f64_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let base: Vec<Vec<f64>> = inputs.iter().map(|t| t.to_f64_vec()).collect();
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();

    let eval = |k: usize, idx: usize, delta: f64| -> Result<f64> {
        let perturbed: Vec<Tensor> = base
            .iter()
            .zip(&shapes)
            .enumerate()
            .map(|(j, (data, shape))| {
                let mut d = data.clone();
                if j == k {
                    d[idx] += delta;
                }
                Tensor::from_f64(d, shape)
            })
            .collect();
        super::no_grad(|| f(&perturbed))?.scalar()
    };

    let mut worst: f64 = 0.0;
    for (k, data) in base.iter().enumerate() {
        let errs: Vec<Result<f64>> = (0..data.len())
            .into_par_iter()
            .map(|idx| {
                let plus = eval(k, idx, step)?;
                let minus = eval(k, idx, -step)?;
                let numeric = (plus - minus) / (2.0 * step);
                let a = analytic[k][idx];
                Ok((a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0))
            })
            .collect();
        for e in errs {
            worst = worst.max(e?);
        }
    }
    Ok(worst)
}
