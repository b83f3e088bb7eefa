//! The sampling model: generate masks, compress a clip into one snapshot,
//! and inspect the operator structure (adjoint, psi diagonal, normalized
//! measurement). Writes mask.npy / meas.npy / gt.npy next to the target
//! directory given as the first argument (default /tmp/spadun_capture).
//!
//! ```text
//! cargo run --release --example capture_basics [outdir]
//! ```

use spadun::npy;
use spadun::sampling::{
    gen_mask_cacti, gen_mask_dmd, normalize_measurement, psi, sample_adjoint, sample_forward,
};
use spadun::synth::phantom;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let outdir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "/tmp/spadun_capture".into());
    std::fs::create_dir_all(&outdir)?;

    let c = 8;
    let clip = phantom(c, 64, 64);
    let dmd = gen_mask_dmd(c, 64, 64, 7, 0.5);
    let cacti = gen_mask_cacti(c, 64, 64, 7);

    // Y = sum_t M_t * X_t (+ noise); one 2-D snapshot carries all c frames.
    let meas = sample_forward(&clip, &dmd, 0.0, 0)?;
    println!(
        "compressed {c} frames of 64x64 into one measurement; range [{:.3}, {:.3}]",
        meas.values
            .to_f64_vec()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min),
        meas.values.max_abs()
    );

    // The adjoint replicates the snapshot through each mask: x0 = Phi^T y.
    let x0 = sample_adjoint(&meas, &dmd)?;
    println!("adjoint stack shape {:?}", x0.frames.shape());

    // psi = sum_t M_t^2 is the whole normal matrix (it is diagonal).
    let d = psi(&dmd);
    let mean_open: f64 = d.to_f64_vec().iter().sum::<f64>() / (64.0 * 64.0);
    println!(
        "psi mean {:.2} (expect ~{} * density {})",
        mean_open, c, 0.5
    );

    // Normalization brings the snapshot back into single-frame range.
    let ybar = normalize_measurement(&meas, &dmd)?;
    println!(
        "normalized measurement range [{:.3}, {:.3}]",
        ybar.to_f64_vec()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min),
        ybar.max_abs()
    );

    // The shifting pattern reuses one physical mask; every frame has the
    // same open-pixel count.
    let ones_per_frame: Vec<f64> = (0..c)
        .map(|t| {
            cacti
                .values
                .slice(0, t, 1)
                .unwrap()
                .to_f64_vec()
                .iter()
                .sum()
        })
        .collect();
    println!("cacti open pixels per frame: {ones_per_frame:?}");

    npy::save_tensor(format!("{outdir}/mask.npy"), &dmd.values)?;
    npy::save_tensor(format!("{outdir}/meas.npy"), &meas.values)?;
    npy::save_tensor(format!("{outdir}/gt.npy"), &clip.frames)?;
    npy::save_pgm(
        format!("{outdir}/meas.pgm"),
        &normalize_measurement(&meas, &dmd)?,
    )?;
    println!("wrote mask/meas/gt NPY files to {outdir}");
    Ok(())
}
