//! The tensor engine on its own: build values, differentiate through a
//! small computation, and verify gradients against finite differences.
//!
//! ```text
//! cargo run --release --example autodiff_basics
//! ```

use rand::SeedableRng;
use spadun::tensor::{backward, grad_check, rand_uniform, DType, Tensor};

fn main() -> Result<(), spadun::TensorError> {
    // A scalar chain: loss = mean(gelu(W * x + b)^2)
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let x = rand_uniform(&[1, 3, 8, 8], DType::F32, -1.0, 1.0, &mut rng);
    let w = rand_uniform(&[4, 3, 3, 3], DType::F32, -0.5, 0.5, &mut rng).requires_grad();
    let b = Tensor::zeros(&[4], DType::F32).requires_grad();

    let y = x.conv2d(&w, Some(&b), 1, 1)?.gelu()?;
    let loss = y.mul(&y)?.mean_all()?;
    println!("loss = {:.6}", loss.scalar()?);

    backward(&loss)?;
    let gw = w.grad().expect("weight gradient populated");
    let gb = b.grad().expect("bias gradient populated");
    println!("|grad W|_max = {:.6}", gw.max_abs());
    println!("|grad b|_max = {:.6}", gb.max_abs());

    // The same computation in f64 passes a central finite-difference check.
    let x64 = x.to_dtype(DType::F64);
    let f = |inputs: &[Tensor]| -> Result<Tensor, spadun::TensorError> {
        let y = x64.conv2d(&inputs[0], Some(&inputs[1]), 1, 1)?.gelu()?;
        y.mul(&y)?.mean_all()
    };
    let err = grad_check(&f, &[w.to_dtype(DType::F64), b.to_dtype(DType::F64)], 1e-5)?;
    println!("finite-difference max rel err = {err:.3e}");

    // Broadcasting follows trailing-axis alignment; scalars are [1] tensors.
    let scale = Tensor::from_f64(vec![2.0], &[1]).requires_grad();
    let z = scale.mul(&Tensor::ones(&[2, 2], DType::F64))?.sum_all()?;
    backward(&z)?;
    println!(
        "d(sum(s * ones(2x2)))/ds = {:?} (expect 4)",
        scale.grad().unwrap().to_f64_vec()
    );
    Ok(())
}
