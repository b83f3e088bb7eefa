//! Property tests for the structural invariants: round trips that must be
//! exact and inequalities that must hold for every input, not just the
//! hand-picked ones.

use proptest::prelude::*;

use spadun::classic::{tv_denoise, tv_norm};
use spadun::sampling::{sample_adjoint, sample_forward, MaskStack, Measurement, VideoCube};
use spadun::tensor::{DType, Tensor};
use spadun::unfold::{reflective_pad, unpad_merge, PadMode};

fn tensor3(c: usize, h: usize, w: usize, vals: Vec<f64>) -> Tensor {
    Tensor::from_f64(vals, &[c, h, w])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// concat followed by slicing the same extents recovers each source
    /// bit-exactly, on any axis of a rank-3 tensor.
    #[test]
    fn concat_slice_round_trip(
        axis in 0usize..3,
        d0 in 1usize..4,
        d1 in 1usize..4,
        d2 in 1usize..4,
        extra in 1usize..4,
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = spadun::tensor::rand_uniform(&[d0, d1, d2], DType::F64, -1.0, 1.0, &mut rng);
        let mut bshape = [d0, d1, d2];
        bshape[axis] = extra;
        let b = spadun::tensor::rand_uniform(&bshape, DType::F64, -1.0, 1.0, &mut rng);
        let cat = Tensor::concat(&[&a, &b], axis).unwrap();
        let a2 = cat.slice(axis, 0, [d0, d1, d2][axis]).unwrap();
        let b2 = cat.slice(axis, [d0, d1, d2][axis], extra).unwrap();
        prop_assert_eq!(a2.to_f64_vec(), a.to_f64_vec());
        prop_assert_eq!(b2.to_f64_vec(), b.to_f64_vec());
    }

    /// Padding to any length L >= 1 then merging recovers the input
    /// exactly, for both padding modes, any batch, and c on both sides
    /// of L.
    #[test]
    fn pad_unpad_identity(
        b in 1usize..3,
        c in 1usize..10,
        l in 1usize..8,
        repeat_mode in any::<bool>(),
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = spadun::tensor::rand_uniform(&[b, c, 2, 3], DType::F64, -1.0, 1.0, &mut rng);
        let mode = if repeat_mode { PadMode::Repeat } else { PadMode::Reflective };
        let (p, plan) = reflective_pad(&x, l, mode).unwrap();
        prop_assert_eq!(p.shape()[0], b * plan.num_chunks());
        prop_assert_eq!(p.shape()[1], l);
        let back = unpad_merge(&p, &plan).unwrap();
        prop_assert_eq!(back.to_f64_vec(), x.to_f64_vec());
        // c < L reflective: indices stay in range with unit steps
        if c <= l && mode == PadMode::Reflective {
            let idx = plan.pad_indices();
            prop_assert!(idx.iter().all(|&i| i < c));
            for w in idx.windows(2) {
                prop_assert!(w[0].abs_diff(w[1]) <= 1);
            }
        }
    }

    /// The capture operator and its adjoint satisfy <Phi x, u> = <x, Phi^T u>
    /// for arbitrary non-binary masks.
    #[test]
    fn adjoint_identity_holds(
        c in 1usize..6,
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (4usize, 5usize);
        let mask = MaskStack::external(
            spadun::tensor::rand_uniform(&[c, h, w], DType::F64, 0.0, 1.0, &mut rng),
        ).unwrap();
        let x = spadun::tensor::rand_uniform(&[c, h, w], DType::F64, -1.0, 1.0, &mut rng);
        let u = spadun::tensor::rand_uniform(&[h, w], DType::F64, -1.0, 1.0, &mut rng);
        let phix = sample_forward(&VideoCube::new(x.clone()).unwrap(), &mask, 0.0, 0)
            .unwrap().values;
        let phitu = sample_adjoint(&Measurement { values: u.clone(), cs_ratio: c }, &mask)
            .unwrap().frames;
        let lhs: f64 = phix.to_f64_vec().iter().zip(u.to_f64_vec()).map(|(&a, b)| a * b).sum();
        let rhs: f64 = x.to_f64_vec().iter().zip(phitu.to_f64_vec()).map(|(&a, b)| a * b).sum();
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-30);
        prop_assert!(rel < 1e-12, "rel {}", rel);
    }

    /// NPY round trips are bit-exact for both dtypes and any rank 1-3
    /// shape.
    #[test]
    fn npy_round_trip(
        dims in prop::collection::vec(1usize..5, 1..4),
        f64_mode in any::<bool>(),
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dtype = if f64_mode { DType::F64 } else { DType::F32 };
        let t = spadun::tensor::rand_uniform(&dims, dtype, -10.0, 10.0, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.npy");
        spadun::npy::save_tensor(&p, &t).unwrap();
        let back = spadun::npy::load_tensor(&p).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        match dtype {
            DType::F32 => prop_assert_eq!(back.as_f32_slice(), t.as_f32_slice()),
            DType::F64 => prop_assert_eq!(back.as_f64_slice(), t.as_f64_slice()),
        }
    }

    /// TV denoising never raises the TV norm and never leaves the input's
    /// value range.
    #[test]
    fn tv_denoise_contracts(
        weight in 0.01f64..0.5,
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let img = spadun::tensor::rand_uniform(&[10, 11], DType::F64, 0.0, 1.0, &mut rng);
        let out = tv_denoise(&img, weight, 30).unwrap();
        let before = tv_norm(&img.to_f64_vec(), 10, 11);
        let after = tv_norm(&out.to_f64_vec(), 10, 11);
        prop_assert!(after <= before + 1e-9);
        prop_assert!(out.max_abs() <= img.max_abs() + 1e-9);
    }

    /// Elementwise arithmetic broadcasts like the shape algebra promises:
    /// (a + b) - b == a when b broadcasts over a.
    #[test]
    fn broadcast_add_sub_cancels(
        c in 1usize..4,
        h in 1usize..5,
        w in 1usize..5,
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = spadun::tensor::rand_uniform(&[c, h, w], DType::F64, -1.0, 1.0, &mut rng);
        let b = spadun::tensor::rand_uniform(&[h, w], DType::F64, -1.0, 1.0, &mut rng);
        let round = a.add(&b).unwrap().sub(&b).unwrap();
        let sup = round
            .to_f64_vec()
            .iter()
            .zip(a.to_f64_vec())
            .map(|(&x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        prop_assert!(sup < 1e-15);
    }
}

// proptest generates shrink files on failure; keep rank-3 tensor helper
// referenced so shapes stay obvious in failure output.
#[test]
fn helper_shapes() {
    let t = tensor3(2, 1, 3, vec![0.0; 6]);
    assert_eq!(t.shape(), &[2, 1, 3]);
}
