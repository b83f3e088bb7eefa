//! Dense tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are immutable row-major buffers in f32 or f64. Every operation
//! that participates in differentiation records, at execution time, a node
//! holding its inputs and a backward closure; [`backward`](Tape::backward)
//! replays those nodes in reverse topological order and accumulates
//! gradients into the `requires_grad` leaves. The graph is rebuilt on every
//! forward pass — there is no graph reuse and no compilation step.
//!
//! f64 is supported by every primitive so that finite-difference oracles
//! (`grad_check`) can run the exact same code paths at tight tolerances.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

mod conv;
mod grad_check;
mod kernels;
mod norm;
mod ops;
mod tape;

pub use conv::ResampleMode;
pub use grad_check::grad_check;
pub use tape::{backward, no_grad, Tape};

/// Element type of a tensor. f64 exists for gradient-check oracles and the
/// dense linear-algebra tests; training runs in f32.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Contiguous row-major value buffer.
#[derive(Clone, Debug)]
pub(crate) enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Storage {
    pub(crate) fn dtype(&self) -> DType {
        match self {
            Storage::F32(_) => DType::F32,
            Storage::F64(_) => DType::F64,
        }
    }

    pub(crate) fn len(&self) -> usize {
        match self {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
        }
    }

    pub(crate) fn zeros(dtype: DType, n: usize) -> Storage {
        match dtype {
            DType::F32 => Storage::F32(vec![0.0; n]),
            DType::F64 => Storage::F64(vec![0.0; n]),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Storage) {
        match (self, other) {
            (Storage::F32(a), Storage::F32(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += *y;
                }
            }
            (Storage::F64(a), Storage::F64(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += *y;
                }
            }
            _ => panic!("dtype mismatch in gradient accumulation"),
        }
    }

    pub(crate) fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::F64(v) => v.clone(),
        }
    }
}

/// Structured errors raised by tensor primitives.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("dtype mismatch in {op}: {lhs} vs {rhs}")]
    DTypeMismatch {
        op: &'static str,
        lhs: DType,
        rhs: DType,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("slice out of range: axis {axis} has size {size}, requested [{start}, {start}+{len})")]
    SliceOutOfRange {
        axis: usize,
        size: usize,
        start: usize,
        len: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: {details}")]
    Invalid { op: &'static str, details: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Node recorded on the tape: the op's inputs plus the closure that maps the
/// upstream gradient to per-input gradients.
pub(crate) struct OpNode {
    pub(crate) name: &'static str,
    pub(crate) inputs: Vec<Tensor>,
    #[allow(clippy::type_complexity)]
    pub(crate) backward:
        Box<dyn Fn(&[Tensor], &Tensor, &Storage) -> Result<Vec<Option<Storage>>> + Send + Sync>,
}

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Storage,
    requires_grad: bool,
    grad: Mutex<Option<Storage>>,
    op: Option<OpNode>,
}

/// Dense n-dimensional array, immutable after creation except for its
/// gradient buffer. Cloning is cheap (shared storage).
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, dtype={}, grad={})",
            self.inner.shape,
            self.dtype(),
            self.inner.requires_grad
        )
    }
}

fn check_shape(shape: &[usize], len: usize) {
    assert!(
        !shape.is_empty() && shape.iter().all(|&d| d > 0),
        "tensor shape must be non-empty with positive dims, got {shape:?}"
    );
    let n: usize = shape.iter().product();
    assert_eq!(n, len, "shape {shape:?} does not match buffer length {len}");
}

impl Tensor {
    pub(crate) fn from_storage(data: Storage, shape: Vec<usize>) -> Tensor {
        check_shape(&shape, data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                requires_grad: false,
                grad: Mutex::new(None),
                op: None,
            }),
        }
    }

    pub(crate) fn from_op(data: Storage, shape: Vec<usize>, op: OpNode) -> Tensor {
        check_shape(&shape, data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                requires_grad: false,
                grad: Mutex::new(None),
                op: Some(op),
            }),
        }
    }

    pub fn from_f32(data: Vec<f32>, shape: &[usize]) -> Tensor {
        Tensor::from_storage(Storage::F32(data), shape.to_vec())
    }

    pub fn from_f64(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_storage(Storage::F64(data), shape.to_vec())
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_storage(Storage::zeros(dtype, n), shape.to_vec())
    }

    pub fn full(shape: &[usize], dtype: DType, value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = match dtype {
            DType::F32 => Storage::F32(vec![value as f32; n]),
            DType::F64 => Storage::F64(vec![value; n]),
        };
        Tensor::from_storage(data, shape.to_vec())
    }

    pub fn ones(shape: &[usize], dtype: DType) -> Tensor {
        Tensor::full(shape, dtype, 1.0)
    }

    pub fn scalar_tensor(value: f64, dtype: DType) -> Tensor {
        Tensor::full(&[1], dtype, value)
    }

    /// Marks this tensor as a differentiation leaf. Intended for freshly
    /// constructed tensors (parameters, grad-check inputs).
    pub fn requires_grad(self) -> Tensor {
        if self.inner.requires_grad {
            return self;
        }
        Tensor {
            inner: Arc::new(Inner {
                id: self.inner.id,
                shape: self.inner.shape.clone(),
                data: self.inner.data.clone(),
                requires_grad: true,
                grad: Mutex::new(None),
                op: None,
            }),
        }
    }

    /// A leaf copy that does not participate in differentiation.
    pub fn detach(&self) -> Tensor {
        Tensor::from_storage(self.inner.data.clone(), self.inner.shape.clone())
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn dtype(&self) -> DType {
        self.inner.data.dtype()
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    pub fn does_require_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True when this tensor feeds gradient flow: a `requires_grad` leaf or
    /// any value derived from one while recording was enabled.
    pub fn tracks_grad(&self) -> bool {
        self.inner.requires_grad || self.inner.op.is_some()
    }

    pub(crate) fn storage(&self) -> &Storage {
        &self.inner.data
    }

    pub(crate) fn op(&self) -> Option<&OpNode> {
        self.inner.op.as_ref()
    }

    pub fn as_f32_slice(&self) -> Option<&[f32]> {
        match &self.inner.data {
            Storage::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f64_slice(&self) -> Option<&[f64]> {
        match &self.inner.data {
            Storage::F64(v) => Some(v),
            _ => None,
        }
    }

    /// Values widened to f64 regardless of dtype.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.to_f64_vec()
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.inner.data {
            Storage::F32(v) => v.clone(),
            Storage::F64(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    /// Casts to the requested dtype. The result is a leaf (casts are used on
    /// data such as masks and measurements, never inside the learned graph).
    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        if self.dtype() == dtype {
            return self.detach();
        }
        let data = match dtype {
            DType::F32 => Storage::F32(self.to_f32_vec()),
            DType::F64 => Storage::F64(self.to_f64_vec()),
        };
        Tensor::from_storage(data, self.inner.shape.to_vec())
    }

    /// Single value of a one-element tensor.
    pub fn scalar(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        Ok(self.to_f64_vec()[0])
    }

    /// Value at a multi-index, widened to f64. Test/debug helper.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let mut flat = 0usize;
        for (i, (&ix, &dim)) in index.iter().zip(self.shape()).enumerate() {
            assert!(
                ix < dim,
                "index {ix} out of bounds for dim {i} (size {dim})"
            );
            flat = flat * dim + ix;
        }
        match &self.inner.data {
            Storage::F32(v) => v[flat] as f64,
            Storage::F64(v) => v[flat],
        }
    }

    /// Accumulated gradient, if backward has produced one.
    pub fn grad(&self) -> Option<Tensor> {
        let guard = self.inner.grad.lock().unwrap();
        guard
            .as_ref()
            .map(|g| Tensor::from_storage(g.clone(), self.inner.shape.clone()))
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &Storage) {
        let mut guard = self.inner.grad.lock().unwrap();
        match guard.as_mut() {
            Some(existing) => existing.add_assign(g),
            None => *guard = Some(g.clone()),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.to_f64_vec().iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        match &self.inner.data {
            Storage::F32(v) => v.iter().all(|x| x.is_finite()),
            Storage::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }
}

/// Named learnable tensor. Names are path-like ("stage0.unet.stem.weight")
/// and unique within one parameter set; checkpointing keys on them.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Parameter {
        Parameter {
            name: name.into(),
            tensor: tensor.requires_grad(),
        }
    }

    /// Replaces the value (optimizer update); the new tensor becomes a fresh
    /// leaf with no gradient.
    pub fn assign(&mut self, tensor: Tensor) {
        debug_assert_eq!(tensor.shape(), self.tensor.shape());
        self.tensor = tensor.requires_grad();
    }
}

/// Uniform draw in `[lo, hi)`, reproducible from the caller's RNG.
pub fn rand_uniform(
    shape: &[usize],
    dtype: DType,
    lo: f64,
    hi: f64,
    rng: &mut impl rand::Rng,
) -> Tensor {
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n)
        .map(|_| lo + (hi - lo) * rng.random::<f64>())
        .collect();
    match dtype {
        DType::F32 => Tensor::from_f32(vals.iter().map(|&x| x as f32).collect(), shape),
        DType::F64 => Tensor::from_f64(vals, shape),
    }
}

/// Gaussian draw, reproducible from the caller's RNG.
pub fn rand_normal(
    shape: &[usize],
    dtype: DType,
    mean: f64,
    std: f64,
    rng: &mut impl rand::Rng,
) -> Tensor {
    use rand_distr::Distribution;
    let normal = rand_distr::Normal::new(mean, std).expect("finite mean/std");
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    match dtype {
        DType::F32 => Tensor::from_f32(vals.iter().map(|&x| x as f32).collect(), shape),
        DType::F64 => Tensor::from_f64(vals, shape),
    }
}
