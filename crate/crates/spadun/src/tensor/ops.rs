//! Elementwise, reduction, and shape-manipulation primitives.

use super::kernels::{binary_bcast, broadcast_shape, reduce_to_shape, Elem};
use super::tape::grad_enabled;
use super::{OpNode, Result, Storage, Tensor, TensorError};

/// Attaches an op node when recording is on and some input feeds gradient
/// flow; otherwise returns a plain leaf.
pub(crate) fn finish_op<F>(
    data: Storage,
    shape: Vec<usize>,
    name: &'static str,
    inputs: Vec<Tensor>,
    backward: F,
) -> Tensor
where
    F: Fn(&[Tensor], &Tensor, &Storage) -> Result<Vec<Option<Storage>>> + Send + Sync + 'static,
{
    if grad_enabled() && inputs.iter().any(|t| t.tracks_grad()) {
        Tensor::from_op(
            data,
            shape,
            OpNode {
                name,
                inputs,
                backward: Box::new(backward),
            },
        )
    } else {
        Tensor::from_storage(data, shape)
    }
}

fn check_same_dtype(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dtype() != b.dtype() {
        return Err(TensorError::DTypeMismatch {
            op,
            lhs: a.dtype(),
            rhs: b.dtype(),
        });
    }
    Ok(())
}

// Broadcast-aware binary op. `dfa`/`dfb` give the local derivative w.r.t.
// each operand as a function of both operand values.
fn binary_impl<T: Elem>(
    name: &'static str,
    a: &Tensor,
    b: &Tensor,
    out_shape: Vec<usize>,
    f: impl Fn(T, T) -> T,
    dfa: impl Fn(T, T) -> T + Send + Sync + 'static,
    dfb: impl Fn(T, T) -> T + Send + Sync + 'static,
) -> Tensor {
    let av = T::slice(a.storage());
    let bv = T::slice(b.storage());
    let out = binary_bcast(av, a.shape(), bv, b.shape(), &out_shape, f);
    let shape_for_bwd = out_shape.clone();
    finish_op(
        T::storage(out),
        out_shape,
        name,
        vec![a.clone(), b.clone()],
        move |inputs, _out, up| {
            let a = &inputs[0];
            let b = &inputs[1];
            let av = T::slice(a.storage());
            let bv = T::slice(b.storage());
            let uv = T::slice(up);
            let mut grads: Vec<Option<Storage>> = vec![None, None];
            if a.tracks_grad() {
                let dfull = binary_bcast(av, a.shape(), bv, b.shape(), &shape_for_bwd, &dfa);
                let gfull: Vec<T> = uv.iter().zip(&dfull).map(|(&u, &d)| u * d).collect();
                grads[0] = Some(T::storage(reduce_to_shape(
                    &gfull,
                    &shape_for_bwd,
                    a.shape(),
                )));
            }
            if b.tracks_grad() {
                let dfull = binary_bcast(av, a.shape(), bv, b.shape(), &shape_for_bwd, &dfb);
                let gfull: Vec<T> = uv.iter().zip(&dfull).map(|(&u, &d)| u * d).collect();
                grads[1] = Some(T::storage(reduce_to_shape(
                    &gfull,
                    &shape_for_bwd,
                    b.shape(),
                )));
            }
            Ok(grads)
        },
    )
}

macro_rules! binary_op {
    ($method:ident, $name:literal, $f:expr, $dfa:expr, $dfb:expr) => {
        pub fn $method(&self, other: &Tensor) -> Result<Tensor> {
            check_same_dtype($name, self, other)?;
            let out_shape = broadcast_shape($name, self.shape(), other.shape())?;
            Ok(match self.storage() {
                Storage::F32(_) => {
                    binary_impl::<f32>($name, self, other, out_shape, $f, $dfa, $dfb)
                }
                Storage::F64(_) => {
                    binary_impl::<f64>($name, self, other, out_shape, $f, $dfa, $dfb)
                }
            })
        }
    };
}

// Unary elementwise op; `df` sees the input and output values.
fn unary_impl<T: Elem>(
    name: &'static str,
    x: &Tensor,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + Send + Sync + 'static,
) -> Tensor {
    let xv = T::slice(x.storage());
    let out: Vec<T> = xv.iter().map(|&v| f(v)).collect();
    finish_op(
        T::storage(out),
        x.shape().to_vec(),
        name,
        vec![x.clone()],
        move |inputs, out, up| {
            let xv = T::slice(inputs[0].storage());
            let yv = T::slice(out.storage());
            let uv = T::slice(up);
            let g: Vec<T> = xv
                .iter()
                .zip(yv)
                .zip(uv)
                .map(|((&x, &y), &u)| u * df(x, y))
                .collect();
            Ok(vec![Some(T::storage(g))])
        },
    )
}

macro_rules! unary_op {
    ($method:ident, $name:literal, $f:expr, $df:expr) => {
        pub fn $method(&self) -> Result<Tensor> {
            Ok(match self.storage() {
                Storage::F32(_) => unary_impl::<f32>($name, self, $f, $df),
                Storage::F64(_) => unary_impl::<f64>($name, self, $f, $df),
            })
        }
    };
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu_fwd<T: Elem>(x: T) -> T {
    // x * CDF_N(0,1)(x), exact erf form.
    let half = T::from_f64(0.5);
    let cdf = half * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf());
    x * cdf
}

fn gelu_dfdx<T: Elem>(x: T, _y: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf());
    let pdf = T::from_f64(INV_SQRT_2PI) * (-(x * x) * half).exp();
    cdf + x * pdf
}

fn sigmoid_fwd<T: Elem>(x: T) -> T {
    // Split on sign for stability at large |x|.
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn softplus_fwd<T: Elem>(x: T) -> T {
    // max(x, 0) + ln(1 + exp(-|x|))
    let m = if x > T::ZERO { x } else { T::ZERO };
    m + (-x.abs()).exp().ln_1p()
}

impl Tensor {
    binary_op!(add, "add", |a, b| a + b, |_a, _b| 1.0, |_a, _b| 1.0);
    binary_op!(sub, "sub", |a, b| a - b, |_a, _b| 1.0, |_a, _b| -1.0);
    binary_op!(mul, "mul", |a, b| a * b, |_a, b| b, |a, _b| a);
    binary_op!(div, "div", |a, b| a / b, |_a, b| 1.0 / b, |a, b| -a
        / (b * b));

    unary_op!(neg, "neg", |x| -x, |_x, _y| -1.0);
    unary_op!(sqrt, "sqrt", Elem::sqrt, |_x, y| 0.5 / y);
    unary_op!(gelu, "gelu", gelu_fwd, gelu_dfdx);
    unary_op!(sigmoid, "sigmoid", sigmoid_fwd, |_x, y| y * (1.0 - y));
    unary_op!(softplus, "softplus", softplus_fwd, |x, _y| sigmoid_fwd(x));

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        Ok(match self.storage() {
            Storage::F32(_) => {
                unary_impl::<f32>("add_scalar", self, |x| x + c as f32, |_x, _y| 1.0)
            }
            Storage::F64(_) => unary_impl::<f64>("add_scalar", self, |x| x + c, |_x, _y| 1.0),
        })
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        Ok(match self.storage() {
            Storage::F32(_) => {
                unary_impl::<f32>("mul_scalar", self, |x| x * c as f32, move |_x, _y| c as f32)
            }
            Storage::F64(_) => unary_impl::<f64>("mul_scalar", self, |x| x * c, move |_x, _y| c),
        })
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        fn run<T: Elem>(x: &Tensor) -> Tensor {
            let xv = T::slice(x.storage());
            let mut acc = T::ZERO;
            for &v in xv {
                acc += v;
            }
            finish_op(
                T::storage(vec![acc]),
                vec![1],
                "sum_all",
                vec![x.clone()],
                |inputs, _out, up| {
                    let u = T::slice(up)[0];
                    Ok(vec![Some(T::storage(vec![u; inputs[0].numel()]))])
                },
            )
        }
        Ok(match self.storage() {
            Storage::F32(_) => run::<f32>(self),
            Storage::F64(_) => run::<f64>(self),
        })
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel() as f64;
        self.sum_all()?.mul_scalar(1.0 / n)
    }

    /// Sum over one axis, removing it from the shape (unless that would
    /// leave a rank-0 tensor, in which case the result is shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "sum_axis",
                axis,
                rank: self.rank(),
            });
        }
        fn run<T: Elem>(x: &Tensor, axis: usize, out_shape: Vec<usize>) -> Tensor {
            let shape = x.shape();
            let outer: usize = shape[..axis].iter().product();
            let d = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let xv = T::slice(x.storage());
            let mut out = vec![T::ZERO; outer * inner];
            for o in 0..outer {
                for k in 0..d {
                    let src = (o * d + k) * inner;
                    let dst = o * inner;
                    for i in 0..inner {
                        out[dst + i] += xv[src + i];
                    }
                }
            }
            finish_op(
                T::storage(out),
                out_shape,
                "sum_axis",
                vec![x.clone()],
                move |inputs, _out, up| {
                    let uv = T::slice(up);
                    let mut g = vec![T::ZERO; inputs[0].numel()];
                    for o in 0..outer {
                        for k in 0..d {
                            let dst = (o * d + k) * inner;
                            let src = o * inner;
                            g[dst..dst + inner].copy_from_slice(&uv[src..src + inner]);
                        }
                    }
                    Ok(vec![Some(T::storage(g))])
                },
            )
        }
        let mut out_shape: Vec<usize> = self.shape().to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(match self.storage() {
            Storage::F32(_) => run::<f32>(self, axis, out_shape),
            Storage::F64(_) => run::<f64>(self, axis, out_shape),
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                details: format!("cannot reshape {:?} to {:?}", self.shape(), shape),
            });
        }
        let data = self.storage().clone();
        Ok(finish_op(
            data,
            shape.to_vec(),
            "reshape",
            vec![self.clone()],
            |_inputs, _out, up| Ok(vec![Some(up.clone())]),
        ))
    }

    /// Broadcasts (materializing) to a compatible larger shape.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let out_shape = broadcast_shape("broadcast_to", self.shape(), shape)?;
        if out_shape != shape {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                details: format!("{:?} does not broadcast to {:?}", self.shape(), shape),
            });
        }
        fn run<T: Elem>(x: &Tensor, out_shape: Vec<usize>) -> Tensor {
            let n: usize = out_shape.iter().product();
            let xv = T::slice(x.storage());
            let ones = vec![T::ONE; n];
            let out = binary_bcast(xv, x.shape(), &ones, &out_shape, &out_shape, |a, _| a);
            let bshape = out_shape.clone();
            finish_op(
                T::storage(out),
                out_shape,
                "broadcast_to",
                vec![x.clone()],
                move |inputs, _out, up| {
                    let uv = T::slice(up);
                    let g = reduce_to_shape(uv, &bshape, inputs[0].shape());
                    Ok(vec![Some(T::storage(g))])
                },
            )
        }
        Ok(match self.storage() {
            Storage::F32(_) => run::<f32>(self, out_shape),
            Storage::F64(_) => run::<f64>(self, out_shape),
        })
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "slice",
                axis,
                rank: self.rank(),
            });
        }
        let size = self.shape()[axis];
        if len == 0 || start + len > size {
            return Err(TensorError::SliceOutOfRange {
                axis,
                size,
                start,
                len,
            });
        }
        let indices: Vec<usize> = (start..start + len).collect();
        self.index_select(axis, &indices)
    }

    /// Gathers rows along `axis` in the given order. Indices may repeat;
    /// gradients accumulate into repeated sources.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "index_select",
                axis,
                rank: self.rank(),
            });
        }
        let size = self.shape()[axis];
        if indices.is_empty() {
            return Err(TensorError::Invalid {
                op: "index_select",
                details: "empty index list".into(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= size) {
            return Err(TensorError::SliceOutOfRange {
                axis,
                size,
                start: bad,
                len: 1,
            });
        }
        fn run<T: Elem>(x: &Tensor, axis: usize, indices: Vec<usize>) -> Tensor {
            let shape = x.shape();
            let outer: usize = shape[..axis].iter().product();
            let d = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let xv = T::slice(x.storage());
            let mut out = Vec::with_capacity(outer * indices.len() * inner);
            for o in 0..outer {
                for &ix in &indices {
                    let src = (o * d + ix) * inner;
                    out.extend_from_slice(&xv[src..src + inner]);
                }
            }
            let mut out_shape = shape.to_vec();
            out_shape[axis] = indices.len();
            finish_op(
                T::storage(out),
                out_shape,
                "index_select",
                vec![x.clone()],
                move |inputs, _out, up| {
                    let uv = T::slice(up);
                    let mut g = vec![T::ZERO; inputs[0].numel()];
                    let k = indices.len();
                    for o in 0..outer {
                        for (j, &ix) in indices.iter().enumerate() {
                            let src = (o * k + j) * inner;
                            let dst = (o * d + ix) * inner;
                            for i in 0..inner {
                                g[dst + i] += uv[src + i];
                            }
                        }
                    }
                    Ok(vec![Some(T::storage(g))])
                },
            )
        }
        Ok(match self.storage() {
            Storage::F32(_) => run::<f32>(self, axis, indices.to_vec()),
            Storage::F64(_) => run::<f64>(self, axis, indices.to_vec()),
        })
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors.first().ok_or(TensorError::Invalid {
            op: "concat",
            details: "empty tensor list".into(),
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank,
            });
        }
        for t in tensors {
            check_same_dtype("concat", first, t)?;
            if t.rank() != rank
                || t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    details: format!(
                        "non-axis dims differ: {:?} vs {:?} (axis {axis})",
                        first.shape(),
                        t.shape()
                    ),
                });
            }
        }
        fn run<T: Elem>(tensors: &[&Tensor], axis: usize) -> Tensor {
            let shape0 = tensors[0].shape();
            let outer: usize = shape0[..axis].iter().product();
            let inner: usize = shape0[axis + 1..].iter().product();
            let axis_sizes: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
            let total_axis: usize = axis_sizes.iter().sum();
            let mut out = Vec::with_capacity(outer * total_axis * inner);
            for o in 0..outer {
                for (t, &dk) in tensors.iter().zip(&axis_sizes) {
                    let tv = T::slice(t.storage());
                    let src = o * dk * inner;
                    out.extend_from_slice(&tv[src..src + dk * inner]);
                }
            }
            let mut out_shape = shape0.to_vec();
            out_shape[axis] = total_axis;
            finish_op(
                T::storage(out),
                out_shape,
                "concat",
                tensors.iter().map(|&t| t.clone()).collect(),
                move |inputs, _out, up| {
                    let uv = T::slice(up);
                    let mut grads = Vec::with_capacity(inputs.len());
                    let mut offset = 0usize;
                    for (input, &dk) in inputs.iter().zip(&axis_sizes) {
                        if input.tracks_grad() {
                            let mut g = Vec::with_capacity(input.numel());
                            for o in 0..outer {
                                let src = (o * total_axis + offset) * inner;
                                g.extend_from_slice(&uv[src..src + dk * inner]);
                            }
                            grads.push(Some(T::storage(g)));
                        } else {
                            grads.push(None);
                        }
                        offset += dk;
                    }
                    Ok(grads)
                },
            )
        }
        Ok(match first.storage() {
            Storage::F32(_) => run::<f32>(tensors, axis),
            Storage::F64(_) => run::<f64>(tensors, axis),
        })
    }
}
