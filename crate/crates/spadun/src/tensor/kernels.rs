//! Element trait and the broadcast/reduction index machinery shared by the
//! op implementations.

use super::{Storage, TensorError};

/// Scalar element of a tensor. Implemented for f32 and f64 only.
pub(crate) trait Elem:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln_1p(self) -> Self;
    fn erf(self) -> Self;
    fn abs(self) -> Self;

    fn storage(data: Vec<Self>) -> Storage;
    /// View into a storage of this element type. Callers guarantee the
    /// dtype matches (internal invariant).
    fn slice(storage: &Storage) -> &[Self];
}

impl Elem for f32 {
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;

    fn from_f64(x: f64) -> f32 {
        x as f32
    }
    fn sqrt(self) -> f32 {
        f32::sqrt(self)
    }
    fn exp(self) -> f32 {
        f32::exp(self)
    }
    fn ln_1p(self) -> f32 {
        f32::ln_1p(self)
    }
    fn erf(self) -> f32 {
        // f64 round-trip keeps the erf evaluation well below f32 ulp error.
        libm::erf(self as f64) as f32
    }
    fn abs(self) -> f32 {
        f32::abs(self)
    }

    fn storage(data: Vec<f32>) -> Storage {
        Storage::F32(data)
    }
    fn slice(storage: &Storage) -> &[f32] {
        match storage {
            Storage::F32(v) => v,
            _ => panic!("expected f32 storage"),
        }
    }
}

impl Elem for f64 {
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;

    fn from_f64(x: f64) -> f64 {
        x
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn ln_1p(self) -> f64 {
        f64::ln_1p(self)
    }
    fn erf(self) -> f64 {
        libm::erf(self)
    }
    fn abs(self) -> f64 {
        f64::abs(self)
    }

    fn storage(data: Vec<f64>) -> Storage {
        Storage::F64(data)
    }
    fn slice(storage: &Storage) -> &[f64] {
        match storage {
            Storage::F64(v) => v,
            _ => panic!("expected f64 storage"),
        }
    }
}

/// Shape of `a op b` under numpy-style broadcasting (trailing alignment,
/// size-1 dims stretch).
pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                details: format!("cannot broadcast {a:?} with {b:?}"),
            });
        };
    }
    Ok(out)
}

/// Row-major strides, with stride 0 on dims the input broadcasts along.
/// `shape` is right-aligned against `out_shape`.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut real = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        real[i] = acc;
        acc *= shape[i];
    }
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        if i >= offset && shape[i - offset] != 1 {
            out[i] = real[i - offset];
        }
    }
    out
}

/// Elementwise binary op with broadcasting. Fast paths for equal shapes and
/// scalar operands; odometer walk otherwise.
pub(crate) fn binary_bcast<T: Elem>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let n: usize = out_shape.iter().product();
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if b.len() == 1 {
        let y = b[0];
        return a.iter().map(|&x| f(x, y)).collect();
    }
    if a.len() == 1 {
        let x = a[0];
        return b.iter().map(|&y| f(x, y)).collect();
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut oa = 0usize;
    let mut ob = 0usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(f(a[oa], b[ob]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Sums `values` (laid out as `from_shape`) down to `to_shape`, the reverse
/// of broadcasting. Used by binary-op backward passes.
pub(crate) fn reduce_to_shape<T: Elem>(
    values: &[T],
    from_shape: &[usize],
    to_shape: &[usize],
) -> Vec<T> {
    if from_shape == to_shape {
        return values.to_vec();
    }
    let to_n: usize = to_shape.iter().product();
    let mut out = vec![T::ZERO; to_n];
    if to_n == 1 {
        let mut acc = T::ZERO;
        for &v in values {
            acc += v;
        }
        out[0] = acc;
        return out;
    }
    let st = broadcast_strides(to_shape, from_shape);
    let rank = from_shape.len();
    let mut idx = vec![0usize; rank];
    let mut ot = 0usize;
    for &v in values {
        out[ot] += v;
        for d in (0..rank).rev() {
            idx[d] += 1;
            ot += st[d];
            if idx[d] < from_shape[d] {
                break;
            }
            idx[d] = 0;
            ot -= st[d] * from_shape[d];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape("t", &[2, 3], &[2, 3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape("t", &[1], &[4, 5]).unwrap(), vec![4, 5]);
        assert_eq!(
            broadcast_shape("t", &[3, 4], &[2, 3, 4]).unwrap(),
            vec![2, 3, 4]
        );
        assert_eq!(
            broadcast_shape("t", &[1, 6, 1, 1], &[2, 6, 4, 4]).unwrap(),
            vec![2, 6, 4, 4]
        );
        assert!(broadcast_shape("t", &[2, 3], &[3, 2]).is_err());
    }

    #[test]
    fn bcast_and_reduce_are_adjoint_layouts() {
        // Broadcasting [h,w] over [c,h,w] then reducing back must count each
        // element c times.
        let hw = [2usize, 2];
        let chw = [3usize, 2, 2];
        let a: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![1.0f64; 12];
        let res = binary_bcast(&a, &hw, &b, &chw, &chw, |x, y| x * y);
        assert_eq!(res.len(), 12);
        assert_eq!(&res[0..4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&res[8..12], &[1.0, 2.0, 3.0, 4.0]);
        let back = reduce_to_shape(&res, &chw, &hw);
        assert_eq!(back, vec![3.0, 6.0, 9.0, 12.0]);
    }
}
