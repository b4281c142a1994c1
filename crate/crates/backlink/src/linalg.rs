//! Matrix product kernels.
//!
//! All products funnel through ndarray views over the tensor buffers, which
//! dispatches to blocked matrix multiplication for `f32`/`f64`. Transposed
//! variants are views, not copies.

use ndarray::{Array2, ArrayView2};

use crate::{Error, Real, Result, Tensor};

fn view2<T: Real>(t: &Tensor<T>, rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), t.data()).expect("tensor buffer length")
}

/// Row-major buffer of a product result. `dot` does not guarantee a
/// standard-layout array, so fall back to logical-order iteration.
fn row_major<T: Real>(a: Array2<T>) -> Vec<T> {
    if a.is_standard_layout() {
        a.into_raw_vec_and_offset().0
    } else {
        a.iter().copied().collect()
    }
}

/// `a [m,k] * b [k,n] -> [m,n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: ash.to_vec(),
            rhs: bsh.to_vec(),
        });
    }
    let (m, k, n) = (ash[0], ash[1], bsh[1]);
    let out = view2(a, m, k).dot(&view2(b, k, n));
    Tensor::new(vec![m, n], row_major(out))
}

/// `a^T [k,m]^T * b [k,n] -> [m,n]`; `a` is stored as `[k,m]`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != 2 || bsh.len() != 2 || ash[0] != bsh[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            lhs: ash.to_vec(),
            rhs: bsh.to_vec(),
        });
    }
    let (k, m, n) = (ash[0], ash[1], bsh[1]);
    let out = view2(a, k, m).t().dot(&view2(b, k, n));
    Tensor::new(vec![m, n], row_major(out))
}

/// `a [m,k] * b^T [n,k]^T -> [m,n]`; `b` is stored as `[n,k]`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[1] {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            lhs: ash.to_vec(),
            rhs: bsh.to_vec(),
        });
    }
    let (m, k, n) = (ash[0], ash[1], bsh[0]);
    let out = view2(a, m, k).dot(&view2(b, n, k).t());
    Tensor::new(vec![m, n], row_major(out))
}

/// Add a bias row vector `[n]` to every row of `x [m,n]`.
pub fn add_bias_rows<T: Real>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (xs, bs) = (x.shape(), b.shape());
    if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
        return Err(Error::ShapeMismatch {
            op: "add_bias",
            lhs: xs.to_vec(),
            rhs: bs.to_vec(),
        });
    }
    let n = bs[0];
    let bias = b.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + bias[i % n])
        .collect();
    Tensor::new(xs.to_vec(), data)
}

/// Column sums of `x [m,n] -> [n]`; the bias gradient.
pub fn sum_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 2 {
        return Err(Error::invalid("sum_rows", format!("expected 2-d, got {:?}", xs)));
    }
    let n = xs[1];
    let mut out = vec![T::zero(); n];
    for (i, &v) in x.data().iter().enumerate() {
        out[i % n] += v;
    }
    Tensor::new(vec![n], out)
}
