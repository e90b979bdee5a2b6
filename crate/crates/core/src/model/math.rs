//! Dense float kernels shared by the forward and backward passes.
//!
//! All matrices are row-major. Accumulation always runs in a fixed order
//! (ascending inner index) so results are bit-reproducible run to run.

use num_traits::{Float, FromPrimitive};

/// Scalar type the model runs in: f32 for training, f64 for gradient checks.
pub trait Real:
    Float + FromPrimitive + std::iter::Sum + std::fmt::Debug + Send + Sync + 'static
{
    fn from_f64c(x: f64) -> Self {
        Self::from_f64(x).expect("constant conversion")
    }
    fn to_f64c(self) -> f64;
}

impl Real for f32 {
    fn to_f64c(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn to_f64c(self) -> f64 {
        self
    }
}

/// c[m*n] = a[m*k] @ b[k*n]
pub fn gemm<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    c.fill(T::zero());
    gemm_acc(c, a, b, m, k, n);
}

/// c[m*n] += a[m*k] @ b[k*n]
///
/// saxpy loop order: the inner loop updates independent accumulators, which
/// lets LLVM vectorize it without reassociating any reduction.
pub fn gemm_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + aik * b_row[j];
            }
        }
    }
}

/// c[m*n] += a[m*k] @ b^T, where b is [n*k]
pub fn gemm_bt_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    gemm_acc(c, a, &bt, m, k, n);
}

/// c[k*n] += a^T @ b, where a is [m*k] and b is [m*n]
pub fn gemm_at_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), k * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let c_row = &mut c[kk * n..(kk + 1) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + aik * b_row[j];
            }
        }
    }
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// y[m*n] += broadcast bias[n] over rows
pub fn add_bias<T: Real>(y: &mut [T], bias: &[T], m: usize, n: usize) {
    debug_assert_eq!(y.len(), m * n);
    debug_assert_eq!(bias.len(), n);
    for i in 0..m {
        let row = &mut y[i * n..(i + 1) * n];
        for j in 0..n {
            row[j] = row[j] + bias[j];
        }
    }
}

/// db[n] += column sums of dy[m*n]
pub fn bias_grad_acc<T: Real>(db: &mut [T], dy: &[T], m: usize, n: usize) {
    debug_assert_eq!(db.len(), n);
    for i in 0..m {
        let row = &dy[i * n..(i + 1) * n];
        for j in 0..n {
            db[j] = db[j] + row[j];
        }
    }
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for i in 0..a.len() {
        acc = acc + a[i] * b[i];
    }
    acc
}

pub fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for i in 0..y.len() {
        y[i] = y[i] + a * x[i];
    }
}

/// In-place stabilized softmax over one row.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mut max = T::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// log(sum(exp(xs))) with max subtraction.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let mut max = T::neg_infinity();
    for &v in xs.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for &v in xs.iter() {
        sum = sum + (v - max).exp();
    }
    max + sum.ln()
}

pub const LN_EPS: f64 = 1e-5;

/// LayerNorm over one row: returns (y, xhat, inv_std).
/// y = gain * xhat + bias, xhat = (x - mean) * inv_std.
pub fn layernorm_row<T: Real>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    y: &mut [T],
    xhat: &mut [T],
) -> T {
    let n = T::from_f64c(x.len() as f64);
    let mut mean = T::zero();
    for &v in x.iter() {
        mean = mean + v;
    }
    mean = mean / n;
    let mut var = T::zero();
    for &v in x.iter() {
        let d = v - mean;
        var = var + d * d;
    }
    var = var / n;
    let inv_std = T::one() / (var + T::from_f64c(LN_EPS)).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * inv_std;
        y[i] = gain[i] * xhat[i] + bias[i];
    }
    inv_std
}

/// Backward of `layernorm_row`. Adds into dgain/dbias, writes dx.
pub fn layernorm_row_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    inv_std: T,
    gain: &[T],
    dx: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
) {
    let n = T::from_f64c(dy.len() as f64);
    let mut mean_dxhat = T::zero();
    let mut mean_dxhat_xhat = T::zero();
    for i in 0..dy.len() {
        dgain[i] = dgain[i] + dy[i] * xhat[i];
        dbias[i] = dbias[i] + dy[i];
        let dxh = dy[i] * gain[i];
        mean_dxhat = mean_dxhat + dxh;
        mean_dxhat_xhat = mean_dxhat_xhat + dxh * xhat[i];
    }
    mean_dxhat = mean_dxhat / n;
    mean_dxhat_xhat = mean_dxhat_xhat / n;
    for i in 0..dy.len() {
        let dxh = dy[i] * gain[i];
        dx[i] = inv_std * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// tanh-approximation GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64c(GELU_C);
    let a = T::from_f64c(GELU_A);
    let half = T::from_f64c(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub fn gelu_deriv<T: Real>(x: T) -> T {
    let c = T::from_f64c(GELU_C);
    let a = T::from_f64c(GELU_A);
    let half = T::from_f64c(0.5);
    let three = T::from_f64c(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small_known() {
        // [1 2; 3 4] @ [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(&mut c, &a, &b, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gemm_bt_matches_explicit_transpose() {
        let a: Vec<f64> = (0..6).map(|i| i as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64) * 0.5).collect(); // 4x3
        let mut c1 = vec![0.0; 8];
        gemm_bt_acc(&mut c1, &a, &b, 2, 3, 4);
        let bt = transpose(&b, 4, 3);
        let mut c2 = vec![0.0; 8];
        gemm_acc(&mut c2, &a, &bt, 2, 3, 4);
        assert_eq!(c1, c2);
    }

    #[test]
    fn gemm_at_matches_explicit_transpose() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 - 2.0).collect(); // 3x2
        let b: Vec<f64> = (0..9).map(|i| i as f64 * 0.25).collect(); // 3x3
        let mut c1 = vec![0.0; 6];
        gemm_at_acc(&mut c1, &a, &b, 3, 2, 3);
        let at = transpose(&a, 3, 2);
        let mut c2 = vec![0.0; 6];
        gemm_acc(&mut c2, &at, &b, 2, 3, 3);
        assert_eq!(c1, c2);
    }

    #[test]
    fn softmax_row_sums_to_one() {
        let mut row = vec![1.0f64, 2.0, 3.0, -1.0];
        softmax_in_place(&mut row);
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn layernorm_row_normalizes() {
        let x = vec![1.0f64, 2.0, 3.0, 4.0];
        let gain = vec![1.0; 4];
        let bias = vec![0.0; 4];
        let mut y = vec![0.0; 4];
        let mut xhat = vec![0.0; 4];
        layernorm_row(&x, &gain, &bias, &mut y, &mut xhat);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn gelu_matches_reference_points() {
        // gelu(0) = 0, gelu(x) -> x for large x, gelu(-x) small
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-6);
        assert!(gelu(-10.0f64).abs() < 1e-6);
        // finite-difference check of the derivative
        for &x in &[-2.0f64, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_deriv(x)).abs() < 1e-8, "x={x}");
        }
    }
}
