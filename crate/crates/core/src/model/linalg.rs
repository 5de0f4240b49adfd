//! Dense row-major kernels used by the encoder: strided matrix products
//! (backed by `matrixmultiply`), layer normalization and GELU.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of a parameter set.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + Sum
{
    /// # Safety
    /// Pointers and strides must describe in-bounds matrices; see
    /// `matrixmultiply::sgemm`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn erf(self) -> Self;

    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn erf(self) -> f32 {
        erf_f32(self)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn erf(self) -> f64 {
        libm::erf(self)
    }
}

/// Rational minimax approximation of `erf` on [-4, 4] (saturating outside),
/// accurate to a few ulp in single precision and branch-free so that it
/// vectorizes.
fn erf_f32(x: f32) -> f32 {
    let x = x.clamp(-4.0, 4.0);
    let x2 = x * x;
    let mut p = -2.726_142_3e-10_f32;
    p = p * x2 + 2.770_681_4e-8;
    p = p * x2 - 2.101_024e-6;
    p = p * x2 - 5.692_506_4e-5;
    p = p * x2 - 7.349_906_3e-4;
    p = p * x2 - 2.954_600_1e-3;
    p = p * x2 - 1.609_603_3e-2;
    let mut q = -1.456_607_2e-5_f32;
    q = q * x2 - 2.133_740_6e-4;
    q = q * x2 - 1.682_827e-3;
    q = q * x2 - 7.373_329_2e-3;
    q = q * x2 - 1.426_474e-2;
    x * p / q
}

/// Borrowed strided matrix.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    data: &'a [T],
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> View<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [T], off: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        let v = Self {
            data,
            off,
            rows,
            cols,
            rs,
            cs,
        };
        assert!(v.fits(data.len()), "view exceeds buffer of {}", data.len());
        v
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn fits(&self, len: usize) -> bool {
        self.rows == 0 || self.cols == 0 || self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < len
    }
}

pub struct ViewMut<'a, T> {
    data: &'a mut [T],
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> ViewMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a mut [T], off: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        let ok = rows == 0 || cols == 0 || off + (rows - 1) * rs + (cols - 1) * cs < data.len();
        assert!(ok, "mutable view exceeds buffer of {}", data.len());
        Self {
            data,
            off,
            rows,
            cols,
            rs,
            cs,
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub fn matmul<T: Real>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output shape mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let p = c.off + i * c.rs + j * c.cs;
                c.data[p] = if beta == T::zero() { T::zero() } else { beta * c.data[p] };
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked at construction and the
    // output buffer is exclusively borrowed.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.off),
            c.rs as isize,
            c.cs as isize,
        )
    }
}

/// `y[rows x out] = x[rows x inp] * w[inp x out] + bias`.
pub fn linear<T: Real>(x: &[T], w: &[T], bias: &[T], rows: usize, inp: usize, out: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(rows * out);
    for _ in 0..rows {
        y.extend_from_slice(bias);
    }
    matmul(T::one(), View::new(x, rows, inp), View::new(w, inp, out), T::one(), ViewMut::new(&mut y, rows, out));
    y
}

/// Gradients of [`linear`]: accumulates into `dw`, `db` and returns `dx`
/// (or accumulates into `dx_acc` when given).
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    rows: usize,
    inp: usize,
    out: usize,
    dw: &mut [T],
    db: &mut [T],
    dx_acc: Option<&mut [T]>,
) -> Option<Vec<T>> {
    matmul(T::one(), View::new(x, rows, inp).t(), View::new(dy, rows, out), T::one(), ViewMut::new(dw, inp, out));
    for r in 0..rows {
        for (b, &g) in db.iter_mut().zip(&dy[r * out..(r + 1) * out]) {
            *b += g;
        }
    }
    match dx_acc {
        Some(acc) => {
            matmul(T::one(), View::new(dy, rows, out), View::new(w, inp, out).t(), T::one(), ViewMut::new(acc, rows, inp));
            None
        }
        None => {
            let mut dx = vec![T::zero(); rows * inp];
            matmul(T::one(), View::new(dy, rows, out), View::new(w, inp, out).t(), T::zero(), ViewMut::new(&mut dx, rows, inp));
            Some(dx)
        }
    }
}

/// Per-row statistics kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Real>(x: &[T], gain: &[T], bias: &[T], dim: usize, eps: T) -> (Vec<T>, LayerNormCache<T>) {
    let rows = x.len() / dim;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    let n = T::c(dim as f64);
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..dim {
            let h = (row[j] - mean) * rs;
            xhat[r * dim + j] = h;
            y[r * dim + j] = h * gain[j] + bias[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward<T: Real>(
    dy: &[T],
    cache: &LayerNormCache<T>,
    gain: &[T],
    dim: usize,
    dgain: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let rows = dy.len() / dim;
    let n = T::c(dim as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxhat = vec![T::zero(); dim];
    for r in 0..rows {
        let dyr = &dy[r * dim..(r + 1) * dim];
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for j in 0..dim {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
        }
        mean_d = mean_d / n;
        mean_dx = mean_dx / n;
        let rs = cache.rstd[r];
        for j in 0..dim {
            dx[r * dim + j] = rs * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

/// Exact GELU `x * Phi(x)`; returns the activations and `Phi(x)`.
pub fn gelu<T: Real>(u: &[T]) -> (Vec<T>, Vec<T>) {
    let half = T::c(0.5);
    let inv_sqrt2 = T::c(std::f64::consts::FRAC_1_SQRT_2);
    let cdf: Vec<T> = u.iter().map(|&x| half * (T::one() + (x * inv_sqrt2).erf())).collect();
    let y = u.iter().zip(&cdf).map(|(&x, &p)| x * p).collect();
    (y, cdf)
}

/// In place: `grad <- grad * d/du gelu(u)`.
pub fn gelu_backward<T: Real>(u: &[T], cdf: &[T], grad: &mut [T]) {
    let inv_sqrt_2pi = T::c(0.398_942_280_401_432_7);
    let half = T::c(0.5);
    for ((g, &x), &p) in grad.iter_mut().zip(u).zip(cdf) {
        let pdf = inv_sqrt_2pi * (-half * x * x).exp();
        *g *= p + x * pdf;
    }
}

/// Numerically stable `log(sum(exp(row)))` in double precision.
pub fn log_sum_exp<T: Real>(row: &[T]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.f64()));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|&v| (v.f64() - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let expected = naive(&a, &b, m, k, n);
        let mut c = vec![0.0; m * n];
        matmul(1.0, View::new(&a, m, k), View::new(&b, k, n), 0.0, ViewMut::new(&mut c, m, n));
        for (x, y) in c.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }

        // (b^T a^T)^T computed through transposed views
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![0.0; m * n];
        matmul(1.0, View::new(&at, k, m).t(), View::new(&b, k, n), 0.0, ViewMut::new(&mut c2, m, n));
        for (x, y) in c2.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_head_slices() {
        // two 2-column heads packed in a 4-column matrix
        let q: Vec<f64> = (0..12).map(|i| i as f64).collect(); // 3 x 4
        let mut out = vec![0.0; 9];
        let head1 = View::strided(&q, 2, 3, 2, 4, 1);
        matmul(1.0, head1, head1.t(), 0.0, ViewMut::new(&mut out, 3, 3));
        let rows: Vec<[f64; 2]> = (0..3).map(|r| [q[r * 4 + 2], q[r * 4 + 3]]).collect();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(out[i * 3 + j], rows[i][0] * rows[j][0] + rows[i][1] * rows[j][1]);
            }
        }
    }

    #[test]
    #[should_panic]
    fn out_of_bounds_view_panics() {
        let d = [0.0f32; 5];
        let _ = View::new(&d, 2, 3);
    }

    #[test]
    fn layer_norm_normalizes() {
        let x = [1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 8.0];
        let (y, _) = layer_norm(&x, &[1.0; 4], &[0.0; 4], 4, 1e-12);
        for r in 0..2 {
            let row = &y[r * 4..r * 4 + 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gelu_values() {
        let (y, _) = gelu(&[0.0f64, 1.0, -1.0]);
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((y[2] + 0.158_655_253_931_457_05).abs() < 1e-12);
    }

    #[test]
    fn fast_erf_matches_libm() {
        let mut worst = 0.0f64;
        for i in -60_000..=60_000 {
            let x = i as f32 * 1e-4;
            worst = worst.max((erf_f32(x) as f64 - libm::erf(x as f64)).abs());
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn lse_stable() {
        assert!((log_sum_exp(&[1000.0f64, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
        assert!((log_sum_exp(&[0.0f32; 4]) - 4f64.ln()).abs() < 1e-9);
    }
}
