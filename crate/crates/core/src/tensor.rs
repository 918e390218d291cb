//! Dense row-major buffers and the handful of kernels the transformer needs.
//!
//! Everything is generic over [`Scalar`] so the same forward/backward code
//! runs in `f32` for training and in `f64` for finite-difference checks.

use std::fmt::Debug;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar: Float + FromPrimitive + ToPrimitive + AddAssign + Default + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }

    fn erf(self) -> Self;

    /// `c = alpha * a · b + beta * c` on strided matrices.
    ///
    /// # Safety
    /// Every index reachable through the dimensions and strides must lie
    /// inside the corresponding buffer; [`gemm`] checks this.
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
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }

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
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }

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
}

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    /// Dense row-major `rows × cols`.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        View { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    /// Column block `[col0, col0 + cols)` of a row-major matrix with `stride` columns.
    pub fn cols(data: &'a [T], rows: usize, stride: usize, col0: usize, cols: usize) -> Self {
        View { data, offset: col0, rows, cols, rs: stride, cs: 1 }
    }

    pub fn t(self) -> Self {
        View { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "view exceeds buffer");
        }
    }
}

/// Strided mutable matrix view.
pub struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> ViewMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        ViewMut { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn cols(data: &'a mut [T], rows: usize, stride: usize, col0: usize, cols: usize) -> Self {
        ViewMut { data, offset: col0, rows, cols, rs: stride, cs: 1 }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "view exceeds buffer");
        }
    }
}

/// `c = alpha * a · b + beta * c`.
pub fn gemm<T: Scalar>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output dimensions");
    a.check();
    b.check();
    c.check();
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: `check` bounds every reachable index, and `c` is uniquely borrowed.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        )
    }
}

/// `out = x · w + bias` for row-major `x: [rows, inp]`, `w: [inp, out]`.
pub fn linear<T: Scalar>(x: &[T], w: &[T], bias: &[T], rows: usize, inp: usize, out: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(rows * out);
    for _ in 0..rows {
        y.extend_from_slice(bias);
    }
    gemm(T::one(), View::new(x, rows, inp), View::new(w, inp, out), T::one(), ViewMut::new(&mut y, rows, out));
    y
}

/// Backward of [`linear`]: accumulates `dw += xᵀ·dy`, `db += Σ dy` and
/// returns `dx = dy · wᵀ` when requested.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    rows: usize,
    inp: usize,
    out: usize,
    dw: &mut [T],
    db: &mut [T],
    want_dx: bool,
) -> Option<Vec<T>> {
    gemm(T::one(), View::new(x, rows, inp).t(), View::new(dy, rows, out), T::one(), ViewMut::new(dw, inp, out));
    for r in 0..rows {
        for (acc, &g) in db.iter_mut().zip(&dy[r * out..(r + 1) * out]) {
            *acc += g;
        }
    }
    want_dx.then(|| {
        let mut dx = vec![T::zero(); rows * inp];
        gemm(T::one(), View::new(dy, rows, out), View::new(w, inp, out).t(), T::zero(), ViewMut::new(&mut dx, rows, inp));
        dx
    })
}

pub fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn all_finite<T: Scalar>(xs: &[T]) -> bool {
    xs.iter().all(|v| v.is_finite())
}

/// Cached statistics of one layer-norm application.
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Scalar>(x: &[T], scale: &[T], shift: &[T], rows: usize, dim: usize, eps: T) -> (Vec<T>, NormCache<T>) {
    let n = T::from_usize(dim).unwrap();
    let mut y = vec![T::zero(); rows * dim];
    let mut xhat = vec![T::zero(); rows * dim];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..dim {
            let h = (row[j] - mean) * rs;
            xhat[r * dim + j] = h;
            y[r * dim + j] = h * scale[j] + shift[j];
        }
    }
    (y, NormCache { xhat, rstd })
}

pub fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &NormCache<T>,
    scale: &[T],
    rows: usize,
    dim: usize,
    dscale: &mut [T],
    dshift: &mut [T],
) -> Vec<T> {
    let n = T::from_usize(dim).unwrap();
    let mut dx = vec![T::zero(); rows * dim];
    let mut dxhat = vec![T::zero(); dim];
    for r in 0..rows {
        let g = &dy[r * dim..(r + 1) * dim];
        let h = &cache.xhat[r * dim..(r + 1) * dim];
        let mut sum = T::zero();
        let mut dot = T::zero();
        for j in 0..dim {
            dscale[j] += g[j] * h[j];
            dshift[j] += g[j];
            dxhat[j] = g[j] * scale[j];
            sum += dxhat[j];
            dot += dxhat[j] * h[j];
        }
        let mean = sum / n;
        let mean_dot = dot / n;
        for j in 0..dim {
            dx[r * dim + j] = cache.rstd[r] * (dxhat[j] - mean - h[j] * mean_dot);
        }
    }
    dx
}

/// Exact (erf-based) GELU.
pub fn gelu<T: Scalar>(u: T) -> T {
    let half = T::of(0.5);
    half * u * (T::one() + (u * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad<T: Scalar>(u: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (u * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(u * u) * T::of(0.5)).exp() * T::of(0.398_942_280_401_432_7);
    cdf + u * pdf
}

/// In-place row softmax.
pub fn softmax_rows<T: Scalar>(x: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
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
    fn gemm_matches_naive_including_transposes() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect(); // 3x4
        let b: Vec<f64> = (0..20).map(|i| (i % 7) as f64 - 3.0).collect(); // 4x5
        let expect = naive(&a, &b, 3, 4, 5);
        let mut c = vec![0.0; 15];
        gemm(1.0, View::new(&a, 3, 4), View::new(&b, 4, 5), 0.0, ViewMut::new(&mut c, 3, 5));
        assert_eq!(c, expect);

        // aᵀ stored as 4x3, viewed transposed.
        let at: Vec<f64> = (0..12).map(|i| a[(i % 3) * 4 + i / 3]).collect();
        let mut c2 = vec![0.0; 15];
        gemm(1.0, View::new(&at, 4, 3).t(), View::new(&b, 4, 5), 0.0, ViewMut::new(&mut c2, 3, 5));
        assert_eq!(c2, expect);
    }

    #[test]
    #[should_panic(expected = "view exceeds buffer")]
    fn gemm_rejects_out_of_bounds_views() {
        let a = vec![0.0f32; 5];
        let mut c = vec![0.0f32; 4];
        gemm(1.0, View::new(&a, 2, 3), View::new(&a, 3, 2), 0.0, ViewMut::new(&mut c, 2, 2));
    }

    #[test]
    fn gelu_gradient_matches_difference() {
        for &u in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8, "{u}");
        }
        assert!((gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = vec![1.0f64, 2.0, 3.0, -1000.0, 0.0, 1000.0];
        softmax_rows(&mut x, 2, 3);
        assert!((x[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((x[5] - 1.0).abs() < 1e-12);
    }
}
