//! Scalar abstraction and the dense kernels shared by the featurizer, the
//! fusion layers and the velocity network. Matrices are row-major slices.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point type the model runs in (`f32` for training, `f64` for
/// gradient checks).
pub trait Real: Float + Debug + Default + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

pub fn cast<R: Real>(v: &[f64]) -> Vec<R> {
    v.iter().map(|x| R::of(*x)).collect()
}

/// `out (n x m) += a (n x k) * b (k x m)`.
pub fn mm_acc<R: Real>(a: &[R], b: &[R], n: usize, k: usize, m: usize, out: &mut [R]) {
    debug_assert!(a.len() >= n * k && b.len() >= k * m && out.len() >= n * m);
    for i in 0..n {
        let o = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == R::zero() {
                continue;
            }
            let br = &b[p * m..(p + 1) * m];
            for (ov, bv) in o.iter_mut().zip(br) {
                *ov += av * *bv;
            }
        }
    }
}

/// `da (n x k) += dout (n x m) * b^T` where `b` is `k x m`.
pub fn mm_bt_acc<R: Real>(dout: &[R], b: &[R], n: usize, m: usize, k: usize, da: &mut [R]) {
    for i in 0..n {
        let d = &dout[i * m..(i + 1) * m];
        for p in 0..k {
            let br = &b[p * m..(p + 1) * m];
            let mut s = R::zero();
            for (dv, bv) in d.iter().zip(br) {
                s += *dv * *bv;
            }
            da[i * k + p] += s;
        }
    }
}

/// `db (k x m) += a^T * dout` where `a` is `n x k` and `dout` is `n x m`.
pub fn mm_at_acc<R: Real>(a: &[R], dout: &[R], n: usize, k: usize, m: usize, db: &mut [R]) {
    for i in 0..n {
        let d = &dout[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == R::zero() {
                continue;
            }
            let o = &mut db[p * m..(p + 1) * m];
            for (ov, dv) in o.iter_mut().zip(d) {
                *ov += av * *dv;
            }
        }
    }
}

/// Sum over rows of an `n x m` matrix into `out (m)`.
pub fn col_sum_acc<R: Real>(a: &[R], n: usize, m: usize, out: &mut [R]) {
    for i in 0..n {
        for (o, v) in out.iter_mut().zip(&a[i * m..(i + 1) * m]) {
            *o += *v;
        }
    }
}

/// Row-wise standardization without affine terms. Writes the normalized rows
/// into `out` and returns each row's reciprocal standard deviation.
pub fn row_normalize<R: Real>(x: &[R], n: usize, m: usize, eps: R, out: &mut [R]) -> Vec<R> {
    let inv_m = R::one() / R::of(m as f64);
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let row = &x[i * m..(i + 1) * m];
        let mu = row.iter().copied().sum::<R>() * inv_m;
        let var = row.iter().map(|v| (*v - mu) * (*v - mu)).sum::<R>() * inv_m;
        let r = R::one() / (var + eps).sqrt();
        for (o, v) in out[i * m..(i + 1) * m].iter_mut().zip(row) {
            *o = (*v - mu) * r;
        }
        rstd.push(r);
    }
    rstd
}

/// Backward of [`row_normalize`]: accumulates `dx` from the gradient with
/// respect to the normalized rows `xhat`.
pub fn row_normalize_backward<R: Real>(dxhat: &[R], xhat: &[R], rstd: &[R], n: usize, m: usize, dx: &mut [R]) {
    let inv_m = R::one() / R::of(m as f64);
    for i in 0..n {
        let d = &dxhat[i * m..(i + 1) * m];
        let xh = &xhat[i * m..(i + 1) * m];
        let md = d.iter().copied().sum::<R>() * inv_m;
        let mdx = d.iter().zip(xh).map(|(a, b)| *a * *b).sum::<R>() * inv_m;
        for ((o, dv), xv) in dx[i * m..(i + 1) * m].iter_mut().zip(d).zip(xh) {
            *o += rstd[i] * (*dv - md - *xv * mdx);
        }
    }
}
