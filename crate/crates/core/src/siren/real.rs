//! Scalar abstraction so the same network code runs in f32 (training) and
//! f64 (gradient verification).

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Strided matrix view handed to [`Real::gemm`]: element `(i, j)` lives at
/// `data[i * row_stride + j * col_stride]`.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major `rows × cols`.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, row_stride: cols, col_stride: 1 }
    }

    /// Transposed view of a row-major `cols × rows` buffer.
    pub fn transposed(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, row_stride: 1, col_stride: rows }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
            assert!(last < self.data.len(), "matrix view exceeds its buffer");
        }
    }
}

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `c ← alpha·a·b + beta·c` with `c` row-major `a.rows × b.cols`.
    fn gemm(alpha: Self, a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: &mut [Self]);

    /// `sin(omega·z)` and `cos(omega·z)` elementwise.
    fn sin_cos_scaled(z: &mut [Self], omega: Self, cos_out: &mut [Self]);

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite value")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("finite value")
    }
}

fn check_gemm<T>(a: &MatRef<'_, T>, b: &MatRef<'_, T>, c: &[T]) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert!(c.len() >= a.rows * b.cols, "output buffer too small");
    a.check();
    b.check();
}

impl Real for f32 {
    fn gemm(alpha: f32, a: MatRef<'_, f32>, b: MatRef<'_, f32>, beta: f32, c: &mut [f32]) {
        check_gemm(&a, &b, c);
        // SAFETY: the views were bounds-checked above and `c` holds
        // `a.rows × b.cols` row-major elements.
        unsafe {
            matrixmultiply::sgemm(
                a.rows,
                a.cols,
                b.cols,
                alpha,
                a.data.as_ptr(),
                a.row_stride as isize,
                a.col_stride as isize,
                b.data.as_ptr(),
                b.row_stride as isize,
                b.col_stride as isize,
                beta,
                c.as_mut_ptr(),
                b.cols as isize,
                1,
            );
        }
    }

    fn sin_cos_scaled(z: &mut [f32], omega: f32, cos_out: &mut [f32]) {
        fast_sin_cos_f32(z, omega, cos_out);
    }
}

impl Real for f64 {
    fn gemm(alpha: f64, a: MatRef<'_, f64>, b: MatRef<'_, f64>, beta: f64, c: &mut [f64]) {
        check_gemm(&a, &b, c);
        // SAFETY: as for f32.
        unsafe {
            matrixmultiply::dgemm(
                a.rows,
                a.cols,
                b.cols,
                alpha,
                a.data.as_ptr(),
                a.row_stride as isize,
                a.col_stride as isize,
                b.data.as_ptr(),
                b.row_stride as isize,
                b.col_stride as isize,
                beta,
                c.as_mut_ptr(),
                b.cols as isize,
                1,
            );
        }
    }

    fn sin_cos_scaled(z: &mut [f64], omega: f64, cos_out: &mut [f64]) {
        for (s, c) in z.iter_mut().zip(cos_out.iter_mut()) {
            let (sv, cv) = (omega * *s).sin_cos();
            *s = sv;
            *c = cv;
        }
    }
}

// Quadrant reduction with a three-part split of pi/2 and minimax
// polynomials on [-pi/4, pi/4]. Accurate to a few ulp for |x| < 1e4. The
// scalar and vector paths perform the same fused operations in the same
// order, so results do not depend on where a buffer splits.
const FRAC_2_PI: f32 = std::f32::consts::FRAC_2_PI;
const PIO2_1: f32 = 1.570_312_5;
const PIO2_2: f32 = 4.837_513e-4;
const PIO2_3: f32 = 7.549_79e-8;
const S1: f32 = -1.666_665_5e-1;
const S2: f32 = 8.332_161e-3;
const S3: f32 = -1.951_529_6e-4;
const C1: f32 = 4.166_664_6e-2;
const C2: f32 = -1.388_731_6e-3;
const C3: f32 = 2.443_315_7e-5;

#[inline(always)]
fn sin_cos_scalar(x: f32) -> (f32, f32) {
    let qf = (x * FRAC_2_PI).round_ties_even();
    let q = qf as i32;
    let r = (-qf).mul_add(PIO2_1, x);
    let r = (-qf).mul_add(PIO2_2, r);
    let r = (-qf).mul_add(PIO2_3, r);
    let r2 = r * r;
    let sp = r2.mul_add(S3, S2);
    let sp = r2.mul_add(sp, S1);
    let s = (r * r2).mul_add(sp, r);
    let cp = r2.mul_add(C3, C2);
    let cp = r2.mul_add(cp, C1);
    let c = (r2 * r2).mul_add(cp, (-0.5f32).mul_add(r2, 1.0));
    let (sv, cv) = if q & 1 != 0 { (c, s) } else { (s, c) };
    let sin_flip = ((q & 2) as u32) << 30;
    let cos_flip = (((q + 1) & 2) as u32) << 30;
    (f32::from_bits(sv.to_bits() ^ sin_flip), f32::from_bits(cv.to_bits() ^ cos_flip))
}

#[inline(always)]
fn sin_cos_loop(z: &mut [f32], omega: f32, cos_out: &mut [f32]) {
    for (s, c) in z.iter_mut().zip(cos_out.iter_mut()) {
        let (sv, cv) = sin_cos_scalar(omega * *s);
        *s = sv;
        *c = cv;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn sin_cos_avx2(z: &mut [f32], omega: f32, cos_out: &mut [f32]) {
    use std::arch::x86_64::*;
    let n = z.len();
    let body = n - n % 8;
    let zp = z.as_mut_ptr();
    let cp_out = cos_out.as_mut_ptr();
    let v_omega = _mm256_set1_ps(omega);
    let v_2pi = _mm256_set1_ps(FRAC_2_PI);
    let splat = |v: f32| _mm256_set1_ps(v);
    let (p1, p2, p3) = (splat(PIO2_1), splat(PIO2_2), splat(PIO2_3));
    let (s1, s2, s3) = (splat(S1), splat(S2), splat(S3));
    let (c1, c2, c3) = (splat(C1), splat(C2), splat(C3));
    let half = _mm256_set1_ps(0.5);
    let one_f = _mm256_set1_ps(1.0);
    let one = _mm256_set1_epi32(1);
    let two = _mm256_set1_epi32(2);
    let mut i = 0;
    while i < body {
        let x = _mm256_mul_ps(_mm256_loadu_ps(zp.add(i)), v_omega);
        let qf = _mm256_round_ps::<{ _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC }>(_mm256_mul_ps(x, v_2pi));
        let q = _mm256_cvtps_epi32(qf);
        let r = _mm256_fnmadd_ps(qf, p1, x);
        let r = _mm256_fnmadd_ps(qf, p2, r);
        let r = _mm256_fnmadd_ps(qf, p3, r);
        let r2 = _mm256_mul_ps(r, r);
        let sp = _mm256_fmadd_ps(r2, s3, s2);
        let sp = _mm256_fmadd_ps(r2, sp, s1);
        let s = _mm256_fmadd_ps(_mm256_mul_ps(r, r2), sp, r);
        let cp = _mm256_fmadd_ps(r2, c3, c2);
        let cp = _mm256_fmadd_ps(r2, cp, c1);
        let c = _mm256_fmadd_ps(_mm256_mul_ps(r2, r2), cp, _mm256_fnmadd_ps(half, r2, one_f));
        let swap = _mm256_castsi256_ps(_mm256_cmpeq_epi32(_mm256_and_si256(q, one), one));
        let sv = _mm256_blendv_ps(s, c, swap);
        let cv = _mm256_blendv_ps(c, s, swap);
        let sin_flip = _mm256_castsi256_ps(_mm256_slli_epi32::<30>(_mm256_and_si256(q, two)));
        let cos_flip = _mm256_castsi256_ps(_mm256_slli_epi32::<30>(_mm256_and_si256(_mm256_add_epi32(q, one), two)));
        _mm256_storeu_ps(zp.add(i), _mm256_xor_ps(sv, sin_flip));
        _mm256_storeu_ps(cp_out.add(i), _mm256_xor_ps(cv, cos_flip));
        i += 8;
    }
    sin_cos_loop(&mut z[body..], omega, &mut cos_out[body..]);
}

fn fast_sin_cos_f32(z: &mut [f32], omega: f32, cos_out: &mut [f32]) {
    assert_eq!(z.len(), cos_out.len());
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
        // SAFETY: features detected at runtime; lengths checked above.
        return unsafe { sin_cos_avx2(z, omega, cos_out) };
    }
    sin_cos_loop(z, omega, cos_out)
}
