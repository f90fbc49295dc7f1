//! Small dense helpers shared by the spectral and manifold code.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Q factor of a thin QR decomposition, with columns signed so that the
/// diagonal of R is nonnegative. This makes the factor unique for full-rank
/// input and is the retraction used on the Stiefel manifold.
pub fn qf(a: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = a.clone().qr();
    let r = qr.r();
    let mut q = qr.q();
    for k in 0..q.ncols().min(r.nrows()) {
        if r[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    q
}

/// ‖XᵀX − I‖_F.
pub fn orthonormality_error(x: &DMatrix<f64>) -> f64 {
    let g = x.tr_mul(x);
    (g - DMatrix::identity(x.ncols(), x.ncols())).norm()
}

pub fn sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn skew(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a - a.transpose()) * 0.5
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    // Column-major fill order is part of the reproducibility contract.
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Uniformly random point on the Stiefel manifold of `rows x cols` frames.
pub fn random_frame<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    qf(&gaussian_matrix(rng, rows, cols))
}

/// Flip singular-vector pairs so that the largest-magnitude entry of every
/// left vector is positive. Ties go to the lowest index.
pub fn canonicalize_signs(left: &mut DMatrix<f64>, right: &mut DMatrix<f64>) {
    for k in 0..left.ncols() {
        let col = left.column(k);
        let mut pivot = 0.0f64;
        for &v in col.iter() {
            if v.abs() > pivot.abs() {
                pivot = v;
            }
        }
        if pivot < 0.0 {
            left.column_mut(k).neg_mut();
            right.column_mut(k).neg_mut();
        }
    }
}

/// Cosines of the principal angles between the column spans of two
/// orthonormal frames, largest first.
pub fn principal_cosines(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DVector<f64> {
    let overlap = a.tr_mul(b);
    let mut sv = overlap.singular_values();
    sort_descending(sv.as_mut_slice());
    sv
}

pub fn sort_descending(values: &mut [f64]) {
    values.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
}

/// Strided view of a matrix stored in a slice: element `(i, j)` sits at
/// `i·row_stride + j·col_stride`.
#[derive(Clone, Copy)]
pub(crate) struct Strided<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> Strided<'a> {
    pub fn col_major(m: &'a DMatrix<f64>) -> Self {
        Strided {
            data: m.as_slice(),
            rows: m.nrows(),
            cols: m.ncols(),
            row_stride: 1,
            col_stride: m.nrows(),
        }
    }

    pub fn t(self) -> Self {
        Strided {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn fits(&self) -> bool {
        self.rows == 0
            || self.cols == 0
            || (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride < self.data.len()
    }
}

/// `a · b` into a new column-major matrix, through the blocked SIMD kernel.
pub(crate) fn gemm(a: Strided<'_>, b: Strided<'_>) -> DMatrix<f64> {
    assert_eq!(a.cols, b.rows, "gemm: inner dimension");
    assert!(a.fits() && b.fits(), "gemm: strides exceed storage");
    let mut c = DMatrix::zeros(a.rows, b.cols);
    if a.rows == 0 || b.cols == 0 || a.cols == 0 {
        return c;
    }
    let rows = a.rows as isize;
    // SAFETY: both operands were checked to lie inside their slices and `c`
    // is a freshly allocated column-major a.rows × b.cols buffer.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            0.0,
            c.as_mut_slice().as_mut_ptr(),
            1,
            rows,
        );
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn strided_gemm_matches_nalgebra() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = gaussian_matrix(&mut rng, 5, 3);
        let b = gaussian_matrix(&mut rng, 4, 3);
        let c = gemm(Strided::col_major(&a), Strided::col_major(&b).t());
        assert!((c - &a * b.transpose()).norm() < 1e-14);
        let d = gemm(Strided::col_major(&a).t(), Strided::col_major(&a));
        assert!((d - a.tr_mul(&a)).norm() < 1e-14);
    }

    #[test]
    fn qf_is_orthonormal_with_positive_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian_matrix(&mut rng, 9, 4);
        let q = qf(&a);
        assert!(orthonormality_error(&q) < 1e-12);
        let r = q.tr_mul(&a);
        for k in 0..4 {
            assert!(r[(k, k)] > 0.0);
        }
        assert!((&q * r - a).norm() < 1e-10);
    }

    #[test]
    fn sign_canonicalization_keeps_the_product() {
        let mut left = DMatrix::from_row_slice(3, 1, &[0.1, -0.9, 0.2]);
        let mut right = DMatrix::from_row_slice(2, 1, &[0.6, 0.8]);
        let before = &left * right.transpose();
        canonicalize_signs(&mut left, &mut right);
        assert!(left[(1, 0)] > 0.0);
        assert_eq!(before, &left * right.transpose());
    }

    #[test]
    fn principal_cosines_of_identical_frames_are_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_frame(&mut rng, 12, 3);
        let c = principal_cosines(&x, &x);
        for v in c.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
