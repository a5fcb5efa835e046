//! Small dense complex matrix helpers on top of `nalgebra`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex64;

use crate::diffnum::TensorC;
use crate::{Error, Result};

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn to_mat(t: &TensorC) -> Result<CMat> {
    match t.shape() {
        [r, cols] => Ok(CMat::from_row_slice(*r, *cols, t.data())),
        s => Err(Error::shape(format!("expected a matrix, got {s:?}"))),
    }
}

pub fn from_mat(m: &CMat) -> TensorC {
    let (r, cols) = m.shape();
    let mut data = Vec::with_capacity(r * cols);
    for i in 0..r {
        for j in 0..cols {
            data.push(m[(i, j)]);
        }
    }
    TensorC::new(vec![r, cols], data).expect("matrix shape")
}

/// Cholesky factor of a Hermitian positive-definite matrix.
pub fn chol(m: &CMat) -> Result<Cholesky<Complex64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::Numeric("matrix is not positive definite".into()))
}

/// Natural log-determinant of a Hermitian positive-definite matrix.
pub fn ln_det_hpd(m: &CMat) -> Result<f64> {
    let l = chol(m)?;
    Ok(2.0 * l.l_dirty().diagonal().iter().map(|d| d.re.ln()).sum::<f64>())
}

pub fn inverse_hpd(m: &CMat) -> Result<CMat> {
    Ok(chol(m)?.inverse())
}

/// Unit-norm dominant right singular vector of `m` (zero vector for a zero matrix).
pub fn dominant_right_singular(m: &CMat) -> CVec {
    let n = m.ncols();
    if m.iter().all(|z| z.norm_sqr() == 0.0) {
        return CVec::zeros(n);
    }
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.expect("requested v_t");
    let (best, _) =
        svd.singular_values.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, s)| if *s > acc.1 { (i, *s) } else { acc },
        );
    let row = vt.row(best);
    CVec::from_iterator(n, row.iter().map(|z| z.conj()))
}

/// Singular values in descending order.
pub fn singular_values(m: &CMat) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_det_of_diagonal() {
        let m = CMat::from_diagonal(&CVec::from_vec(vec![c(2.0, 0.0), c(3.0, 0.0)]));
        assert!((ln_det_hpd(&m).unwrap() - 6f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn dominant_direction_of_rank_one() {
        let u = CVec::from_vec(vec![c(1.0, 0.0), c(0.0, 1.0)]);
        let v = CVec::from_vec(vec![c(0.6, 0.0), c(0.0, 0.8), c(0.0, 0.0)]);
        let m = &u * v.adjoint();
        let d = dominant_right_singular(&m);
        let overlap = (v.adjoint() * &d)[(0, 0)].norm();
        assert!((overlap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tensor_matrix_round_trip() {
        let t = TensorC::new(vec![2, 3], (0..6).map(|k| c(k as f64, -(k as f64))).collect()).unwrap();
        assert_eq!(from_mat(&to_mat(&t).unwrap()), t);
    }
}
