//! Ordinary least squares with an intercept column, solved through an
//! SVD pseudo-inverse.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative singular-value cutoff for the pseudo-inverse.
pub const PINV_RTOL: f64 = 1e-10;

/// Result of regressing `Zt` on `[Zr, 1]`.
#[derive(Clone, Debug)]
pub struct LeastSquaresFit {
    pub ss_res: f64,
    pub ss_total: f64,
    /// `Zt − H·Zt`, shape N×Q.
    pub residual: Tensor,
    /// Minimum-norm coefficients `[Zr, 1]⁺·Zt`, shape (P+1)×Q. Last row is the intercept.
    pub coef: Tensor,
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    Tensor::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Regresses `zt` (N×Q) on `zr` (N×P) with an appended intercept column.
///
/// `ss_total` is the uncentered `‖Zt‖²`; the intercept only enters the
/// residual.
pub fn least_squares(zr: &Tensor, zt: &Tensor) -> Result<LeastSquaresFit> {
    if zr.shape().len() != 2 || zt.shape().len() != 2 || zr.rows() != zt.rows() {
        return Err(Error::shape(
            "least_squares",
            format!("regressor {:?} vs target {:?}", zr.shape(), zt.shape()),
        ));
    }
    let (n, p) = (zr.rows(), zr.cols());
    if n <= p + 1 {
        return Err(Error::Underdetermined {
            rows: n,
            cols: p + 1,
        });
    }
    let a = DMatrix::from_fn(
        n,
        p + 1,
        |i, j| if j < p { zr.data()[i * p + j] } else { 1.0 },
    );
    let y = to_matrix(zt);

    let svd = a.svd(true, true);
    let u = svd.u.as_ref().expect("svd computed with u");
    let vt = svd.v_t.as_ref().expect("svd computed with v_t");
    let smax = svd.singular_values.max();
    let cutoff = smax * PINV_RTOL;

    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > cutoff)
        .collect();
    let ur = u.select_columns(&keep);
    let vr = vt.select_rows(&keep).transpose();
    let inv_s = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        keep.len(),
        keep.iter().map(|&i| 1.0 / svd.singular_values[i]),
    ));

    let proj = ur.transpose() * &y;
    let fitted = &ur * &proj;
    let residual = &y - fitted;
    let coef = vr * inv_s * proj;

    let ss_res = residual.norm_squared();
    let ss_total = y.norm_squared();
    if !ss_res.is_finite() || !ss_total.is_finite() {
        return Err(Error::NonFinite("least_squares"));
    }
    Ok(LeastSquaresFit {
        ss_res,
        ss_total,
        residual: from_matrix(&residual),
        coef: from_matrix(&coef),
    })
}
