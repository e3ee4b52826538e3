//! Dense helpers shared by the estimator and the analysis code.
//!
//! Weight matrices are never inverted explicitly: every product with `Q⁻¹` goes
//! through the Cholesky factor `Q = L Lᵀ`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::{Error, Result};

/// Relative tolerance for the symmetry test on weight matrices.
const SYMMETRY_TOL: f64 = 1e-10;

pub(crate) fn check_finite_matrix(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{what} contains non-finite entries")))
    }
}

pub(crate) fn check_finite_vector(v: &DVector<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{what} contains non-finite entries")))
    }
}

/// Cholesky factorization of a symmetric positive-definite matrix.
pub fn spd_cholesky(q: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if !q.is_square() {
        return Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            q.nrows(),
            q.ncols()
        )));
    }
    check_finite_matrix(q, what)?;
    let scale = q.amax().max(f64::MIN_POSITIVE);
    let n = q.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (q[(i, j)] - q[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::NotPositiveDefinite(format!("{what} (asymmetric)")));
            }
        }
    }
    q.clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

/// `J = AᵀQ⁻¹A` together with `AᵀQ⁻¹`, both formed through the Cholesky factor of `Q`.
#[derive(Debug, Clone)]
pub struct WeightedModel {
    /// `AᵀQ⁻¹A`, N × N, exactly symmetric.
    pub info: DMatrix<f64>,
    /// `AᵀQ⁻¹`, N × M.
    pub weighted_t: DMatrix<f64>,
}

impl WeightedModel {
    pub fn new(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<Self> {
        let (m, n) = a.shape();
        if q.shape() != (m, m) {
            return Err(Error::Dimension(format!(
                "Q must be {m}x{m} to match A ({m}x{n}), got {}x{}",
                q.nrows(),
                q.ncols()
            )));
        }
        if m == 0 {
            return Ok(Self {
                info: DMatrix::zeros(n, n),
                weighted_t: DMatrix::zeros(n, 0),
            });
        }
        let chol = spd_cholesky(q, "Q")?;
        let l = chol.l();
        // W = L⁻¹A, so J = WᵀW and AᵀQ⁻¹ = (L⁻ᵀW)ᵀ.
        let w = l
            .solve_lower_triangular(a)
            .ok_or_else(|| Error::NotPositiveDefinite("Q".into()))?;
        let mut info = w.tr_mul(&w);
        symmetrize(&mut info);
        let q_inv_a = l
            .tr_solve_lower_triangular(&w)
            .ok_or_else(|| Error::NotPositiveDefinite("Q".into()))?;
        Ok(Self {
            info,
            weighted_t: q_inv_a.transpose(),
        })
    }
}

/// Replaces `m` by `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Largest singular value; zero for empty matrices.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Number of singular values above `rel_tol` times the largest one.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.singular_values();
    let top = sv.max();
    if top <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

/// Orthonormal basis of `ker A`, one vector per column (N × K).
///
/// The row space is read off a thin SVD; the kernel is the unit eigenspace of
/// the complementary projector `I − V Vᵀ`.
pub fn kernel_basis(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = a.ncols();
    if a.nrows() == 0 || a.amax() == 0.0 {
        return DMatrix::identity(n, n);
    }
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let top = svd.singular_values.max();
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > rel_tol * top)
        .map(|(i, _)| i)
        .collect();
    let rank = keep.len();
    if rank == n {
        return DMatrix::zeros(n, 0);
    }
    let mut proj = DMatrix::<f64>::identity(n, n);
    for &i in &keep {
        let row = v_t.row(i).transpose();
        proj -= &row * row.transpose();
    }
    symmetrize(&mut proj);
    let eig = proj.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let cols: Vec<DVector<f64>> = order[..n - rank]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();
    DMatrix::from_columns(&cols)
}

/// Vertically stacks matrices that share a column count.
pub fn vstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let ncols = blocks.first().map_or(0, |b| b.ncols());
    let nrows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(nrows, ncols);
    let mut row = 0;
    for b in blocks {
        out.view_mut((row, 0), b.shape()).copy_from(*b);
        row += b.nrows();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_model_matches_explicit_inverse() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.5, -1.0, 0.0, 3.0]);
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let w = WeightedModel::new(&a, &q).unwrap();
        let q_inv = q.clone().try_inverse().unwrap();
        let expected = a.transpose() * &q_inv * &a;
        assert!((&w.info - &expected).amax() < 1e-12);
        assert!((&w.weighted_t - a.transpose() * q_inv).amax() < 1e-12);
    }

    #[test]
    fn rejects_indefinite_and_asymmetric_weights() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let neg = DMatrix::from_element(1, 1, -1.0);
        assert!(matches!(
            WeightedModel::new(&a, &neg),
            Err(Error::NotPositiveDefinite(_))
        ));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 1.0]);
        assert!(spd_cholesky(&asym, "Q").is_err());
    }

    #[test]
    fn kernel_of_row_vector() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let k = kernel_basis(&a, 1e-10);
        assert_eq!(k.shape(), (2, 1));
        assert!(k[(0, 0)].abs() < 1e-12);
        assert!((k[(1, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_of_identity_is_empty() {
        let k = kernel_basis(&DMatrix::identity(4, 4), 1e-10);
        assert_eq!(k.ncols(), 0);
    }

    #[test]
    fn vstack_preserves_rows() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let b = DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 5.0, 6.0]);
        let s = vstack(&[&a, &b]);
        assert_eq!(s, DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    }
}
