//! Structured symmetric matrices and robust SPD solves.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{shape, Error, Result};

/// Symmetric d×d matrix, either dense or `shift * I + U diag(w) U^T`.
/// The low-rank form keeps mixture Hessians cheap when d is large.
#[derive(Debug, Clone, PartialEq)]
pub enum SymMatrix {
    Dense(DMatrix<f64>),
    LowRank { shift: f64, factors: Arc<DMatrix<f64>>, weights: DVector<f64> },
}

impl SymMatrix {
    pub fn scaled_identity(dim: usize, c: f64) -> Self {
        SymMatrix::LowRank { shift: c, factors: Arc::new(DMatrix::zeros(dim, 0)), weights: DVector::zeros(0) }
    }

    pub fn dim(&self) -> usize {
        match self {
            SymMatrix::Dense(m) => m.nrows(),
            SymMatrix::LowRank { factors, .. } => factors.nrows(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            SymMatrix::Dense(m) => m.clone(),
            SymMatrix::LowRank { shift, factors, weights } => {
                let mut scaled = factors.as_ref().clone();
                for (mut col, w) in scaled.column_iter_mut().zip(weights.iter()) {
                    col *= *w;
                }
                let mut out = &scaled * factors.transpose();
                for i in 0..out.nrows() {
                    out[(i, i)] += shift;
                }
                out
            }
        }
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            SymMatrix::Dense(m) => m * x,
            SymMatrix::LowRank { shift, factors, weights } => {
                let mut proj = factors.tr_mul(x);
                proj.component_mul_assign(weights);
                let mut out = x * *shift;
                out.gemv(1.0, factors.as_ref(), &proj, 1.0);
                out
            }
        }
    }

    pub fn mul_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SymMatrix::Dense(m) => m * x,
            SymMatrix::LowRank { shift, factors, weights } => {
                let mut proj = factors.tr_mul(x);
                for (i, w) in weights.iter().enumerate() {
                    proj.row_mut(i).scale_mut(*w);
                }
                let mut out = x * *shift;
                out.gemm(1.0, factors.as_ref(), &proj, 1.0);
                out
            }
        }
    }

    pub fn diagonal(&self) -> DVector<f64> {
        match self {
            SymMatrix::Dense(m) => m.diagonal(),
            SymMatrix::LowRank { shift, factors, weights } => {
                let mut d = DVector::from_element(factors.nrows(), *shift);
                for (col, w) in factors.column_iter().zip(weights.iter()) {
                    for (di, u) in d.iter_mut().zip(col.iter()) {
                        *di += w * u * u;
                    }
                }
                d
            }
        }
    }

    /// `a * I + b * self`.
    pub fn affine(&self, a: f64, b: f64) -> SymMatrix {
        match self {
            SymMatrix::Dense(m) => {
                let mut out = m * b;
                for i in 0..out.nrows() {
                    out[(i, i)] += a;
                }
                SymMatrix::Dense(out)
            }
            SymMatrix::LowRank { shift, factors, weights } => SymMatrix::LowRank {
                shift: a + b * shift,
                factors: factors.clone(),
                weights: weights * b,
            },
        }
    }

    pub fn scale(&self, b: f64) -> SymMatrix {
        self.affine(0.0, b)
    }

    /// Replace a dense matrix by `(M + M^T)/2`. Low-rank forms are symmetric already.
    pub fn symmetrized(self) -> SymMatrix {
        match self {
            SymMatrix::Dense(m) => SymMatrix::Dense(symmetrize(&m)),
            other => other,
        }
    }

    /// `H M H^T`, symmetrized.
    pub fn sandwich(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let out = match self {
            SymMatrix::Dense(m) => h * m * h.transpose(),
            SymMatrix::LowRank { shift, factors, weights } => {
                let hu = h * factors.as_ref();
                let mut scaled = hu.clone();
                for (mut col, w) in scaled.column_iter_mut().zip(weights.iter()) {
                    col *= *w;
                }
                let mut out = h * h.transpose() * *shift;
                out.gemm(1.0, &scaled, &hu.transpose(), 1.0);
                out
            }
        };
        symmetrize(&out)
    }

    pub fn is_finite(&self) -> bool {
        match self {
            SymMatrix::Dense(m) => m.iter().all(|x| x.is_finite()),
            SymMatrix::LowRank { shift, factors, weights } => {
                shift.is_finite() && factors.iter().all(|x| x.is_finite()) && weights.iter().all(|x| x.is_finite())
            }
        }
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// How a system matrix had to be repaired before it could be factored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub enum Fallback {
    #[default]
    None,
    /// Cholesky succeeded after adding `RIDGE * I`.
    Ridge,
    /// The data block was projected onto the PSD cone by eigenvalue clamping.
    EigenClamp,
}

pub const RIDGE: f64 = 1e-10;

enum Factor {
    Chol(Cholesky<f64, Dyn>),
    Eigen { vectors: DMatrix<f64>, inv_values: DVector<f64> },
}

/// Factorisation of `S + noise_var * I` with S symmetric (nominally PSD).
pub struct SpdSystem {
    factor: Factor,
    pub fallback: Fallback,
}

impl SpdSystem {
    pub fn new(data_block: &DMatrix<f64>, noise_var: f64) -> Result<Self> {
        if !data_block.is_square() {
            return Err(shape("system matrix must be square"));
        }
        if !data_block.iter().all(|x| x.is_finite()) || !noise_var.is_finite() {
            return Err(Error::Linalg("non-finite entries in system matrix".into()));
        }
        let n = data_block.nrows();
        let mut k = symmetrize(data_block);
        for i in 0..n {
            k[(i, i)] += noise_var;
        }
        if let Some(c) = Cholesky::new(k.clone()) {
            return Ok(Self { factor: Factor::Chol(c), fallback: Fallback::None });
        }
        let mut ridged = k;
        for i in 0..n {
            ridged[(i, i)] += RIDGE;
        }
        if let Some(c) = Cholesky::new(ridged) {
            return Ok(Self { factor: Factor::Chol(c), fallback: Fallback::Ridge });
        }
        let eig = SymmetricEigen::new(symmetrize(data_block));
        let inv_values = eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + noise_var + RIDGE));
        if !inv_values.iter().all(|x| x.is_finite()) {
            return Err(Error::Linalg("system matrix is singular".into()));
        }
        Ok(Self { factor: Factor::Eigen { vectors: eig.eigenvectors, inv_values }, fallback: Fallback::EigenClamp })
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            Factor::Chol(c) => c.solve(b),
            Factor::Eigen { vectors, inv_values } => {
                let mut p = vectors.tr_mul(b);
                p.component_mul_assign(inv_values);
                vectors * p
            }
        }
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.factor {
            Factor::Chol(c) => c.solve(b),
            Factor::Eigen { vectors, inv_values } => {
                let mut p = vectors.tr_mul(b);
                for (i, s) in inv_values.iter().enumerate() {
                    p.row_mut(i).scale_mut(*s);
                }
                vectors * p
            }
        }
    }
}

/// Eigendecomposition of a symmetric matrix with eigenvalues clamped at zero.
pub fn psd_eigen(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let values = eig.eigenvalues.map(|l| l.max(0.0));
    (eig.eigenvectors, values)
}

/// `Q diag(f(lambda)) Q^T` for symmetric `m`, eigenvalues clamped at zero first.
pub fn psd_apply(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let (q, values) = psd_eigen(m);
    eigen_compose(&q, &values.map(f))
}

pub fn eigen_compose(q: &DMatrix<f64>, values: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = q.clone();
    for (mut col, l) in scaled.column_iter_mut().zip(values.iter()) {
        col *= *l;
    }
    symmetrize(&(scaled * q.transpose()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn low_rank() -> SymMatrix {
        let factors = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -2.0, 1.0, 0.3, 0.0]);
        SymMatrix::LowRank { shift: -0.7, factors: Arc::new(factors), weights: DVector::from_vec(vec![0.2, 1.5]) }
    }

    #[test]
    fn low_rank_ops_match_dense() {
        let s = low_rank();
        let d = s.to_dense();
        let x = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        assert!((s.mul_vec(&x) - &d * &x).norm() < 1e-14);
        let xm = DMatrix::from_fn(3, 2, |i, j| (i as f64) - 0.5 * j as f64);
        assert!((s.mul_mat(&xm) - &d * &xm).norm() < 1e-14);
        assert!((s.diagonal() - d.diagonal()).norm() < 1e-14);
        let h = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, -1.0, 1.0, 0.5]);
        assert!((s.sandwich(&h) - &h * &d * h.transpose()).norm() < 1e-13);
        let a = s.affine(2.0, -3.0).to_dense();
        assert!((a - (DMatrix::identity(3, 3) * 2.0 - &d * 3.0)).norm() < 1e-13);
    }

    #[test]
    fn spd_solve_paths() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let sys = SpdSystem::new(&s, 0.1).unwrap();
        assert_eq!(sys.fallback, Fallback::None);
        let b = DVector::from_vec(vec![1.0, -1.0]);
        let mut k = s.clone();
        k[(0, 0)] += 0.1;
        k[(1, 1)] += 0.1;
        assert!((&k * sys.solve_vec(&b) - &b).norm() < 1e-12);

        // strongly indefinite block: only the eigen clamp can factor it
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -5.0]);
        let sys = SpdSystem::new(&bad, 0.01).unwrap();
        assert_eq!(sys.fallback, Fallback::EigenClamp);
        let x = sys.solve_vec(&b);
        assert!((x[0] - 1.0 / 1.01).abs() < 1e-8 && (x[1] + 1.0 / 0.01).abs() < 1e-4);

        // tiny negative round-off: ridge suffices
        let nearly = DMatrix::from_row_slice(1, 1, &[-1e-11]);
        let sys = SpdSystem::new(&nearly, 0.0).unwrap();
        assert_eq!(sys.fallback, Fallback::Ridge);

        assert!(SpdSystem::new(&DMatrix::from_element(1, 1, f64::NAN), 1.0).is_err());
    }
}
