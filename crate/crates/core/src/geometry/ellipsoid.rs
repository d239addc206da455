use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Region `{x : ‖A x + b‖₂ ≤ 1}` with `A` symmetric positive definite, and its
/// moments `Sigma = (AᵀA)⁻¹`, `mu = -Sigma Aᵀ b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    dim: usize,
    a: DMatrix<f64>,
    b: DVector<f64>,
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    // row-major copy of A for the cost hot path
    a_rows: Vec<f64>,
    mu_vec: Vec<f64>,
}

/// JSON form: `A` row-major plus `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidJson {
    pub dim: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

const SYMMETRY_TOL: f64 = 1e-9;

impl Ellipsoid {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.len() != n || n == 0 {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: b.len(),
            });
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ellipsoid parameters"));
        }
        let scale = a.amax().max(1.0);
        if (&a - a.transpose()).amax() > SYMMETRY_TOL * scale {
            return Err(Error::InvalidConfig("ellipsoid matrix A must be symmetric".into()));
        }
        let a = (&a + a.transpose()) * 0.5;
        let eig = SymmetricEigen::new(a.clone());
        if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err(Error::NotPositiveDefinite("ellipsoid matrix A"));
        }
        let precision = a.transpose() * &a;
        let chol = precision
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("AᵀA"))?;
        let sigma = chol.inverse();
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        let mu = -(&sigma * a.transpose()) * &b;
        let a_rows = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| a[(i, j)]).collect();
        let mu_vec = mu.iter().copied().collect();
        Ok(Self {
            dim: n,
            a,
            b,
            mu,
            sigma,
            a_rows,
            mu_vec,
        })
    }

    /// Ellipsoid `{x : (x - c)ᵀ E (x - c) ≤ 1}` for SPD shape matrix `E`.
    pub fn from_center_shape(center: &DVector<f64>, shape: &DMatrix<f64>) -> Result<Self> {
        let a = spd_sqrt(shape)?;
        let b = -(&a * center);
        Self::new(a, b)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// `sqrt((u - mu)ᵀ Sigma⁻¹ (u - mu))`, evaluated as `‖A (u - mu)‖`.
    pub fn mahalanobis(&self, u: &[f64]) -> f64 {
        debug_assert_eq!(u.len(), self.dim);
        let n = self.dim;
        let mut sq = 0.0;
        for i in 0..n {
            let row = &self.a_rows[i * n..(i + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += row[j] * (u[j] - self.mu_vec[j]);
            }
            sq += s * s;
        }
        sq.sqrt()
    }

    /// `‖A u + b‖`, the constraint value of the defining program.
    pub fn constraint_norm(&self, u: &[f64]) -> f64 {
        (&self.a * DVector::from_column_slice(u) + &self.b).norm()
    }

    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        self.constraint_norm(u) <= 1.0 + tol
    }

    /// The same ellipsoid with every semi-axis multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let a = &self.a / factor;
        let b = -(&a * &self.mu);
        Self::new(a, b)
    }

    /// `ln det A⁻¹`, the objective of the minimum-volume program.
    pub fn log_det_inv_a(&self) -> f64 {
        -SymmetricEigen::new(self.a.clone())
            .eigenvalues
            .iter()
            .map(|l| l.ln())
            .sum::<f64>()
    }

    pub fn to_json(&self) -> EllipsoidJson {
        let n = self.dim;
        EllipsoidJson {
            dim: n,
            a: self.a_rows.clone(),
            b: self.b.iter().copied().collect(),
        }
    }

    pub fn from_json(j: &EllipsoidJson) -> Result<Self> {
        if j.a.len() != j.dim * j.dim || j.b.len() != j.dim {
            return Err(Error::DimensionMismatch {
                expected: j.dim * j.dim,
                got: j.a.len(),
            });
        }
        Self::new(
            DMatrix::from_row_slice(j.dim, j.dim, &j.a),
            DVector::from_column_slice(&j.b),
        )
    }
}

/// Mean `mu` and covariance-shaped matrix `Sigma` of an ellipsoid.
pub fn ellipsoid_moments(e: &Ellipsoid) -> (DVector<f64>, DMatrix<f64>) {
    (e.mu.clone(), e.sigma.clone())
}

/// Symmetric square root of an SPD matrix.
pub(crate) fn spd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::NotPositiveDefinite("ellipsoid shape"));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    let r = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    Ok((&r + r.transpose()) * 0.5)
}
