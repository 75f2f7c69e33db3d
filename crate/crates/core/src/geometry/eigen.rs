use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use super::GeometryError;

const SYMMETRY_TOL: f64 = 1e-12;

/// Eigen-decomposition of a symmetric 3x3 matrix, eigenvalues ascending.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SymEig3 {
    pub eigenvalues: [f64; 3],
    /// Unit eigenvectors, `eigenvectors[i]` pairs with `eigenvalues[i]`.
    pub eigenvectors: [Vector3<f64>; 3],
}

impl SymEig3 {
    /// `V Λ Vᵀ`.
    pub fn reconstruct(&self) -> Matrix3<f64> {
        let mut m = Matrix3::zeros();
        for i in 0..3 {
            let v = self.eigenvectors[i];
            m += v * v.transpose() * self.eigenvalues[i];
        }
        m
    }

    pub fn vectors_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&self.eigenvectors)
    }
}

/// Decomposes `m`. Asymmetry is measured relative to `max(1, max |m_ij|)`.
pub fn eigen_symmetric3(m: &Matrix3<f64>) -> Result<SymEig3, GeometryError> {
    let scale = m.amax().max(1.0);
    let asymmetry = (m - m.transpose()).amax();
    if asymmetry > SYMMETRY_TOL * scale || !asymmetry.is_finite() {
        return Err(GeometryError::NonSymmetric { asymmetry });
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = order.map(|i| eig.eigenvalues[i]);
    let mut eigenvectors = order.map(|i| eig.eigenvectors.column(i).into_owned().normalize());
    // right-handed basis
    if eigenvectors[0].cross(&eigenvectors[1]).dot(&eigenvectors[2]) < 0.0 {
        eigenvectors[2] = -eigenvectors[2];
    }
    Ok(SymEig3 {
        eigenvalues,
        eigenvectors,
    })
}
