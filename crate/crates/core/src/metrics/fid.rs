use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::FeatureSet;
use crate::error::{Error, Result};

/// Relative size of a negative eigenvalue tolerated before the matrix
/// square root is declared broken.
const NEG_EIG_TOL: f64 = 1e-6;

struct Moments {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

fn moments(set: &FeatureSet) -> Result<Moments> {
    let (n, f) = set.features.dim();
    if n < f + 1 {
        return Err(Error::Validation(format!(
            "Frechet distance needs n >= f + 1 samples, got n = {n}, f = {f}"
        )));
    }
    if set.features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite feature value".into()));
    }
    let x = DMatrix::from_row_slice(n, f, set.features.as_standard_layout().as_slice().unwrap());
    let mean = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    Ok(Moments { mean, cov })
}

fn symmetric_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !max.is_finite() || !min.is_finite() || min < -NEG_EIG_TOL * max.max(1.0) {
        let cond = if min.abs() > 0.0 { max / min.abs() } else { f64::INFINITY };
        return Err(Error::Numerical(format!(
            "{what} is not positive semidefinite beyond stabilization \
             (eigenvalues in [{min:e}, {max:e}], condition number {cond:e})"
        )));
    }
    Ok(eig)
}

fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetric_eigen(m, "covariance")?;
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// `Tr((A B)^(1/2))` through the symmetric form `(A^(1/2) B A^(1/2))^(1/2)`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let ra = sqrt_psd(a)?;
    let inner = &ra * b * &ra;
    let eig = symmetric_eigen(&inner, "covariance product")?;
    Ok(eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum())
}

/// Frechet distance between Gaussian fits of two feature sets:
/// `|mu_r - mu_f|^2 + Tr(S_r + S_f - 2 (S_r S_f)^(1/2))`.
///
/// The trace term is evaluated in both argument orders and averaged, which
/// makes the result exactly symmetric.
pub fn fid(real: &FeatureSet, fake: &FeatureSet) -> Result<f64> {
    if real.dim() != fake.dim() {
        return Err(Error::Validation(format!(
            "feature widths differ: {} vs {}",
            real.dim(),
            fake.dim()
        )));
    }
    let r = moments(real)?;
    let f = moments(fake)?;
    let diff = (&r.mean - &f.mean).norm_squared();
    let cross = 0.5 * (trace_sqrt_product(&r.cov, &f.cov)? + trace_sqrt_product(&f.cov, &r.cov)?);
    let value = diff + r.cov.trace() + f.cov.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::Numerical("Frechet distance is not finite".into()));
    }
    Ok(value.max(0.0))
}
