//! Closed-form Bures-Wasserstein geometry between Gaussian measures.
//!
//! All matrix functions go through a symmetric eigendecomposition. Dimensions
//! in this crate are small (latent spaces of at most a few dozen coordinates),
//! so the exact route is preferred over iterative square-root schemes.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{FlicError, Result};

/// Default diagonal regularization added to every empirical covariance.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Absolute symmetry tolerance, scaled by `max(1, max|S_ij|)`.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Eigenvalues above `-EIGEN_CLAMP` are treated as round-off and clamped to zero.
pub const EIGEN_CLAMP: f64 = 1e-10;

/// Below this (relative to the largest eigenvalue) a matrix counts as singular.
const SINGULAR_TOL: f64 = 1e-12;

/// A Gaussian measure `N(mean, L Lᵀ)` stored through a covariance factor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov_factor: DMatrix<f64>,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov_factor: DMatrix<f64>) -> Result<Self> {
        let k = mean.len();
        if cov_factor.shape() != (k, k) {
            return Err(FlicError::dims(
                "Gaussian::new",
                format!("{k}x{k} factor"),
                format!("{}x{}", cov_factor.nrows(), cov_factor.ncols()),
            ));
        }
        Ok(Self { mean, cov_factor })
    }

    /// `N(0, I_k)`.
    pub fn standard(k: usize) -> Self {
        Self {
            mean: DVector::zeros(k),
            cov_factor: DMatrix::identity(k, k),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.cov_factor * self.cov_factor.transpose()
    }
}

pub(crate) fn ensure_finite(m: &DMatrix<f64>, context: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FlicError::NonFinite(context))
    }
}

fn ensure_square(m: &DMatrix<f64>, context: &'static str) -> Result<()> {
    if m.is_square() {
        Ok(())
    } else {
        Err(FlicError::dims(
            context,
            "square matrix",
            format!("{}x{}", m.nrows(), m.ncols()),
        ))
    }
}

fn ensure_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let scale = m.amax().max(1.0);
    let asymmetry = (m - m.transpose()).amax();
    if asymmetry > SYMMETRY_TOL * scale {
        return Err(FlicError::NotSymmetric { asymmetry });
    }
    Ok(())
}

/// Eigendecomposition of the symmetric part, with PSD round-off clamped to zero.
fn psd_eigen(s: &DMatrix<f64>, context: &'static str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    ensure_square(s, context)?;
    ensure_finite(s, context)?;
    ensure_symmetric(s)?;
    let sym = (s + s.transpose()) * 0.5;
    let mut eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    for v in eig.eigenvalues.iter_mut() {
        if *v < -EIGEN_CLAMP * scale {
            return Err(FlicError::InvalidArgument(format!(
                "{context}: matrix is not positive semi-definite (eigenvalue {v:.3e})"
            )));
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(eig)
}

fn reassemble(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let u = &eig.eigenvectors;
    let mut scaled = u.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let w = f(lambda);
        scaled.column_mut(j).scale_mut(w);
    }
    let out = scaled * u.transpose();
    (&out + out.transpose()) * 0.5
}

/// Principal square root of a symmetric PSD matrix.
pub fn matrix_sqrt_psd(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(s, "matrix_sqrt_psd")?;
    Ok(reassemble(&eig, f64::sqrt))
}

fn trace_sqrt_psd(s: &DMatrix<f64>) -> Result<f64> {
    let eig = psd_eigen(s, "trace_sqrt_psd")?;
    Ok(eig.eigenvalues.iter().map(|v| v.sqrt()).sum())
}

fn same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>, context: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(FlicError::dims(
            context,
            format!("{}x{}", a.nrows(), a.ncols()),
            format!("{}x{}", b.nrows(), b.ncols()),
        ));
    }
    Ok(())
}

/// Squared Bures distance `tr A + tr B - 2 tr((A^½ B A^½)^½)`, clamped at zero.
pub fn bures_sq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    same_shape(a, b, "bures_sq")?;
    let sqrt_a = matrix_sqrt_psd(a)?;
    ensure_finite(b, "bures_sq")?;
    ensure_symmetric(b)?;
    let middle = &sqrt_a * b * &sqrt_a;
    let middle = (&middle + middle.transpose()) * 0.5;
    let cross = trace_sqrt_psd(&middle)?;
    let value = a.trace() + b.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(FlicError::NonFinite("bures_sq"));
    }
    Ok(value.max(0.0))
}

/// Squared 2-Wasserstein distance between two Gaussians.
pub fn w2_sq_gaussians(g1: &Gaussian, g2: &Gaussian) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(FlicError::dims("w2_sq_gaussians", g1.dim(), g2.dim()));
    }
    let mean_term = (&g1.mean - &g2.mean).norm_squared();
    Ok(mean_term + bures_sq(&g1.covariance(), &g2.covariance())?)
}

/// Squared Bures distance together with its gradient in the first argument.
///
/// The gradient is `I - T` where `T = A^-½ (A^½ B A^½)^½ A^-½` is the linear
/// Monge map pushing `N(0, A)` onto `N(0, B)`. `A` must be positive definite.
pub fn bures_sq_with_grad(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    same_shape(a, b, "bures_sq_with_grad")?;
    ensure_finite(b, "bures_sq_with_grad")?;
    ensure_symmetric(b)?;
    let eig_a = psd_eigen(a, "bures_sq_with_grad")?;
    let max_eig = eig_a.eigenvalues.amax();
    let min_eig = eig_a.eigenvalues.min();
    if min_eig <= SINGULAR_TOL * max_eig.max(1.0) {
        return Err(FlicError::Singular(format!(
            "first Bures argument has eigenvalue {min_eig:.3e}; add diagonal regularization"
        )));
    }
    let sqrt_a = reassemble(&eig_a, f64::sqrt);
    let inv_sqrt_a = reassemble(&eig_a, |v| 1.0 / v.sqrt());
    let middle = &sqrt_a * b * &sqrt_a;
    let middle = (&middle + middle.transpose()) * 0.5;
    let eig_m = psd_eigen(&middle, "bures_sq_with_grad")?;
    let cross: f64 = eig_m.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let sqrt_m = reassemble(&eig_m, f64::sqrt);
    let transport = &inv_sqrt_a * sqrt_m * &inv_sqrt_a;
    let k = a.nrows();
    let grad = DMatrix::identity(k, k) - (&transport + transport.transpose()) * 0.5;
    let value = a.trace() + b.trace() - 2.0 * cross;
    if !value.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(FlicError::NonFinite("bures_sq_with_grad"));
    }
    Ok((value.max(0.0), grad))
}

/// Gradient of `B²(L Lᵀ + εI, B)` with respect to the factor `L`.
pub fn grad_bures_wrt_factor(l: &DMatrix<f64>, b: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    ensure_square(l, "grad_bures_wrt_factor")?;
    ensure_finite(l, "grad_bures_wrt_factor")?;
    let k = l.nrows();
    let a = l * l.transpose() + DMatrix::identity(k, k) * eps;
    let (_, grad_a) = bures_sq_with_grad(&a, b)?;
    Ok(grad_a * l * 2.0)
}

/// Mean and population covariance (plus `eps * I`) of the rows of `points`.
pub fn empirical_moments(points: &DMatrix<f64>, eps: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = points.nrows();
    if n == 0 {
        return Err(FlicError::Empty("empirical_gaussian: no points"));
    }
    ensure_finite(points, "empirical_gaussian")?;
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(FlicError::InvalidArgument(format!(
            "regularization must be a finite non-negative number, got {eps}"
        )));
    }
    let k = points.ncols();
    let mean = points.row_mean().transpose();
    let mut centered = points.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / n as f64;
    cov = (&cov + cov.transpose()) * 0.5;
    for i in 0..k {
        cov[(i, i)] += eps;
    }
    Ok((mean, cov))
}

/// Empirical Gaussian of a point cloud (rows are points).
pub fn empirical_gaussian(points: &DMatrix<f64>, eps: f64) -> Result<Gaussian> {
    let (mean, cov) = empirical_moments(points, eps)?;
    let factor = match cov.clone().cholesky() {
        Some(chol) => chol.l(),
        // rank-deficient covariance with eps = 0: any factor with L Lᵀ = Σ will do
        None => matrix_sqrt_psd(&cov)?,
    };
    Gaussian::new(mean, factor)
}
