//! Gram matrices and their symmetric eigendecomposition.
//!
//! Everything downstream works with eigenvalues of the empirical second-moment
//! operator `Σ̂ = XᵀX / n`, which share their nonzero spectrum with `K / n` for
//! `K = XXᵀ`. The conversion from kernel scale happens once, here.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative tolerance below which negative eigenvalues of a PSD input are
/// treated as round-off and clamped to zero.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Default relative asymmetry allowed when ingesting a Gram matrix.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// Normalization of the stored kernel entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramScale {
    /// Unnormalized inner products, `K = XXᵀ`.
    Raw,
    /// Entries already divided by the sample count, `K = XXᵀ / n`.
    PerSample,
}

/// Symmetric `n × n` Gram (kernel) matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    entries: DMatrix<f64>,
    scale: GramScale,
}

impl GramMatrix {
    /// Validate and symmetrize a kernel matrix.
    ///
    /// `tolerance` bounds `max |K - Kᵀ|` relative to `max |K|`.
    pub fn new(entries: DMatrix<f64>, scale: GramScale, tolerance: f64) -> Result<Self> {
        let n = entries.nrows();
        if n == 0 {
            return Err(Error::input("Gram matrix must have at least one row"));
        }
        if entries.ncols() != n {
            return Err(Error::input(format!(
                "Gram matrix must be square, got {}x{}",
                n,
                entries.ncols()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("Gram matrix has non-finite entries"));
        }
        let scale_ref = entries.amax();
        let asym = max_asymmetry(&entries);
        if asym > tolerance * scale_ref {
            return Err(Error::Data(format!(
                "kernel is not symmetric: max |K - Kᵀ| = {asym:.3e} exceeds {tolerance:.1e} × {scale_ref:.3e}"
            )));
        }
        let entries = (&entries + entries.transpose()) * 0.5;
        Ok(Self { entries, scale })
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn scale(&self) -> GramScale {
        self.scale
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Principal submatrix restricted to `idx`.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::input("cannot select an empty submatrix"));
        }
        let n = self.n();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::input(format!("index {bad} out of range for n={n}")));
        }
        let entries = DMatrix::from_fn(idx.len(), idx.len(), |i, j| self.entries[(idx[i], idx[j])]);
        Ok(Self {
            entries,
            scale: self.scale,
        })
    }

    /// Factor converting entries to the `K / n` scale.
    fn to_sigma_hat(&self) -> f64 {
        match self.scale {
            GramScale::Raw => 1.0 / self.n() as f64,
            GramScale::PerSample => 1.0,
        }
    }
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// `XXᵀ` for an `N × P` feature matrix.
pub fn gram_from_features(features: &DMatrix<f64>) -> Result<GramMatrix> {
    if features.nrows() == 0 || features.ncols() == 0 {
        return Err(Error::input(format!(
            "feature matrix must be non-empty, got {}x{}",
            features.nrows(),
            features.ncols()
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("feature matrix has non-finite entries"));
    }
    let k = features * features.transpose();
    // Symmetric up to summation order; the check only guards the invariant.
    GramMatrix::new(k, GramScale::Raw, 1e-12)
}

/// Spectral decomposition of a Gram matrix on the `Σ̂` scale.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
}

impl EigenSystem {
    /// Eigenvalues of `Σ̂` (i.e. of `K / n` for raw kernels), descending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Orthonormal eigenvectors as columns, aligned with [`Self::eigenvalues`].
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Eigenvalues of the unnormalized kernel `XXᵀ`.
    pub fn gram_eigenvalues(&self) -> Vec<f64> {
        let n = self.n() as f64;
        self.eigenvalues.iter().map(|v| v * n).collect()
    }

    /// Largest eigenvalue of `Σ̂`, i.e. `‖Σ̂‖_op`.
    pub fn top(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// `U diag(values) Uᵀ` on the `XXᵀ` scale.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let n = self.n() as f64;
        let mut scaled = self.eigenvectors.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.eigenvalues[j] * n;
        }
        scaled * self.eigenvectors.transpose()
    }
}

/// Sort descending, validate near-PSD, clamp round-off negatives to zero.
fn finish_spectrum(values: &mut [f64], order: &mut [usize]) -> Result<()> {
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    values.copy_from_slice(&sorted);
    let top = values[0].max(0.0);
    let floor = -PSD_TOLERANCE * top;
    if let Some(&worst) = values.last() {
        if worst < floor {
            return Err(Error::Data(format!(
                "kernel is not positive semidefinite: eigenvalue {worst:.3e} below -{PSD_TOLERANCE:.0e} × {top:.3e}"
            )));
        }
    }
    for v in values.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(())
}

/// Full symmetric eigendecomposition.
pub fn eigh(gram: &GramMatrix) -> Result<EigenSystem> {
    let n = gram.n();
    let factor = gram.to_sigma_hat();
    let max_iter = 64 * n.max(8);
    let eig = gram
        .entries
        .clone()
        .try_symmetric_eigen(f64::EPSILON, max_iter)
        .ok_or_else(|| {
            let e = &gram.entries;
            Error::numerical(format!(
                "symmetric eigensolver did not converge within {max_iter} sweeps (n={n}, max|K|={:.3e}, trace={:.3e}, ‖K‖_F={:.3e})",
                e.amax(),
                e.trace(),
                e.norm()
            ))
        })?;
    let mut values: Vec<f64> = eig.eigenvalues.iter().map(|v| v * factor).collect();
    let mut order: Vec<usize> = (0..n).collect();
    finish_spectrum(&mut values, &mut order)?;
    let eigenvectors = DMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    Ok(EigenSystem {
        eigenvalues: values,
        eigenvectors,
    })
}

/// Eigenvalues only, on the `Σ̂` scale, descending and clamped.
pub fn eigvalsh(gram: &GramMatrix) -> Result<Vec<f64>> {
    let n = gram.n();
    let factor = gram.to_sigma_hat();
    let raw = gram.entries.symmetric_eigenvalues();
    let mut values: Vec<f64> = raw.iter().map(|v| v * factor).collect();
    let mut order: Vec<usize> = (0..n).collect();
    finish_spectrum(&mut values, &mut order)?;
    Ok(values)
}
