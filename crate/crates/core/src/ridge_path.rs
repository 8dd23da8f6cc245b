//! Dual-form ridge regression along a regularization path.
//!
//! One eigendecomposition `K = U diag(n λ̂) Uᵀ` serves every λ:
//! `c_λ = (K + nλ I)⁻¹ y = U diag(1 / (n(λ̂_i + λ))) Uᵀ y`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::spectral::EigenSystem;

/// Directions with `λ̂_i ≤ RANK_TOLERANCE · λ̂_1` are treated as the null space of the kernel.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// `n × c` label matrix, one column per output (class).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    values: DMatrix<f64>,
    centered: bool,
}

impl LabelMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.ncols() == 0 || values.nrows() == 0 {
            return Err(Error::input(
                "label matrix needs at least one row and one column",
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("label matrix has non-finite entries"));
        }
        Ok(Self {
            values,
            centered: false,
        })
    }

    pub fn from_vector(values: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_column_slice(values.len(), 1, values))
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn classes(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    /// Subtract each column's mean. Idempotent.
    pub fn centered(&self) -> Self {
        let n = self.n() as f64;
        let mut values = self.values.clone();
        for mut col in values.column_iter_mut() {
            let mean = col.sum() / n;
            col.add_scalar_mut(-mean);
        }
        Self {
            values,
            centered: true,
        }
    }

    /// Rows restricted to `idx`; the centered flag is dropped.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.n()) {
            return Err(Error::input(format!(
                "row {bad} out of range for n={}",
                self.n()
            )));
        }
        Self::new(self.values.select_rows(idx))
    }

    /// Squared Frobenius norm, i.e. `‖y‖²` summed over classes.
    pub fn energy(&self) -> f64 {
        self.values.norm_squared()
    }
}

/// λ values `λ₀ / n` for a set of base values λ₀.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaGrid {
    base: Vec<f64>,
    n: usize,
    resolved: Vec<f64>,
}

impl LambdaGrid {
    pub fn new(base: Vec<f64>, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::input("lambda grid needs n ≥ 1"));
        }
        if base.is_empty() {
            return Err(Error::input("lambda grid is empty"));
        }
        if base.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::input(
                "lambda grid values must be finite and strictly positive",
            ));
        }
        if base.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::input("lambda grid must be strictly increasing"));
        }
        let resolved = base.iter().map(|&v| v / n as f64).collect();
        Ok(Self { base, n, resolved })
    }

    pub fn base_values(&self) -> &[f64] {
        &self.base
    }

    pub fn resolved(&self) -> &[f64] {
        &self.resolved
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    /// `(λ₀, λ)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.base.iter().copied().zip(self.resolved.iter().copied())
    }
}

/// Ridge solution in dual coordinates, `β̂_λ = Xᵀ c_λ`.
#[derive(Debug, Clone)]
pub struct DualRidgeFit {
    pub lambda: f64,
    /// `n × c` coefficients `c_λ`.
    pub dual_coeffs: DMatrix<f64>,
    /// Per-direction factor `1 / (n(λ̂_i + λ))`; zero on the null space for the ridgeless fit.
    pub spectral_weights: Vec<f64>,
    /// Set by the ridgeless fit when the kernel has a null space.
    pub rank_deficient: bool,
}

/// Labels projected onto an eigenbasis, cached for fast evaluation along a path.
#[derive(Debug, Clone)]
pub struct SpectralProblem<'a> {
    eig: &'a EigenSystem,
    /// `Uᵀ y`, `n × c`.
    coords: DMatrix<f64>,
    /// `Σ_c ⟨u_i, y_c⟩²` per direction.
    energy: Vec<f64>,
    /// Eigenvalues with the numerical null space set to exactly zero.
    ev: Vec<f64>,
}

impl<'a> SpectralProblem<'a> {
    pub fn new(eig: &'a EigenSystem, y: &LabelMatrix) -> Result<Self> {
        if eig.n() != y.n() {
            return Err(Error::input(format!(
                "dimension mismatch: eigensystem has n={}, labels have {} rows",
                eig.n(),
                y.n()
            )));
        }
        let coords = eig.eigenvectors().transpose() * y.values();
        let energy = coords.row_iter().map(|r| r.norm_squared()).collect();
        let rank_floor = RANK_TOLERANCE * eig.top();
        let ev = eig
            .eigenvalues()
            .iter()
            .map(|&v| if v <= rank_floor { 0.0 } else { v })
            .collect();
        Ok(Self {
            eig,
            coords,
            energy,
            ev,
        })
    }

    pub fn eigensystem(&self) -> &EigenSystem {
        self.eig
    }

    pub fn n(&self) -> usize {
        self.eig.n()
    }

    /// Per-direction label energy `Σ_c ⟨u_i, y_c⟩²`.
    pub fn energy(&self) -> &[f64] {
        &self.energy
    }

    /// Whether direction `i` lies in the numerical null space.
    pub fn is_null(&self, i: usize) -> bool {
        self.ev[i] == 0.0
    }

    /// Number of null directions.
    pub fn null_count(&self) -> usize {
        (0..self.n()).filter(|&i| self.is_null(i)).count()
    }

    /// Residual factor `λ / (λ + λ̂_i)` with the λ → 0⁺ and λ → ∞ limits.
    pub fn shrinkage(&self, i: usize, lambda: f64) -> f64 {
        let ev = self.ev[i];
        if lambda.is_infinite() {
            1.0
        } else if lambda == 0.0 {
            if self.is_null(i) {
                1.0
            } else {
                0.0
            }
        } else {
            lambda / (lambda + ev)
        }
    }

    fn weights(&self, lambda: f64) -> Vec<f64> {
        let n = self.n() as f64;
        self.ev
            .iter()
            .map(|&ev| 1.0 / (n * (ev + lambda)))
            .collect()
    }

    fn fit_with_weights(
        &self,
        lambda: f64,
        weights: Vec<f64>,
        rank_deficient: bool,
    ) -> DualRidgeFit {
        let mut scaled = self.coords.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= weights[i];
        }
        DualRidgeFit {
            lambda,
            dual_coeffs: self.eig.eigenvectors() * scaled,
            spectral_weights: weights,
            rank_deficient,
        }
    }

    /// Ridge fit at `lambda > 0`.
    pub fn fit(&self, lambda: f64) -> Result<DualRidgeFit> {
        if !(lambda > 0.0) {
            return Err(Error::input(format!("ridge fit needs λ > 0, got {lambda}")));
        }
        Ok(self.fit_with_weights(lambda, self.weights(lambda), false))
    }

    /// Minimum-norm interpolator: null directions get weight zero.
    pub fn ridgeless(&self) -> DualRidgeFit {
        let n = self.n() as f64;
        let mut deficient = false;
        let weights = (0..self.n())
            .map(|i| {
                if self.is_null(i) {
                    deficient = true;
                    0.0
                } else {
                    1.0 / (n * self.ev[i])
                }
            })
            .collect();
        self.fit_with_weights(0.0, weights, deficient)
    }

    /// `(1/n) Σ_i (λ/(λ+λ̂_i))² ⟨u_i,y⟩²`, summed over classes.
    pub fn empirical_risk(&self, lambda: f64) -> f64 {
        let total: f64 = (0..self.n())
            .map(|i| self.shrinkage(i, lambda).powi(2) * self.energy[i])
            .sum();
        total / self.n() as f64
    }

    /// `‖β̂_λ‖² = Σ_i λ̂_i ⟨u_i,y⟩² / (n (λ̂_i + λ)²)`; λ = 0 gives the ridgeless norm.
    pub fn coefficient_norm_sq(&self, lambda: f64) -> f64 {
        let n = self.n() as f64;
        (0..self.n())
            .filter(|&i| !(lambda == 0.0 && self.is_null(i)))
            .map(|i| {
                let ev = self.ev[i];
                ev * self.energy[i] / (n * (ev + lambda).powi(2))
            })
            .sum()
    }

    /// `yᵀ (XXᵀ + nλ I)⁻¹ y = Σ_i ⟨u_i,y⟩² / (n(λ̂_i + λ))`.
    pub fn quadratic_form(&self, lambda: f64) -> f64 {
        let n = self.n() as f64;
        (0..self.n())
            .map(|i| self.energy[i] / (n * (self.ev[i] + lambda)))
            .sum()
    }
}

/// Fit every λ of `grid` from one decomposition.
pub fn fit_path(
    eig: &EigenSystem,
    y: &LabelMatrix,
    grid: &LambdaGrid,
) -> Result<Vec<DualRidgeFit>> {
    if grid.n() != eig.n() {
        return Err(Error::input(format!(
            "lambda grid resolved for n={}, eigensystem has n={}",
            grid.n(),
            eig.n()
        )));
    }
    let problem = SpectralProblem::new(eig, y)?;
    grid.resolved().iter().map(|&l| problem.fit(l)).collect()
}

pub fn empirical_risk(eig: &EigenSystem, y: &LabelMatrix, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::input(format!("λ must be ≥ 0, got {lambda}")));
    }
    Ok(SpectralProblem::new(eig, y)?.empirical_risk(lambda))
}

pub fn ridgeless_fit(eig: &EigenSystem, y: &LabelMatrix) -> Result<DualRidgeFit> {
    Ok(SpectralProblem::new(eig, y)?.ridgeless())
}

/// Sum over test points and classes of `(y_test - K_cross c_λ)²`.
pub fn test_squared_error(
    fit: &DualRidgeFit,
    cross_kernel: &DMatrix<f64>,
    y_test: &DMatrix<f64>,
) -> Result<f64> {
    if cross_kernel.ncols() != fit.dual_coeffs.nrows() {
        return Err(Error::input(format!(
            "cross kernel has {} columns, fit has {} training points",
            cross_kernel.ncols(),
            fit.dual_coeffs.nrows()
        )));
    }
    if y_test.nrows() != cross_kernel.nrows() || y_test.ncols() != fit.dual_coeffs.ncols() {
        return Err(Error::input(format!(
            "test labels are {}x{}, expected {}x{}",
            y_test.nrows(),
            y_test.ncols(),
            cross_kernel.nrows(),
            fit.dual_coeffs.ncols()
        )));
    }
    let pred = cross_kernel * &fit.dual_coeffs;
    Ok((y_test - pred).norm_squared())
}

/// Held-out risk `(1/M) ‖y_test − K_cross c_λ‖²_F`; `cross_kernel` holds raw inner products.
pub fn test_risk(
    fit: &DualRidgeFit,
    cross_kernel: &DMatrix<f64>,
    y_test: &LabelMatrix,
) -> Result<f64> {
    let sse = test_squared_error(fit, cross_kernel, y_test.values())?;
    Ok(sse / y_test.n() as f64)
}
