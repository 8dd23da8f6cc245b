//! Risk predictors that only look at training data.

use crate::error::{Error, Result};
use crate::ridge_path::{LabelMatrix, SpectralProblem};
use crate::spectral::EigenSystem;

/// Default κ̂/λ above which an instance is reported as non-classical.
pub const DEFAULT_REGIME_THRESHOLD: f64 = 2.0;

/// GCV value with the λ = 0 degeneracy made explicit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gcv {
    pub value: f64,
    /// λ = 0 on a full-rank kernel: both factors vanish and `value` is reported as 0.
    pub interpolating: bool,
}

impl SpectralProblem<'_> {
    /// `n⁻¹ Σ λ/(λ+λ̂_i)`; at λ = 0 this is the fraction of null directions.
    pub fn gcv_multiplier(&self, lambda: f64) -> f64 {
        let total: f64 = (0..self.n()).map(|i| self.shrinkage(i, lambda)).sum();
        total / self.n() as f64
    }

    /// Generalized cross-validation `GCV_λ = R_emp(λ) / multiplier²`.
    pub fn gcv(&self, lambda: f64) -> Gcv {
        let m = self.gcv_multiplier(lambda);
        if m == 0.0 {
            return Gcv {
                value: 0.0,
                interpolating: true,
            };
        }
        Gcv {
            value: self.empirical_risk(lambda) / (m * m),
            interpolating: false,
        }
    }

    /// `‖β̂_λ‖₂ / √n`.
    pub fn norm_estimate(&self, lambda: f64) -> f64 {
        (self.coefficient_norm_sq(lambda) / self.n() as f64).sqrt()
    }
}

pub fn gcv(eig: &EigenSystem, y: &LabelMatrix, lambda: f64) -> Result<Gcv> {
    if !(lambda >= 0.0) {
        return Err(Error::input(format!("GCV needs λ ≥ 0, got {lambda}")));
    }
    Ok(SpectralProblem::new(eig, y)?.gcv(lambda))
}

pub fn norm_estimate(eig: &EigenSystem, y: &LabelMatrix, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::input(format!(
            "norm estimate needs λ ≥ 0, got {lambda}"
        )));
    }
    Ok(SpectralProblem::new(eig, y)?.norm_estimate(lambda))
}

/// `κ̂ = (n⁻¹ Σ (λ + λ̂_i)⁻¹)⁻¹` over the `Σ̂` spectrum.
pub fn hat_kappa(eigenvalues: &[f64], lambda: f64) -> Result<f64> {
    if eigenvalues.is_empty() {
        return Err(Error::input("κ̂ needs a non-empty spectrum"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::input(format!("κ̂ needs λ ≥ 0, got {lambda}")));
    }
    if lambda == 0.0 && eigenvalues.iter().all(|&v| v <= 0.0) {
        return Err(Error::input(
            "κ̂ is undefined at λ = 0 for an all-zero spectrum",
        ));
    }
    let mean_inv: f64 =
        eigenvalues.iter().map(|&v| 1.0 / (lambda + v)).sum::<f64>() / eigenvalues.len() as f64;
    Ok(1.0 / mean_inv)
}

/// Basis values of the spectrum-only family; the estimate is `α²·signal + σ²·noise`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumTerms {
    /// `κ̂² Σ λ̂_i/(λ+λ̂_i)²`
    pub signal: f64,
    /// `κ̂² n⁻¹ Σ 1/(λ+λ̂_i)²`
    pub noise: f64,
}

impl SpectrumTerms {
    pub fn evaluate(&self, alpha2: f64, sigma2: f64) -> f64 {
        alpha2 * self.signal + sigma2 * self.noise
    }
}

pub fn spectrum_terms(eigenvalues: &[f64], lambda: f64) -> Result<SpectrumTerms> {
    if !(lambda > 0.0) {
        return Err(Error::input(format!(
            "spectrum-only estimate needs λ > 0, got {lambda}"
        )));
    }
    let k = hat_kappa(eigenvalues, lambda)?;
    let (mut signal, mut noise) = (0.0, 0.0);
    for &v in eigenvalues {
        let d2 = (lambda + v).powi(2);
        signal += v / d2;
        noise += 1.0 / d2;
    }
    Ok(SpectrumTerms {
        signal: k * k * signal,
        noise: k * k * noise / eigenvalues.len() as f64,
    })
}

/// `R̂_spec = κ̂² (α² Σ λ̂_i/(λ+λ̂_i)² + σ²/n Σ 1/(λ+λ̂_i)²)`.
pub fn spectrum_only(eigenvalues: &[f64], lambda: f64, alpha2: f64, sigma2: f64) -> Result<f64> {
    if !(alpha2 >= 0.0 && sigma2 >= 0.0) {
        return Err(Error::input("α² and σ² must be nonnegative"));
    }
    Ok(spectrum_terms(eigenvalues, lambda)?.evaluate(alpha2, sigma2))
}

/// One observation for fitting the spectrum-only parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecObservation {
    pub terms: SpectrumTerms,
    pub observed: f64,
}

/// Least-squares `(α², σ²)` restricted to the nonnegative quadrant.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SpecFit {
    pub alpha2: f64,
    pub sigma2: f64,
    /// Mean squared error of the fitted predictions.
    pub mse: f64,
    /// Design columns were (numerically) collinear; only a 1-D fit was possible.
    pub degenerate: bool,
}

/// Fit `(α², σ²) ≥ 0` minimizing the mean squared error against observed risks.
///
/// Two parameters make the active set small: try the unconstrained optimum,
/// then each axis, then the origin, and keep the best feasible candidate.
pub fn fit_spec_params(obs: &[SpecObservation]) -> Result<SpecFit> {
    if obs.len() < 2 {
        return Err(Error::input(
            "fitting the spectrum-only family needs ≥ 2 observations",
        ));
    }
    if obs.iter().any(|o| {
        !(o.observed.is_finite() && o.terms.signal.is_finite() && o.terms.noise.is_finite())
    }) {
        return Err(Error::input("spectrum-only observations must be finite"));
    }
    let (mut ss, mut sn, mut nn, mut sr, mut nr) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for o in obs {
        let (s, n, r) = (o.terms.signal, o.terms.noise, o.observed);
        ss += s * s;
        sn += s * n;
        nn += n * n;
        sr += s * r;
        nr += n * r;
    }
    let mse = |a: f64, b: f64| {
        obs.iter()
            .map(|o| (o.terms.evaluate(a, b) - o.observed).powi(2))
            .sum::<f64>()
            / obs.len() as f64
    };

    let det = ss * nn - sn * sn;
    let degenerate = !(det > 1e-12 * ss * nn);
    let mut candidates = vec![(0.0, 0.0)];
    if ss > 0.0 {
        candidates.push(((sr / ss).max(0.0), 0.0));
    }
    if nn > 0.0 {
        candidates.push((0.0, (nr / nn).max(0.0)));
    }
    if !degenerate {
        let a = (sr * nn - nr * sn) / det;
        let b = (nr * ss - sr * sn) / det;
        if a >= 0.0 && b >= 0.0 {
            candidates.push((a, b));
        }
    }
    let (alpha2, sigma2) = candidates
        .into_iter()
        .min_by(|x, y| mse(x.0, x.1).total_cmp(&mse(y.0, y.1)))
        .expect("origin is always a candidate");
    Ok(SpecFit {
        alpha2,
        sigma2,
        mse: mse(alpha2, sigma2),
        degenerate,
    })
}

/// κ̂/λ together with the classical / non-classical verdict.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regime {
    pub ratio: f64,
    pub non_classical: bool,
}

pub fn regime_ratio(eigenvalues: &[f64], lambda: f64, threshold: f64) -> Result<Regime> {
    if !(lambda > 0.0) {
        return Err(Error::input(format!(
            "regime ratio needs λ > 0, got {lambda}"
        )));
    }
    let ratio = hat_kappa(eigenvalues, lambda)? / lambda;
    Ok(Regime {
        ratio,
        non_classical: ratio > threshold,
    })
}

/// Pearson correlation coefficient. `None` when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// One (n, λ, seed) evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskRow {
    pub n: usize,
    pub lambda0: f64,
    pub lambda: f64,
    pub seed: u64,
    pub r_emp: f64,
    pub r_test: Option<f64>,
    pub gcv: Option<f64>,
    pub kappa_hat: f64,
    pub regime_ratio: f64,
    pub r_spec: Option<f64>,
    pub r_norm: Option<f64>,
    pub r_omni: Option<f64>,
    pub r_omni_noisy: Option<f64>,
}

impl RiskRow {
    /// Check the row-level invariants `gcv ≥ r_emp`, `κ̂ ≥ λ`, `κ̂/λ ≥ 1`.
    pub fn check(&self) -> Result<()> {
        const SLACK: f64 = 1e-12;
        let ctx = || format!("row n={} λ={:e} seed={}", self.n, self.lambda, self.seed);
        if let Some(g) = self.gcv {
            if g < self.r_emp * (1.0 - SLACK) {
                return Err(Error::Invariant(format!(
                    "{}: GCV {g} < R_emp {}",
                    ctx(),
                    self.r_emp
                )));
            }
        }
        if self.kappa_hat < self.lambda * (1.0 - SLACK) {
            return Err(Error::Invariant(format!(
                "{}: κ̂ {} < λ {}",
                ctx(),
                self.kappa_hat,
                self.lambda
            )));
        }
        if self.regime_ratio < 1.0 - SLACK {
            return Err(Error::Invariant(format!(
                "{}: κ̂/λ = {} < 1",
                ctx(),
                self.regime_ratio
            )));
        }
        Ok(())
    }
}

/// Flat table of predictor evaluations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RiskReport {
    pub rows: Vec<RiskRow>,
}

impl RiskReport {
    pub fn check(&self) -> Result<()> {
        self.rows.iter().try_for_each(RiskRow::check)
    }

    /// Distinct sample sizes, ascending.
    pub fn sample_sizes(&self) -> Vec<usize> {
        let mut ns: Vec<usize> = self.rows.iter().map(|r| r.n).collect();
        ns.sort_unstable();
        ns.dedup();
        ns
    }

    /// Distinct seeds, ascending.
    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// For each (n, seed), the row with the smallest observed test risk (ties → smaller λ).
    pub fn optimal_rows(&self) -> Vec<&RiskRow> {
        let mut best: Vec<&RiskRow> = Vec::new();
        for n in self.sample_sizes() {
            for seed in self.seeds() {
                let mut group: Vec<&RiskRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.n == n && r.seed == seed && r.r_test.is_some())
                    .collect();
                group.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
                let mut pick: Option<&RiskRow> = None;
                for row in group {
                    if pick.is_none_or(|p| row.r_test < p.r_test) {
                        pick = Some(row);
                    }
                }
                best.extend(pick);
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{eigh, gram_from_features, GramMatrix, GramScale};
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn eig_of(k: &[f64], n: usize) -> EigenSystem {
        eigh(&GramMatrix::new(DMatrix::from_row_slice(n, n, k), GramScale::Raw, 1e-10).unwrap())
            .unwrap()
    }

    fn labels(v: &[f64]) -> LabelMatrix {
        LabelMatrix::from_vector(v).unwrap()
    }

    #[test]
    fn gcv_single_point() {
        let e = eig_of(&[1.0], 1);
        let p = SpectralProblem::new(&e, &labels(&[1.0])).unwrap();
        assert!((p.gcv_multiplier(1.0) - 0.5).abs() < 1e-15);
        let g = gcv(&e, &labels(&[1.0]), 1.0).unwrap();
        assert!((g.value - 1.0).abs() < 1e-15);
        assert!(!g.interpolating);
    }

    #[test]
    fn gcv_null_model_and_shrinkage_limit() {
        let e = eig_of(&[0.0; 9], 3);
        let y = labels(&[1.0, 2.0, -1.0]);
        let g = gcv(&e, &y, 0.7).unwrap();
        assert!((g.value - 2.0).abs() < 1e-15);

        let e = eig_of(&[2.0, 1.0, 0.0, 1.0, 2.0, 0.5, 0.0, 0.5, 1.0], 3);
        let g = gcv(&e, &y, 1e9).unwrap();
        assert!((g.value - 2.0).abs() < 1e-6);
    }

    #[test]
    fn gcv_at_zero() {
        // Full rank: degenerate 0/0, flagged.
        let e = eig_of(&[1.0], 1);
        let g = gcv(&e, &labels(&[1.0]), 0.0).unwrap();
        assert!(g.interpolating && g.value == 0.0);
        // Rank one of two: null fraction 1/2, ridgeless residual (0,1) → R_emp 1/2.
        let e = eig_of(&[2.0, 0.0, 0.0, 0.0], 2);
        let g = gcv(&e, &labels(&[1.0, 1.0]), 0.0).unwrap();
        assert!(!g.interpolating);
        assert!((g.value - 0.5 / 0.25).abs() < 1e-15);
    }

    #[test]
    fn hat_kappa_examples() {
        assert!((hat_kappa(&[1.0, 1.0], 1.0).unwrap() - 2.0).abs() < 1e-15);
        assert!((hat_kappa(&[0.0, 0.0, 0.0], 0.3).unwrap() - 0.3).abs() < 1e-15);
        assert!((hat_kappa(&[1.0, 0.0], 1.0).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        assert!(hat_kappa(&[0.0, 0.0], 0.0).is_err());
        assert_eq!(hat_kappa(&[1.0, 0.0], 0.0).unwrap(), 0.0);
    }

    #[test]
    fn spectrum_only_examples() {
        assert_eq!(spectrum_only(&[1.0, 0.5], 0.1, 0.0, 0.0).unwrap(), 0.0);
        assert!((spectrum_only(&[1.0], 1.0, 1.0, 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((spectrum_only(&[1.0], 1.0, 0.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(spectrum_only(&[1.0], 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn norm_estimate_examples() {
        let e = eig_of(&[1.0], 1);
        assert_eq!(norm_estimate(&e, &labels(&[0.0]), 0.5).unwrap(), 0.0);
        assert!((norm_estimate(&e, &labels(&[1.0]), 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(norm_estimate(&e, &labels(&[1.0]), 1e12).unwrap() < 1e-11);
    }

    #[test]
    fn regime_examples() {
        let r = regime_ratio(&[0.0, 0.0], 0.5, DEFAULT_REGIME_THRESHOLD).unwrap();
        assert!((r.ratio - 1.0).abs() < 1e-15 && !r.non_classical);
        let r = regime_ratio(&[1.0, 1.0], 1.0, DEFAULT_REGIME_THRESHOLD).unwrap();
        assert!((r.ratio - 2.0).abs() < 1e-15 && !r.non_classical);
        let r = regime_ratio(&[10.0, 10.0], 0.1, DEFAULT_REGIME_THRESHOLD).unwrap();
        assert!((r.ratio - 101.0).abs() < 1e-12 && r.non_classical);
    }

    fn obs_from(params: (f64, f64), terms: &[(f64, f64)]) -> Vec<SpecObservation> {
        terms
            .iter()
            .map(|&(s, n)| {
                let terms = SpectrumTerms {
                    signal: s,
                    noise: n,
                };
                SpecObservation {
                    terms,
                    observed: terms.evaluate(params.0, params.1),
                }
            })
            .collect()
    }

    const DESIGN: [(f64, f64); 5] = [(1.0, 0.2), (0.8, 0.5), (0.3, 1.1), (0.5, 0.4), (0.1, 2.0)];

    #[test]
    fn fit_recovers_exact_parameters() {
        let fit = fit_spec_params(&obs_from((0.5, 0.1), &DESIGN)).unwrap();
        assert!((fit.alpha2 - 0.5).abs() < 1e-8 && (fit.sigma2 - 0.1).abs() < 1e-8);
        assert!(!fit.degenerate);
    }

    #[test]
    fn fit_zero_observations() {
        let fit = fit_spec_params(&obs_from((0.0, 0.0), &DESIGN)).unwrap();
        assert_eq!((fit.alpha2, fit.sigma2), (0.0, 0.0));
    }

    #[test]
    fn fit_clamps_infeasible_to_boundary_matching_grid_search() {
        let obs = obs_from((1.0, -1.0), &DESIGN);
        let fit = fit_spec_params(&obs).unwrap();
        assert_eq!(fit.sigma2, 0.0);
        // Independent oracle: dense grid over the feasible quadrant.
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=400 {
            for j in 0..=400 {
                let (a, b) = (i as f64 * 0.005, j as f64 * 0.005);
                let m: f64 = obs
                    .iter()
                    .map(|o| (o.terms.evaluate(a, b) - o.observed).powi(2))
                    .sum::<f64>()
                    / obs.len() as f64;
                if m < best.0 {
                    best = (m, a, b);
                }
            }
        }
        assert!(fit.mse <= best.0 + 1e-12);
        assert!((fit.alpha2 - best.1).abs() < 0.01 && best.2 < 0.01);
    }

    #[test]
    fn fit_degenerate_design() {
        let obs = obs_from((0.3, 0.3), &[(1.0, 2.0); 4]);
        let fit = fit_spec_params(&obs).unwrap();
        assert!(fit.degenerate);
        assert!(fit.mse < 1e-20);
        assert!(fit.alpha2 == 0.0 || fit.sigma2 == 0.0);
        assert!(fit_spec_params(&obs[..1]).is_err());
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_none());
    }

    #[test]
    fn row_invariants() {
        let mut row = RiskRow {
            n: 4,
            lambda0: 1.0,
            lambda: 0.25,
            seed: 0,
            r_emp: 0.1,
            r_test: None,
            gcv: Some(0.2),
            kappa_hat: 0.5,
            regime_ratio: 2.0,
            r_spec: None,
            r_norm: None,
            r_omni: None,
            r_omni_noisy: None,
        };
        assert!(row.check().is_ok());
        row.gcv = Some(0.05);
        assert!(matches!(row.check(), Err(Error::Invariant(_))));
    }

    fn random_problem(n: usize, p: usize, seed: u64) -> (EigenSystem, LabelMatrix) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
        let y = DMatrix::from_fn(n, 2, |_, _| StandardNormal.sample(&mut rng));
        (
            eigh(&gram_from_features(&x).unwrap()).unwrap(),
            LabelMatrix::new(y).unwrap(),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn gcv_identity_and_bounds(n in 2usize..40, p in 1usize..80, log_l in -5.0f64..2.0,
                                   seed in any::<u64>()) {
            let (eig, y) = random_problem(n, p, seed);
            let prob = SpectralProblem::new(&eig, &y).unwrap();
            let lambda = 10f64.powf(log_l);
            let g = prob.gcv(lambda).value;
            let m = prob.gcv_multiplier(lambda);
            let r = prob.empirical_risk(lambda);
            prop_assert!((g * m * m - r).abs() <= 1e-12 * r);
            prop_assert!(g >= r);
            let k = hat_kappa(eig.eigenvalues(), lambda).unwrap();
            prop_assert!(k >= lambda);
        }

        #[test]
        fn spectrum_only_is_linear(a1 in 0.0f64..2.0, s1 in 0.0f64..2.0, a2 in 0.0f64..2.0,
                                   s2 in 0.0f64..2.0, wa in 0.0f64..3.0, wb in 0.0f64..3.0,
                                   seed in any::<u64>()) {
            let (eig, _) = random_problem(12, 20, seed);
            let ev = eig.eigenvalues();
            let lhs = spectrum_only(ev, 0.05, wa * a1 + wb * a2, wa * s1 + wb * s2).unwrap();
            let rhs = wa * spectrum_only(ev, 0.05, a1, s1).unwrap()
                + wb * spectrum_only(ev, 0.05, a2, s2).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1e-300) + 1e-15);
        }

        #[test]
        fn regime_ratio_decreasing(seed in any::<u64>()) {
            let (eig, _) = random_problem(10, 30, seed);
            let mut prev = f64::INFINITY;
            for k in 0..30 {
                let lambda = 10f64.powf(-4.0 + 0.2 * k as f64);
                let r = regime_ratio(eig.eigenvalues(), lambda, 2.0).unwrap().ratio;
                prop_assert!(r <= prev * (1.0 + 1e-12));
                prop_assert!(r >= 1.0 - 1e-12);
                prev = r;
            }
        }

        #[test]
        fn fit_never_worse_than_origin(obs in prop::collection::vec(
            (0.0f64..2.0, 0.0f64..2.0, 0.0f64..2.0), 2..12)) {
            let obs: Vec<SpecObservation> = obs.into_iter().map(|(s, n, r)| SpecObservation {
                terms: SpectrumTerms { signal: s, noise: n }, observed: r }).collect();
            let fit = fit_spec_params(&obs).unwrap();
            let origin = obs.iter().map(|o| o.observed.powi(2)).sum::<f64>() / obs.len() as f64;
            prop_assert!(fit.alpha2 >= 0.0 && fit.sigma2 >= 0.0);
            prop_assert!(fit.mse <= origin + 1e-15);
            if obs.iter().any(|o| o.observed > 0.0 && (o.terms.signal > 0.0 || o.terms.noise > 0.0)) {
                prop_assert!(fit.mse < origin);
            }
        }
    }
}
