//! Scaling-law exponents: eigendecay γ, alignment δ, predicted rate α̂ = γ̂ + δ̂,
//! and the observed rate of optimally tuned ridge.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ridge_path::{LabelMatrix, LambdaGrid, SpectralProblem, RANK_TOLERANCE};
use crate::spectral::EigenSystem;

/// Fraction of the log-κ̂ range trimmed from each end before the δ regression.
pub const DELTA_WINDOW_TRIM: f64 = 0.2;

/// OLS line through `(ln x, ln y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope; `None` with fewer than three points.
    pub slope_se: Option<f64>,
    pub points: usize,
}

pub fn log_log_fit(points: &[(f64, f64)]) -> Result<LogLogFit> {
    if let Some(&(x, y)) = points
        .iter()
        .find(|(x, y)| !(*x > 0.0 && *y > 0.0) || !x.is_finite() || !y.is_finite())
    {
        return Err(Error::input(format!(
            "log-log fit needs positive finite values, got ({x}, {y})"
        )));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    ols(&logs)
}

fn ols(points: &[(f64, f64)]) -> Result<LogLogFit> {
    let m = points.len();
    if m < 2 {
        return Err(Error::input(format!(
            "slope fit needs at least 2 points, got {m}"
        )));
    }
    let mf = m as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / mf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / mf;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::input(
            "slope fit needs at least two distinct abscissae",
        ));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = (m > 2).then(|| {
        let rss: f64 = points
            .iter()
            .map(|p| (p.1 - intercept - slope * p.0).powi(2))
            .sum();
        (rss / (mf - 2.0) / sxx).sqrt()
    });
    Ok(LogLogFit {
        slope,
        intercept,
        slope_se,
        points: m,
    })
}

/// `N⁻¹ Tr((XXᵀ)⁻¹) = N⁻¹ Σ_i 1/(N λ̂_i)`.
pub fn trace_inverse_gram(eig: &EigenSystem) -> Result<f64> {
    let n = eig.n() as f64;
    let floor = RANK_TOLERANCE * eig.top();
    let ev = eig.eigenvalues();
    let zeros = ev.iter().filter(|&&v| v <= floor).count();
    if zeros > 0 || eig.top() == 0.0 {
        return Err(Error::input(format!(
            "Gram matrix is rank deficient ({zeros} of {} eigenvalues at or below {floor:e}); \
             the trace of its inverse needs more features than samples",
            ev.len()
        )));
    }
    Ok(ev.iter().map(|v| 1.0 / (n * v)).sum::<f64>() / n)
}

/// Mean of the values recorded at each `n`, the form every exponent fit consumes.
pub fn average_by_n(samples: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let mut groups: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for &(n, v) in samples {
        let e = groups.entry(n).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    groups
        .into_iter()
        .map(|(n, (s, c))| (n, s / c as f64))
        .collect()
}

/// OLS fit of `ln(trace)` against `ln N`; the slope is γ̂.
///
/// Repeated sample sizes are averaged before the log.
pub fn fit_gamma(samples: &[(usize, f64)]) -> Result<LogLogFit> {
    let averaged = average_by_n(samples);
    if averaged.len() < 3 {
        return Err(Error::input(format!(
            "γ̂ needs at least 3 distinct sample sizes, got {}",
            averaged.len()
        )));
    }
    if let Some((n, v)) = averaged.iter().find(|(_, v)| !(*v > 0.0)) {
        return Err(Error::input(format!(
            "trace value at n={n} is not positive: {v}"
        )));
    }
    let points: Vec<(f64, f64)> = averaged.iter().map(|&(n, v)| (n as f64, v)).collect();
    log_log_fit(&points)
}

pub fn estimate_gamma(samples: &[(usize, f64)]) -> Result<f64> {
    fit_gamma(samples).map(|f| f.slope)
}

/// `(λ, yᵀ(XXᵀ + nλI)⁻¹y)` along the grid, summed over classes.
pub fn quadratic_form_path(
    eig: &EigenSystem,
    y: &LabelMatrix,
    grid: &LambdaGrid,
) -> Result<Vec<(f64, f64)>> {
    if grid.n() != eig.n() {
        return Err(Error::input(format!(
            "lambda grid resolved for n={}, eigensystem has n={}",
            grid.n(),
            eig.n()
        )));
    }
    let problem = SpectralProblem::new(eig, y)?;
    Ok(grid
        .resolved()
        .iter()
        .map(|&l| (l, problem.quadratic_form(l)))
        .collect())
}

/// Pair `q` and `κ̂` by λ and keep the middle of the log-κ̂ range.
fn delta_window(q_path: &[(f64, f64)], kappa_path: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    if q_path.len() != kappa_path.len() {
        return Err(Error::input(format!(
            "q path has {} points, κ̂ path has {}",
            q_path.len(),
            kappa_path.len()
        )));
    }
    let mut pairs = Vec::with_capacity(q_path.len());
    for (&(lq, q), &(lk, k)) in q_path.iter().zip(kappa_path) {
        if lq != lk {
            return Err(Error::input(format!(
                "paths disagree on λ: {lq:e} vs {lk:e}"
            )));
        }
        if !(q > 0.0 && k > 0.0) {
            return Err(Error::input(format!(
                "δ̂ needs q, κ̂ > 0; got q={q}, κ̂={k} at λ={lq:e}"
            )));
        }
        pairs.push((k.ln(), q.ln()));
    }
    if pairs.is_empty() {
        return Err(Error::input("δ̂ needs a nonempty path"));
    }
    let lo = pairs.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = pairs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let (a, b) = (
        lo + DELTA_WINDOW_TRIM * (hi - lo),
        hi - DELTA_WINDOW_TRIM * (hi - lo),
    );
    Ok(pairs.into_iter().filter(|p| p.0 >= a && p.0 <= b).collect())
}

/// δ̂ fit over one or more `(q path, κ̂ path)` pairs, each windowed on its own.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaFit {
    pub delta: f64,
    /// Slope of `ln q` on `ln κ̂`.
    pub fit: LogLogFit,
}

pub fn fit_delta_pooled(
    paths: &[(Vec<(f64, f64)>, Vec<(f64, f64)>)],
    gamma_hat: f64,
) -> Result<DeltaFit> {
    let mut points = Vec::new();
    for (q, k) in paths {
        points.extend(delta_window(q, k)?);
    }
    if points.len() < 3 {
        return Err(Error::input(format!(
            "δ̂ fit window holds {} points, need at least 3",
            points.len()
        )));
    }
    let fit = ols(&points)?;
    Ok(DeltaFit {
        delta: 1.0 + fit.slope * (1.0 + gamma_hat),
        fit,
    })
}

/// `δ̂ = 1 + s(1 + γ̂)` with `s` the slope of `ln q` on `ln κ̂`.
pub fn estimate_delta(
    q_path: &[(f64, f64)],
    kappa_path: &[(f64, f64)],
    gamma_hat: f64,
) -> Result<f64> {
    fit_delta_pooled(&[(q_path.to_vec(), kappa_path.to_vec())], gamma_hat).map(|f| f.delta)
}

/// Values within this relative distance of the minimum count as ties.
const TIE_TOLERANCE: f64 = 1e-14;

/// Optimal point on one risk curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalPoint {
    pub lambda: f64,
    pub risk: f64,
    /// The minimizer sits at the first or last grid point.
    pub on_boundary: bool,
}

/// Grid argmin, preferring the smaller λ among ties. Input order is irrelevant.
pub fn optimal_point(curve: &[(f64, f64)]) -> Result<OptimalPoint> {
    if curve.is_empty() {
        return Err(Error::input("risk curve is empty"));
    }
    if curve.iter().any(|(l, r)| !l.is_finite() || !r.is_finite()) {
        return Err(Error::input("risk curve contains non-finite values"));
    }
    let mut sorted = curve.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let min = sorted.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let threshold = min + TIE_TOLERANCE * min.abs().max(f64::MIN_POSITIVE);
    let idx = sorted
        .iter()
        .position(|p| p.1 <= threshold)
        .expect("minimum is attained");
    Ok(OptimalPoint {
        lambda: sorted[idx].0,
        risk: sorted[idx].1,
        on_boundary: idx == 0 || idx + 1 == sorted.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub alpha_observed: f64,
    pub fit: LogLogFit,
    pub optimal: BTreeMap<usize, OptimalPoint>,
    /// Some λ*_N lies on a grid boundary; the grid is likely too narrow.
    pub boundary: bool,
}

/// `α_obs = −slope` of `ln r*(N)` against `ln N`, with `r*(N)` the grid minimum.
pub fn observed_rate(curves: &[(usize, Vec<(f64, f64)>)]) -> Result<RateEstimate> {
    let mut optimal = BTreeMap::new();
    for (n, curve) in curves {
        if curve.len() < 5 {
            return Err(Error::input(format!(
                "risk curve at n={n} has {} points, need at least 5",
                curve.len()
            )));
        }
        if optimal.insert(*n, optimal_point(curve)?).is_some() {
            return Err(Error::input(format!("sample size {n} appears twice")));
        }
    }
    if optimal.len() < 3 {
        return Err(Error::input(format!(
            "observed rate needs at least 3 sample sizes, got {}",
            optimal.len()
        )));
    }
    let points: Vec<(f64, f64)> = optimal.iter().map(|(&n, p)| (n as f64, p.risk)).collect();
    let fit = log_log_fit(&points)?;
    Ok(RateEstimate {
        alpha_observed: -fit.slope,
        fit,
        boundary: optimal.values().any(|p| p.on_boundary),
        optimal,
    })
}

/// Exponent estimates for one population or kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingEstimate {
    pub gamma_hat: f64,
    pub delta_hat: f64,
    pub alpha_hat: f64,
    pub alpha_observed: Option<f64>,
    pub per_n_lambda_star: BTreeMap<usize, f64>,
    pub boundary: bool,
    pub gamma_se: Option<f64>,
    pub delta_slope_se: Option<f64>,
    pub alpha_observed_se: Option<f64>,
}

impl ScalingEstimate {
    pub fn new(gamma: &LogLogFit, delta: &DeltaFit, rate: Option<&RateEstimate>) -> Self {
        Self {
            gamma_hat: gamma.slope,
            delta_hat: delta.delta,
            alpha_hat: gamma.slope + delta.delta,
            alpha_observed: rate.map(|r| r.alpha_observed),
            per_n_lambda_star: rate
                .map(|r| r.optimal.iter().map(|(&n, p)| (n, p.lambda)).collect())
                .unwrap_or_default(),
            boundary: rate.is_some_and(|r| r.boundary),
            gamma_se: gamma.slope_se,
            delta_slope_se: delta.fit.slope_se,
            alpha_observed_se: rate.and_then(|r| r.fit.slope_se),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{eigh, GramMatrix, GramScale};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn eig_of(k: DMatrix<f64>) -> EigenSystem {
        eigh(&GramMatrix::new(k, GramScale::Raw, 1e-12).unwrap()).unwrap()
    }

    #[test]
    fn trace_inverse_of_identity_and_scaled_identity() {
        let v = trace_inverse_gram(&eig_of(DMatrix::identity(5, 5))).unwrap();
        assert!((v - 1.0).abs() < 1e-14);
        let v = trace_inverse_gram(&eig_of(DMatrix::identity(2, 2) * 2.0)).unwrap();
        assert!((v - 0.5).abs() < 1e-14);
    }

    #[test]
    fn trace_inverse_rejects_rank_deficiency() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            trace_inverse_gram(&eig_of(k)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn gamma_from_exact_power_laws() {
        let ns = [64usize, 128, 256, 512, 1024];
        let flat: Vec<_> = ns.iter().map(|&n| (n, 3.0)).collect();
        assert!(estimate_gamma(&flat).unwrap().abs() < 1e-12);
        let pl: Vec<_> = ns
            .iter()
            .map(|&n| (n, 2.5 * (n as f64).powf(0.7)))
            .collect();
        assert!((estimate_gamma(&pl).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn gamma_needs_three_sizes_and_positive_values() {
        assert!(matches!(
            estimate_gamma(&[(1, 1.0), (2, 2.0), (2, 2.0)]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            estimate_gamma(&[(1, 1.0), (2, 0.0), (3, 2.0)]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn seeds_are_averaged_before_the_log() {
        // Arithmetic means 2, 4, 8 give slope 1 exactly; geometric means would not.
        let samples = [(1, 1.0), (1, 3.0), (2, 2.0), (2, 6.0), (4, 4.0), (4, 12.0)];
        assert!((estimate_gamma(&samples).unwrap() - 1.0).abs() < 1e-12);
    }

    fn kappa_grid() -> Vec<(f64, f64)> {
        (0..24)
            .map(|i| (1e-6 * 1.5f64.powi(i), 1e-3 * 1.3f64.powi(i)))
            .collect()
    }

    #[test]
    fn delta_boundary_cases() {
        let k = kappa_grid();
        let flat: Vec<_> = k.iter().map(|&(l, _)| (l, 4.0)).collect();
        assert!((estimate_delta(&flat, &k, 0.37).unwrap() - 1.0).abs() < 1e-12);
        let inv: Vec<_> = k.iter().map(|&(l, kh)| (l, 2.0 / kh)).collect();
        assert!(estimate_delta(&inv, &k, 0.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn delta_window_needs_three_points() {
        let k = vec![(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)];
        let q = vec![(1.0, 1.0), (2.0, 0.5), (3.0, 0.3)];
        assert!(matches!(estimate_delta(&q, &k, 0.5), Err(Error::Input(_))));
        let mismatched = vec![(1.0, 1.0), (2.5, 0.5), (3.0, 0.3)];
        assert!(matches!(
            estimate_delta(&mismatched, &k, 0.5),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn observed_rate_exact_cases() {
        let ns = [64usize, 128, 256, 512];
        let curves: Vec<_> = ns
            .iter()
            .map(|&n| {
                let best = (n as f64).powf(-0.3);
                let curve = (0..7)
                    .map(|i| {
                        let l = 10f64.powi(i - 4);
                        (l, best * (1.0 + (i as f64 - 3.0).powi(2)))
                    })
                    .collect();
                (n, curve)
            })
            .collect();
        let rate = observed_rate(&curves).unwrap();
        assert!((rate.alpha_observed - 0.3).abs() < 1e-12);
        assert!(!rate.boundary);
        assert!(rate.optimal.values().all(|p| p.lambda == 1e-1));

        let constant: Vec<_> = ns
            .iter()
            .map(|&n| {
                (
                    n,
                    (0..5)
                        .map(|i| (i as f64 + 1.0, 0.2 + i as f64 * 0.01))
                        .collect(),
                )
            })
            .collect();
        let rate = observed_rate(&constant).unwrap();
        assert!(rate.alpha_observed.abs() < 1e-12);
        assert!(rate.boundary);
    }

    #[test]
    fn observed_rate_preconditions() {
        let short: Vec<_> = [1usize, 2, 3]
            .iter()
            .map(|&n| (n, vec![(1.0, 1.0); 4]))
            .collect();
        assert!(matches!(observed_rate(&short), Err(Error::Input(_))));
        let curve: Vec<_> = (0..5).map(|i| (i as f64 + 1.0, 1.0)).collect();
        let two = vec![(1usize, curve.clone()), (2, curve)];
        assert!(matches!(observed_rate(&two), Err(Error::Input(_))));
    }

    #[test]
    fn ties_prefer_smaller_lambda() {
        let curve = [(3.0, 0.5), (1.0, 0.5), (2.0, 0.7)];
        assert_eq!(optimal_point(&curve).unwrap().lambda, 1.0);
    }

    #[test]
    fn estimate_keeps_alpha_identity() {
        let g = LogLogFit {
            slope: 0.4,
            intercept: 0.0,
            slope_se: None,
            points: 3,
        };
        let d = DeltaFit {
            delta: 0.15,
            fit: g,
        };
        let est = ScalingEstimate::new(&g, &d, None);
        assert_eq!(est.alpha_hat, est.gamma_hat + est.delta_hat);
        assert!(est.per_n_lambda_star.is_empty());
    }

    proptest! {
        #[test]
        fn delta_inverts_exact_law(gamma in 0.0f64..2.0, delta in -1.0f64..0.99, c in 0.1f64..10.0) {
            let k = kappa_grid();
            let q: Vec<_> = k.iter().map(|&(l, kh)| (l, c * kh.powf(-(1.0 - delta) / (1.0 + gamma)))).collect();
            let est = estimate_delta(&q, &k, gamma).unwrap();
            prop_assert!((est - delta).abs() < 1e-10);
        }

        #[test]
        fn exponents_ignore_intercepts(scale in 1e-3f64..1e3, noise in proptest::collection::vec(-0.1f64..0.1, 24)) {
            let k = kappa_grid();
            let q: Vec<_> = k.iter().zip(&noise).map(|(&(l, kh), e)| (l, kh.powf(-0.4) * e.exp())).collect();
            let scaled: Vec<_> = q.iter().map(|&(l, v)| (l, v * scale)).collect();
            let a = estimate_delta(&q, &k, 0.5).unwrap();
            let b = estimate_delta(&scaled, &k, 0.5).unwrap();
            prop_assert!((a - b).abs() < 1e-10);

            let tr: Vec<_> = [16usize, 32, 64, 128, 256].iter().zip(&noise).map(|(&n, e)| (n, (n as f64).sqrt() * e.exp())).collect();
            let tr_scaled: Vec<_> = tr.iter().map(|&(n, v)| (n, v * scale)).collect();
            prop_assert!((estimate_gamma(&tr).unwrap() - estimate_gamma(&tr_scaled).unwrap()).abs() < 1e-10);
        }

        #[test]
        fn tiny_perturbations_keep_the_argmin(
            values in proptest::collection::vec(0.01f64..1.0, 5..30),
            eps in proptest::collection::vec(-1e-15f64..1e-15, 30),
        ) {
            let curve: Vec<_> = values.iter().enumerate().map(|(i, &r)| (i as f64 + 1.0, r)).collect();
            let best = optimal_point(&curve).unwrap();
            let perturbed: Vec<_> = curve
                .iter()
                .zip(&eps)
                .map(|(&(l, r), e)| if l == best.lambda { (l, r) } else { (l, r + e) })
                .collect();
            prop_assert_eq!(optimal_point(&perturbed).unwrap().lambda, best.lambda);
        }

        #[test]
        fn power_law_rate_recovered(alpha in -1.0f64..2.0, c in 0.01f64..10.0) {
            let curves: Vec<_> = [32usize, 64, 128, 256, 512]
                .iter()
                .map(|&n| {
                    let best = c * (n as f64).powf(-alpha);
                    (n, (0..6).map(|i| (i as f64 + 1.0, best * (1.0 + (i as f64 - 2.0).abs()))).collect())
                })
                .collect();
            prop_assert!((observed_rate(&curves).unwrap().alpha_observed - alpha).abs() < 1e-12);
        }
    }
}
