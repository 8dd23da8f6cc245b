//! Population-side random-matrix quantities: the effective regularization κ,
//! the omniscient risk estimate, and the empirical MP-consistency curves.

use crate::error::{Error, Result};
use crate::predictors::hat_kappa;
use crate::ridge_path::{LabelMatrix, LambdaGrid, SpectralProblem};
use crate::spectral::EigenSystem;

/// Fixed-point residual accepted on return from [`solve_kappa`].
pub const KAPPA_RESIDUAL_TOLERANCE: f64 = 1e-12;
const MAX_SOLVER_ITERATIONS: usize = 200;
const NORMALIZATION_TOLERANCE: f64 = 1e-10;

/// Second-moment spectrum, alignment of the ground truth, and label noise.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationModel {
    eigenvalues: Vec<f64>,
    alignment: Vec<f64>,
    noise_var: f64,
    normalized: bool,
}

impl PopulationModel {
    /// `eigenvalues` must be descending and nonnegative; `alignment[i] = (βᵀv_i)²`.
    pub fn new(eigenvalues: Vec<f64>, alignment: Vec<f64>, noise_var: f64) -> Result<Self> {
        if eigenvalues.len() != alignment.len() {
            return Err(Error::input(format!(
                "population has {} eigenvalues but {} alignment coefficients",
                eigenvalues.len(),
                alignment.len()
            )));
        }
        if eigenvalues.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::input(
                "population eigenvalues must be finite and nonnegative",
            ));
        }
        if eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::input(
                "population eigenvalues must be sorted descending",
            ));
        }
        if alignment.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(Error::input(
                "alignment coefficients must be finite and nonnegative",
            ));
        }
        if !(noise_var >= 0.0) || !noise_var.is_finite() {
            return Err(Error::input(
                "noise variance must be finite and nonnegative",
            ));
        }
        let pop = Self {
            eigenvalues,
            alignment,
            noise_var,
            normalized: false,
        };
        if !pop.signal_power().is_finite() {
            return Err(Error::input("signal power βᵀΣβ is not finite"));
        }
        Ok(pop)
    }

    /// Require `Tr Σ = 1` and `βᵀΣβ + σ² = 1`.
    pub fn into_normalized(mut self) -> Result<Self> {
        let tr = self.trace();
        let energy = self.signal_power() + self.noise_var;
        if (tr - 1.0).abs() > NORMALIZATION_TOLERANCE
            || (energy - 1.0).abs() > NORMALIZATION_TOLERANCE
        {
            return Err(Error::input(format!(
                "population is not normalized: Tr Σ = {tr}, E[y²] = {energy}"
            )));
        }
        self.normalized = true;
        Ok(self)
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn alignment(&self) -> &[f64] {
        &self.alignment
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    /// `βᵀΣβ = Σ λ_i a_i`.
    pub fn signal_power(&self) -> f64 {
        self.eigenvalues
            .iter()
            .zip(&self.alignment)
            .map(|(l, a)| l * a)
            .sum()
    }

    fn nonzero_count(&self) -> usize {
        self.eigenvalues.iter().filter(|&&v| v > 0.0).count()
    }
}

/// Solution of the κ fixed point at one (λ, n).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveReg {
    pub kappa: f64,
    pub dkappa_dlambda: f64,
    pub lambda: f64,
    pub n: usize,
    /// `|1 − λ/κ − n⁻¹ Σ λ_i/(κ+λ_i)|` at the returned κ.
    pub solver_residual: f64,
    /// λ = 0 with at most n nonzero eigenvalues: the limit is κ = 0.
    pub underdetermined: bool,
    pub iterations: usize,
}

/// `n⁻¹ Σ λ_i/(κ+λ_i)` and `n⁻¹ Σ λ_i/(κ+λ_i)²`.
fn spectral_sums(eigenvalues: &[f64], kappa: f64, n: f64) -> (f64, f64) {
    let (mut s1, mut s2) = (0.0, 0.0);
    for &l in eigenvalues {
        let d = kappa + l;
        s1 += l / d;
        s2 += l / (d * d);
    }
    (s1 / n, s2 / n)
}

/// `n⁻¹ Σ λ_i²/(κ+λ_i)²`.
fn squared_ratio_sum(eigenvalues: &[f64], kappa: f64, n: f64) -> f64 {
    eigenvalues
        .iter()
        .map(|&l| (l / (kappa + l)).powi(2))
        .sum::<f64>()
        / n
}

// Double-double arithmetic for the Newton polish. The root sits where terms
// of size κ cancel, so plain f64 evaluation leaves κ a few ulps off.
type Dd = (f64, f64);

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn dd_add(a: Dd, b: Dd) -> Dd {
    let (s, e) = two_sum(a.0, b.0);
    let (hi, lo) = two_sum(s, e + a.1 + b.1);
    two_sum(hi, lo)
}

fn dd_mul_f64(a: Dd, b: f64) -> Dd {
    let p = a.0 * b;
    let e = a.0.mul_add(b, -p) + a.1 * b;
    two_sum(p, e)
}

fn dd_div(a: Dd, b: Dd) -> Dd {
    let q1 = a.0 / b.0;
    let r = dd_add(a, {
        let p = dd_mul_f64(b, q1);
        (-p.0, -p.1)
    });
    let q2 = r.0 / b.0;
    two_sum(q1, q2)
}

/// `G(κ) = κ − λ − n⁻¹ Σ λ_i κ/(κ+λ_i)` in double-double precision.
fn scaled_residual(eigenvalues: &[f64], kappa: f64, lambda: f64, n: f64) -> f64 {
    let mut sum: Dd = (0.0, 0.0);
    for &l in eigenvalues {
        let num = dd_mul_f64((l, 0.0), kappa);
        sum = dd_add(sum, dd_div(num, two_sum(kappa, l)));
    }
    let mean = dd_div(sum, (n, 0.0));
    let g = dd_add(two_sum(kappa, -lambda), (-mean.0, -mean.1));
    g.0 + g.1
}

/// Solve `1 = λ/κ + n⁻¹ Σ λ_i/(κ+λ_i)` for the unique positive κ.
///
/// The root is bracketed by `[λ, λ + Tr Σ / n]`. Bisection shrinks the bracket
/// to 1e-3 relative width, then safeguarded Newton polishes the residual. For
/// λ = 0 the λ/κ term is dropped; a positive root exists only when Σ has more
/// than n nonzero eigenvalues.
pub fn solve_kappa(pop: &PopulationModel, lambda: f64, n: usize) -> Result<EffectiveReg> {
    if n == 0 {
        return Err(Error::input("κ needs n ≥ 1"));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::input(format!("κ needs finite λ ≥ 0, got {lambda}")));
    }
    let ev = pop.eigenvalues();
    let nf = n as f64;
    let trace = pop.trace();
    let residual = |k: f64| {
        let (s1, _) = spectral_sums(ev, k, nf);
        let explicit = if lambda > 0.0 { lambda / k } else { 0.0 };
        1.0 - explicit - s1
    };
    let derivative = |kappa: f64| 1.0 / (1.0 - squared_ratio_sum(ev, kappa, nf));

    if lambda == 0.0 && pop.nonzero_count() <= n {
        let kappa = 0.0;
        let s = pop.nonzero_count() as f64 / nf;
        return Ok(EffectiveReg {
            kappa,
            dkappa_dlambda: 1.0 / (1.0 - s),
            lambda,
            n,
            solver_residual: 0.0,
            underdetermined: true,
            iterations: 0,
        });
    }
    if trace == 0.0 {
        return Ok(EffectiveReg {
            kappa: lambda,
            dkappa_dlambda: 1.0,
            lambda,
            n,
            solver_residual: 0.0,
            underdetermined: false,
            iterations: 0,
        });
    }

    let mut hi = lambda + trace / nf;
    let mut lo = lambda;
    let mut iterations = 0;
    if lambda == 0.0 {
        // Walk down until the residual turns negative.
        lo = hi;
        while residual(lo) >= 0.0 {
            hi = lo;
            lo *= 0.5;
            iterations += 1;
            if iterations > MAX_SOLVER_ITERATIONS || lo == 0.0 {
                return Err(Error::numerical(format!(
                    "κ(0, {n}): no sign change found above {lo:e}"
                )));
            }
        }
    }
    let (r_lo, r_hi) = (residual(lo), residual(hi));
    if r_lo > 0.0 || r_hi < 0.0 {
        if r_lo.abs() <= KAPPA_RESIDUAL_TOLERANCE || r_hi.abs() <= KAPPA_RESIDUAL_TOLERANCE {
            // A bracket endpoint is (numerically) the root itself.
            let kappa = if r_lo.abs() <= r_hi.abs() { lo } else { hi };
            return Ok(finish(
                kappa,
                lambda,
                n,
                residual(kappa).abs(),
                derivative(kappa),
                iterations,
            ));
        }
        return Err(Error::numerical(format!(
            "κ bracket [{lo:e}, {hi:e}] has residuals {r_lo:e}, {r_hi:e} without a sign change"
        )));
    }

    while hi - lo > 1e-3 * hi {
        let mid = 0.5 * (lo + hi);
        if residual(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
        if iterations >= MAX_SOLVER_ITERATIONS {
            return Err(Error::numerical(format!(
                "κ bisection did not reach 1e-3 width: bracket [{lo:e}, {hi:e}]"
            )));
        }
    }

    // Newton on G(κ) = κ·F(κ) = κ − λ − n⁻¹ Σ λ_i κ/(κ+λ_i), whose slope is
    // 1 − n⁻¹ Σ λ_i²/(κ+λ_i)² = 1/(∂κ/∂λ) > 0. Steps leaving the bracket fall
    // back to bisection.
    let mut kappa = 0.5 * (lo + hi);
    let mut best = (f64::INFINITY, kappa);
    while iterations < MAX_SOLVER_ITERATIONS {
        iterations += 1;
        let g = scaled_residual(ev, kappa, lambda, nf);
        let r = g / kappa;
        if r.abs() < best.0 {
            best = (r.abs(), kappa);
        }
        if g == 0.0 {
            break;
        }
        if g < 0.0 {
            lo = kappa;
        } else {
            hi = kappa;
        }
        let slope = 1.0 - squared_ratio_sum(ev, kappa, nf);
        let mut next = kappa - g / slope;
        if !(next >= lo && next <= hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - kappa).abs() <= 2.0 * f64::EPSILON * kappa {
            let r = scaled_residual(ev, next, lambda, nf) / next;
            if r.abs() < best.0 {
                best = (r.abs(), next);
            }
            break;
        }
        kappa = next;
    }
    let (res, kappa) = best;
    if res > KAPPA_RESIDUAL_TOLERANCE {
        return Err(Error::numerical(format!(
            "κ solver stalled at residual {res:e} after {iterations} iterations (bracket [{lo:e}, {hi:e}], λ={lambda:e}, n={n})"
        )));
    }
    Ok(finish(kappa, lambda, n, res, derivative(kappa), iterations))
}

fn finish(kappa: f64, lambda: f64, n: usize, res: f64, dk: f64, iterations: usize) -> EffectiveReg {
    EffectiveReg {
        kappa,
        dkappa_dlambda: dk,
        lambda,
        n,
        solver_residual: res,
        underdetermined: false,
        iterations,
    }
}

/// `∂κ/∂λ · κ² · Σ λ_i a_i/(κ+λ_i)²`.
pub fn omniscient_risk(pop: &PopulationModel, lambda: f64, n: usize) -> Result<f64> {
    let reg = solve_kappa(pop, lambda, n)?;
    Ok(omniscient_from(pop, &reg))
}

/// Noisy-label variant: `R_omni + ∂κ/∂λ · σ²`.
pub fn omniscient_risk_noisy(pop: &PopulationModel, lambda: f64, n: usize) -> Result<f64> {
    let reg = solve_kappa(pop, lambda, n)?;
    Ok(omniscient_from(pop, &reg) + reg.dkappa_dlambda * pop.noise_var())
}

/// Omniscient estimate from an already solved κ.
pub fn omniscient_from(pop: &PopulationModel, reg: &EffectiveReg) -> f64 {
    let k = reg.kappa;
    let bias: f64 = pop
        .eigenvalues()
        .iter()
        .zip(pop.alignment())
        .filter(|(l, a)| **l > 0.0 && **a > 0.0)
        .map(|(l, a)| l * a / (k + l).powi(2))
        .sum();
    reg.dkappa_dlambda * k * k * bias
}

/// One point `(κ̂(λ), f(λ)·κ̂(λ))` with `f = yᵀ(XXᵀ + nλI)⁻¹y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub lambda: f64,
    pub kappa_hat: f64,
    pub f: f64,
    pub f_times_kappa: f64,
}

/// Points sorted by κ̂ ascending.
pub fn mp_consistency_curves(
    eig: &EigenSystem,
    y: &LabelMatrix,
    grid: &LambdaGrid,
) -> Result<Vec<CurvePoint>> {
    if grid.n() != eig.n() {
        return Err(Error::input(format!(
            "lambda grid resolved for n={}, eigensystem has n={}",
            grid.n(),
            eig.n()
        )));
    }
    let problem = SpectralProblem::new(eig, y)?;
    let mut points = grid
        .resolved()
        .iter()
        .map(|&lambda| {
            let kappa_hat = hat_kappa(eig.eigenvalues(), lambda)?;
            let f = problem.quadratic_form(lambda);
            Ok(CurvePoint {
                lambda,
                kappa_hat,
                f,
                f_times_kappa: f * kappa_hat,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    points.sort_by(|a, b| a.kappa_hat.total_cmp(&b.kappa_hat));
    Ok(points)
}

fn interpolate_log(curve: &[CurvePoint], x: f64) -> f64 {
    let lx = x.ln();
    let idx = curve.partition_point(|p| p.kappa_hat < x);
    if idx == 0 {
        return curve[0].f_times_kappa;
    }
    if idx == curve.len() {
        return curve[curve.len() - 1].f_times_kappa;
    }
    let (a, b) = (&curve[idx - 1], &curve[idx]);
    let (la, lb) = (a.kappa_hat.ln(), b.kappa_hat.ln());
    if lb == la {
        return b.f_times_kappa;
    }
    let t = (lx - la) / (lb - la);
    a.f_times_kappa + t * (b.f_times_kappa - a.f_times_kappa)
}

/// Largest gap between curves over their shared κ̂ range, relative to the largest curve value.
///
/// Curves are interpolated linearly in log κ̂; the sup of a difference of
/// piecewise-linear functions is attained at a knot, so evaluating at every
/// knot inside the shared range (plus its endpoints) is exact.
pub fn curve_coincidence(curves: &[Vec<CurvePoint>]) -> Result<f64> {
    if curves.len() < 2 {
        return Err(Error::input("coincidence needs at least two curves"));
    }
    if curves.iter().any(|c| c.is_empty()) {
        return Err(Error::input("coincidence curves must be non-empty"));
    }
    if curves.iter().flatten().any(|p| !(p.kappa_hat > 0.0)) {
        return Err(Error::input("coincidence needs κ̂ > 0"));
    }
    let lo = curves
        .iter()
        .map(|c| c[0].kappa_hat)
        .fold(f64::NEG_INFINITY, f64::max);
    let hi = curves
        .iter()
        .map(|c| c[c.len() - 1].kappa_hat)
        .fold(f64::INFINITY, f64::min);
    if !(lo <= hi) {
        return Err(Error::input(format!(
            "curves share no κ̂ range (lower {lo:e} > upper {hi:e})"
        )));
    }
    let scale = curves
        .iter()
        .flatten()
        .map(|p| p.f_times_kappa.abs())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        return Ok(0.0);
    }
    let mut knots: Vec<f64> = curves
        .iter()
        .flatten()
        .map(|p| p.kappa_hat)
        .filter(|&k| k >= lo && k <= hi)
        .collect();
    knots.extend([lo, hi]);
    let mut worst = 0.0f64;
    for &x in &knots {
        let vals: Vec<f64> = curves.iter().map(|c| interpolate_log(c, x)).collect();
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        worst = worst.max(max - min);
    }
    Ok(worst / scale)
}
