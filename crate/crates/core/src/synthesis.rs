//! Synthetic Gaussian instances with power-law spectrum and alignment.
//!
//! Populations live in their own eigenbasis, so `Σ = diag(λ)`, `v_i = e_i`
//! and `a_i = β_i²`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ridge_path::LabelMatrix;
use crate::rmt::PopulationModel;
use crate::spectral::{gram_from_features, GramMatrix};

const FEATURE_STREAM: u64 = 0;
const SIGN_STREAM: u64 = 1;
const HOLDOUT_STREAM: u64 = 2;
const ROTATION_STREAM: u64 = 3;

/// `λ_i ∝ i^{−1−γ}` with `Σλ_i = 1`, `a_i ∝ i^{−δ}` with `Σλ_i a_i + σ² = 1`.
pub fn make_population(p: usize, gamma: f64, delta: f64, sigma2: f64) -> Result<PopulationModel> {
    if p == 0 {
        return Err(Error::input("population needs p ≥ 1"));
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::input(format!(
            "eigendecay exponent must be finite and ≥ 0, got {gamma}"
        )));
    }
    if !(delta < 1.0) || !delta.is_finite() {
        return Err(Error::input(format!(
            "alignment exponent must be finite and < 1, got {delta}"
        )));
    }
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(Error::input(format!(
            "noise variance must be finite and ≥ 0, got {sigma2}"
        )));
    }
    if sigma2 >= 1.0 {
        return Err(Error::input(format!(
            "noise variance {sigma2} leaves no room for signal under E[y²] = 1"
        )));
    }
    let raw: Vec<f64> = (1..=p).map(|i| (i as f64).powf(-1.0 - gamma)).collect();
    let total: f64 = raw.iter().sum();
    let eigenvalues: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let shape: Vec<f64> = (1..=p).map(|i| (i as f64).powf(-delta)).collect();
    let power: f64 = eigenvalues.iter().zip(&shape).map(|(l, a)| l * a).sum();
    let scale = (1.0 - sigma2) / power;
    let alignment = shape.iter().map(|a| a * scale).collect();
    PopulationModel::new(eigenvalues, alignment, sigma2)?.into_normalized()
}

/// Covariate law: `x_j = √λ_j · w_j · z_j` with `z_j` standard normal.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Covariates {
    /// `w_j = 1`.
    #[default]
    Gaussian,
    /// `w_j² ∈ {1 − spread, 1 + spread}` with equal probability, so the
    /// covariance is unchanged and the entries stay sub-Gaussian.
    ScaleMixture { spread: f64 },
}

impl Covariates {
    fn validate(&self) -> Result<()> {
        match *self {
            Covariates::Gaussian => Ok(()),
            Covariates::ScaleMixture { spread } if (0.0..1.0).contains(&spread) => Ok(()),
            Covariates::ScaleMixture { spread } => Err(Error::input(format!(
                "scale-mixture spread must lie in [0, 1), got {spread}"
            ))),
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        match *self {
            Covariates::Gaussian => z,
            Covariates::ScaleMixture { spread } => {
                let w2 = if rng.random::<bool>() {
                    1.0 + spread
                } else {
                    1.0 - spread
                };
                w2.sqrt() * z
            }
        }
    }
}

/// Ground-truth coefficients `β_i = ±√a_i`, signs fixed by `seed`.
pub fn ground_truth(pop: &PopulationModel, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, SIGN_STREAM);
    pop.alignment()
        .iter()
        .map(|a| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sign * a.sqrt()
        })
        .collect()
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Row generator: each row draws its `p` covariates, then its noise.
///
/// Consuming `n` rows in any chunking yields the same sequence, so smaller
/// samples from one seed are prefixes of larger ones.
pub struct RowSampler<'a> {
    pop: &'a PopulationModel,
    beta: Vec<f64>,
    scales: Vec<f64>,
    noise_sd: f64,
    covariates: Covariates,
    rng: ChaCha8Rng,
}

/// One block of rows from a [`RowSampler`].
#[derive(Debug, Clone)]
pub struct RowChunk {
    pub features: DMatrix<f64>,
    pub labels: Vec<f64>,
    pub noise: Vec<f64>,
}

impl<'a> RowSampler<'a> {
    fn new(
        pop: &'a PopulationModel,
        beta: Vec<f64>,
        covariates: Covariates,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        covariates.validate()?;
        Ok(Self {
            pop,
            beta,
            scales: pop.eigenvalues().iter().map(|l| l.sqrt()).collect(),
            noise_sd: pop.noise_var().sqrt(),
            covariates,
            rng,
        })
    }

    /// Training rows for `seed`.
    pub fn training(pop: &'a PopulationModel, seed: u64, covariates: Covariates) -> Result<Self> {
        Self::new(
            pop,
            ground_truth(pop, seed),
            covariates,
            stream(seed, FEATURE_STREAM),
        )
    }

    /// Fresh rows sharing the training ground truth, independent of it.
    pub fn holdout(pop: &'a PopulationModel, seed: u64, covariates: Covariates) -> Result<Self> {
        Self::new(
            pop,
            ground_truth(pop, seed),
            covariates,
            stream(seed, HOLDOUT_STREAM),
        )
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn population(&self) -> &PopulationModel {
        self.pop
    }

    pub fn next_chunk(&mut self, rows: usize) -> RowChunk {
        let p = self.pop.dim();
        let mut features = DMatrix::zeros(rows, p);
        let mut labels = Vec::with_capacity(rows);
        let mut noise = Vec::with_capacity(rows);
        let mut row = vec![0.0; p];
        for i in 0..rows {
            for (j, x) in row.iter_mut().enumerate() {
                *x = self.scales[j] * self.covariates.draw(&mut self.rng);
            }
            let xi = if self.noise_sd > 0.0 {
                self.noise_sd * self.rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let signal: f64 = row.iter().zip(&self.beta).map(|(x, b)| x * b).sum();
            for (j, x) in row.iter().enumerate() {
                features[(i, j)] = *x;
            }
            labels.push(signal + xi);
            noise.push(xi);
        }
        RowChunk {
            features,
            labels,
            noise,
        }
    }
}

/// A sampled dataset `y = Xβ + ξ` together with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticInstance {
    features: DMatrix<f64>,
    labels: Vec<f64>,
    beta: Vec<f64>,
    noise: Vec<f64>,
    noise_var: f64,
    seed: u64,
}

impl SyntheticInstance {
    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn p(&self) -> usize {
        self.features.ncols()
    }

    pub fn label_matrix(&self) -> Result<LabelMatrix> {
        LabelMatrix::from_vector(&self.labels)
    }

    /// `XXᵀ`.
    pub fn gram(&self) -> Result<GramMatrix> {
        gram_from_features(&self.features)
    }

    /// `N⁻¹ Σ‖x_i‖²`.
    pub fn second_moment_trace(&self) -> f64 {
        self.features.norm_squared() / self.n() as f64
    }
}

/// Draw `n` Gaussian rows from `pop`.
pub fn sample_instance(pop: &PopulationModel, n: usize, seed: u64) -> Result<SyntheticInstance> {
    sample_instance_with(pop, n, seed, Covariates::Gaussian)
}

pub fn sample_instance_with(
    pop: &PopulationModel,
    n: usize,
    seed: u64,
    covariates: Covariates,
) -> Result<SyntheticInstance> {
    if n == 0 {
        return Err(Error::input("instance needs n ≥ 1"));
    }
    let mut sampler = RowSampler::training(pop, seed, covariates)?;
    let chunk = sampler.next_chunk(n);
    Ok(SyntheticInstance {
        features: chunk.features,
        labels: chunk.labels,
        beta: sampler.beta,
        noise: chunk.noise,
        noise_var: pop.noise_var(),
        seed,
    })
}

/// Absorb the noise into an extra feature: `x′ = [x; t^{1/2}ξ]`, `β′ = [β; t^{−1/2}]`.
///
/// Labels are kept as they are; the returned instance is noiseless.
pub fn embed_noise(instance: &SyntheticInstance, t: f64) -> Result<SyntheticInstance> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::input(format!(
            "embedding scale must be finite and > 0, got {t}"
        )));
    }
    let (n, p) = instance.features.shape();
    let root = t.sqrt();
    let mut features = instance.features.clone().resize_horizontally(p + 1, 0.0);
    for i in 0..n {
        features[(i, p)] = root * instance.noise[i];
    }
    let mut beta = instance.beta.clone();
    beta.push(1.0 / root);
    Ok(SyntheticInstance {
        features,
        labels: instance.labels.clone(),
        beta,
        noise: vec![0.0; n],
        noise_var: 0.0,
        seed: instance.seed,
    })
}

/// Haar-distributed orthogonal matrix from the QR factors of a Gaussian matrix.
pub fn random_orthogonal(p: usize, seed: u64) -> Result<DMatrix<f64>> {
    if p == 0 {
        return Err(Error::input("rotation needs p ≥ 1"));
    }
    let mut rng = stream(seed, ROTATION_STREAM);
    let g = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..p {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// `X ↦ XQ`, `β ↦ Qᵀβ`; labels are unchanged.
pub fn rotate(instance: &SyntheticInstance, q: &DMatrix<f64>) -> Result<SyntheticInstance> {
    let p = instance.p();
    if q.shape() != (p, p) {
        return Err(Error::input(format!(
            "rotation is {}×{}, instance has p={p}",
            q.nrows(),
            q.ncols()
        )));
    }
    let beta = q.transpose() * DVector::from_column_slice(&instance.beta);
    Ok(SyntheticInstance {
        features: &instance.features * q,
        labels: instance.labels.clone(),
        beta: beta.iter().copied().collect(),
        noise: instance.noise.clone(),
        noise_var: instance.noise_var,
        seed: instance.seed,
    })
}
