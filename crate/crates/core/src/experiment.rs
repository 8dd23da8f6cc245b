//! Experiment orchestration: one job per (n, seed), then the ensemble-level
//! spectrum fit, correlations, and the scaling pipeline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{self, ExperimentConfig, ReportMeta};
use crate::predictors::{
    fit_spec_params, hat_kappa, pearson, spectrum_terms, RiskReport, RiskRow, SpecFit,
    SpecObservation, SpectrumTerms,
};
use crate::ridge_path::{test_squared_error, LabelMatrix, SpectralProblem};
use crate::rmt::{
    curve_coincidence, mp_consistency_curves, omniscient_from, solve_kappa, CurvePoint,
    PopulationModel,
};
use crate::scaling::{self, ScalingEstimate};
use crate::spectral::{eigh, EigenSystem, GramMatrix};
use crate::synthesis::{make_population, sample_instance, Covariates, RowSampler};

/// Holdout rows generated per block in synthetic mode.
const HOLDOUT_CHUNK: usize = 256;
const PERMUTATION_STREAM: u64 = 7;

/// Where training and holdout data come from.
pub enum Source {
    Synthetic(PopulationModel),
    Kernel {
        gram: GramMatrix,
        labels: LabelMatrix,
    },
}

/// Training data for one job together with what its test risk needs.
struct Prepared {
    eig: EigenSystem,
    labels: LabelMatrix,
    test: TestData,
}

enum TestData {
    /// Primal features; holdout rows are streamed from the population.
    Features(DMatrix<f64>),
    /// Kernel between holdout and training rows, and holdout labels.
    Cross {
        cross: DMatrix<f64>,
        labels: LabelMatrix,
    },
}

impl Source {
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        match &config.kernel {
            Some(path) => {
                let (gram, labels) = io::read_kernel(path)?;
                // Labels are centered once over the whole file.
                Ok(Source::Kernel {
                    gram,
                    labels: io::center_labels(&labels),
                })
            }
            None => {
                let p = config
                    .population
                    .ok_or_else(|| Error::input("synthetic mode needs a population"))?;
                Ok(Source::Synthetic(make_population(
                    p.p, p.gamma, p.delta, p.sigma2,
                )?))
            }
        }
    }

    pub fn population(&self) -> Option<&PopulationModel> {
        match self {
            Source::Synthetic(pop) => Some(pop),
            Source::Kernel { .. } => None,
        }
    }

    /// Seeded permutation of a kernel file's rows. Its head is the holdout,
    /// training rows are taken in order from the rest.
    pub fn kernel_split(total: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(PERMUTATION_STREAM);
        let mut perm: Vec<usize> = (0..total).collect();
        perm.shuffle(&mut rng);
        perm
    }

    fn prepare(&self, n: usize, seed: u64, holdout: &io::Holdout) -> Result<Prepared> {
        match self {
            Source::Synthetic(pop) => {
                let inst = sample_instance(pop, n, seed)?;
                let eig = eigh(&inst.gram()?)?;
                Ok(Prepared {
                    eig,
                    labels: inst.label_matrix()?,
                    test: TestData::Features(inst.features().clone()),
                })
            }
            Source::Kernel { gram, labels } => {
                let total = gram.n();
                let m = holdout.rows_of(total);
                if m >= total || n > total - m {
                    return Err(Error::input(format!(
                        "kernel has {total} rows; {m} held out leaves {} for training, need {n}",
                        total.saturating_sub(m)
                    )));
                }
                let perm = Self::kernel_split(total, seed);
                let (test_idx, pool) = perm.split_at(m);
                let train = &pool[..n];
                let eig = eigh(&gram.select(train)?)?;
                let cross = DMatrix::from_fn(m, n, |i, j| gram.entries()[(test_idx[i], train[j])]);
                Ok(Prepared {
                    eig,
                    labels: labels.select_rows(train)?,
                    test: TestData::Cross {
                        cross,
                        labels: labels.select_rows(test_idx)?,
                    },
                })
            }
        }
    }
}

/// Per-job output, kept in job order.
struct JobResult {
    rows: Vec<RiskRow>,
    terms: Vec<Option<SpectrumTerms>>,
    trace_inverse: Option<f64>,
    q_path: Vec<(f64, f64)>,
    kappa_path: Vec<(f64, f64)>,
}

fn run_job(source: &Source, config: &ExperimentConfig, n: usize, seed: u64) -> Result<JobResult> {
    let holdout = config.holdout();
    let prep = source.prepare(n, seed, &holdout)?;
    let grid = io::build_lambda_grid(&prep.eig, &config.lambda0_grid)?;
    let problem = SpectralProblem::new(&prep.eig, &prep.labels)?;
    let fits = grid
        .resolved()
        .iter()
        .map(|&l| problem.fit(l))
        .collect::<Result<Vec<_>>>()?;

    let r_test: Vec<f64> = match &prep.test {
        TestData::Features(x) => {
            let pop = source
                .population()
                .expect("features come from a population");
            let mut coeffs = DMatrix::zeros(n, fits.len());
            for (j, fit) in fits.iter().enumerate() {
                coeffs.set_column(j, &fit.dual_coeffs.column(0));
            }
            let beta_hat = x.transpose() * coeffs;
            let m = match holdout {
                io::Holdout::Count(c) => c,
                io::Holdout::Fraction(_) => unreachable!("validated: synthetic holdout is a count"),
            };
            let mut sampler = RowSampler::holdout(pop, seed, Covariates::Gaussian)?;
            let mut sse = vec![0.0; fits.len()];
            let mut done = 0;
            while done < m {
                let rows = HOLDOUT_CHUNK.min(m - done);
                let chunk = sampler.next_chunk(rows);
                let pred = &chunk.features * &beta_hat;
                for (j, s) in sse.iter_mut().enumerate() {
                    *s += pred
                        .column(j)
                        .iter()
                        .zip(&chunk.labels)
                        .map(|(p, y)| (p - y).powi(2))
                        .sum::<f64>();
                }
                done += rows;
            }
            sse.into_iter().map(|s| s / m as f64).collect()
        }
        TestData::Cross { cross, labels } => fits
            .iter()
            .map(|fit| Ok(test_squared_error(fit, cross, labels.values())? / labels.n() as f64))
            .collect::<Result<_>>()?,
    };

    let ev = prep.eig.eigenvalues();
    let flags = config.predictors;
    let mut rows = Vec::with_capacity(grid.len());
    let mut terms = Vec::with_capacity(grid.len());
    let mut q_path = Vec::with_capacity(grid.len());
    let mut kappa_path = Vec::with_capacity(grid.len());
    for (j, (lambda0, lambda)) in grid.iter().enumerate() {
        let at = |e: Error| e.context(format!("λ={lambda:e}"));
        let kappa_hat = hat_kappa(ev, lambda).map_err(at)?;
        let (r_omni, r_omni_noisy) = match source.population() {
            Some(pop) => {
                let reg = solve_kappa(pop, lambda, n).map_err(at)?;
                let omni = omniscient_from(pop, &reg);
                (
                    Some(omni),
                    Some(omni + reg.dkappa_dlambda * pop.noise_var()),
                )
            }
            None => (None, None),
        };
        terms.push(if flags.spec {
            Some(spectrum_terms(ev, lambda).map_err(at)?)
        } else {
            None
        });
        q_path.push((lambda, problem.quadratic_form(lambda)));
        kappa_path.push((lambda, kappa_hat));
        rows.push(RiskRow {
            n,
            lambda0,
            lambda,
            seed,
            r_emp: problem.empirical_risk(lambda),
            r_test: Some(r_test[j]),
            gcv: flags.gcv.then(|| problem.gcv(lambda).value),
            kappa_hat,
            regime_ratio: kappa_hat / lambda,
            r_spec: None,
            r_norm: flags.norm.then(|| problem.norm_estimate(lambda)),
            r_omni,
            r_omni_noisy,
        });
    }
    Ok(JobResult {
        rows,
        terms,
        trace_inverse: scaling::trace_inverse_gram(&prep.eig).ok(),
        q_path,
        kappa_path,
    })
}

/// Pearson correlations of each predictor with the observed test risk.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Correlations {
    pub gcv: Option<f64>,
    pub spec: Option<f64>,
    pub norm: Option<f64>,
    pub omni: Option<f64>,
}

fn correlations<'a>(rows: impl Iterator<Item = &'a RiskRow> + Clone) -> Correlations {
    let pick = |f: fn(&RiskRow) -> Option<f64>| {
        let (xs, ys): (Vec<f64>, Vec<f64>) = rows
            .clone()
            .filter_map(|r| Some((f(r)?, r.r_test?)))
            .unzip();
        pearson(&xs, &ys)
    };
    Correlations {
        gcv: pick(|r| r.gcv),
        spec: pick(|r| r.r_spec),
        norm: pick(|r| r.r_norm),
        omni: pick(|r| r.r_omni_noisy),
    }
}

/// Ensemble-level results written next to the CSV.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub config_hash: String,
    pub mode: &'static str,
    pub rows: usize,
    pub spec_fit: Option<SpecFit>,
    pub correlations_all: Correlations,
    pub correlations_optimal: Correlations,
    pub scaling: Option<ScalingEstimate>,
    pub scaling_error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: RiskReport,
    pub meta: ReportMeta,
    pub summary: Summary,
}

fn average_paths(paths: &[&Vec<(f64, f64)>]) -> Vec<(f64, f64)> {
    let len = paths.iter().map(|p| p.len()).min().unwrap_or(0);
    let k = paths.len() as f64;
    (0..len)
        .map(|i| {
            let l = paths.iter().map(|p| p[i].0).sum::<f64>() / k;
            let v = paths.iter().map(|p| p[i].1).sum::<f64>() / k;
            (l, v)
        })
        .collect()
}

/// γ̂ from the trace law, δ̂ from the pooled `q`–κ̂ regression, and the
/// observed rate from seed-averaged risk curves. Seeds are averaged on the
/// value scale, index by index along the grid.
fn scaling_pipeline(jobs: &[((usize, u64), JobResult)]) -> Result<ScalingEstimate> {
    let mut by_n: BTreeMap<usize, Vec<&JobResult>> = BTreeMap::new();
    for ((n, _), job) in jobs {
        by_n.entry(*n).or_default().push(job);
    }
    if by_n.len() < 3 {
        return Err(Error::input(format!(
            "scaling needs at least 3 sample sizes, got {}",
            by_n.len()
        )));
    }
    let mut traces = Vec::new();
    for ((n, seed), job) in jobs {
        let t = job.trace_inverse.ok_or_else(|| {
            Error::input(format!(
                "n={n} seed={seed}: Gram matrix is rank deficient, γ̂ needs more features than samples"
            ))
        })?;
        traces.push((*n, t));
    }
    let gamma = scaling::fit_gamma(&traces)?;

    let mut delta_paths = Vec::new();
    let mut curves = Vec::new();
    for (&n, group) in &by_n {
        let q: Vec<_> = group.iter().map(|j| &j.q_path).collect();
        let k: Vec<_> = group.iter().map(|j| &j.kappa_path).collect();
        let (q, k) = (average_paths(&q), average_paths(&k));
        // Both averages share the λ column.
        let q = q.iter().zip(&k).map(|(a, b)| (b.0, a.1)).collect();
        delta_paths.push((q, k));

        let risk: Vec<Vec<(f64, f64)>> = group
            .iter()
            .map(|j| {
                j.rows
                    .iter()
                    .filter_map(|r| Some((r.lambda, r.r_test?)))
                    .collect()
            })
            .collect();
        let refs: Vec<_> = risk.iter().collect();
        curves.push((n, average_paths(&refs)));
    }
    let delta = scaling::fit_delta_pooled(&delta_paths, gamma.slope)?;
    let rate = scaling::observed_rate(&curves)?;
    Ok(ScalingEstimate::new(&gamma, &delta, Some(&rate)))
}

fn job_list(config: &ExperimentConfig) -> Vec<(usize, u64)> {
    let mut ns = config.n_grid.clone();
    ns.sort_unstable();
    ns.dedup();
    let mut seeds = config.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    ns.iter()
        .flat_map(|&n| seeds.iter().map(move |&s| (n, s)))
        .collect()
}

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Error::input("--threads must be ≥ 1")),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::input(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Evaluate every job and the ensemble summaries without touching the disk.
///
/// On a job failure the returned error carries the rows of all earlier jobs
/// so the caller can flush a partial report.
pub fn evaluate(
    config: &ExperimentConfig,
    source: &Source,
    threads: Option<usize>,
) -> std::result::Result<ExperimentOutput, (Error, Option<ExperimentOutput>)> {
    config.validate().map_err(|e| (e, None))?;
    let jobs = job_list(config);
    let results: Vec<Result<JobResult>> = in_pool(threads, || {
        jobs.par_iter()
            .map(|&(n, seed)| {
                run_job(source, config, n, seed)
                    .map_err(|e| e.context(format!("n={n} seed={seed}")))
            })
            .collect()
    })
    .map_err(|e| (e, None))?;

    let mut meta = ReportMeta {
        config_hash: config.hash(),
        synthetic: config.is_synthetic(),
        n_grid: jobs
            .iter()
            .map(|j| j.0)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect(),
        complete: true,
        failure: None,
    };
    let mut done = Vec::new();
    for (key, res) in jobs.into_iter().zip(results) {
        match res {
            Ok(job) => done.push((key, job)),
            Err(e) => {
                meta.complete = false;
                meta.failure = Some(e.to_string());
                let report = RiskReport {
                    rows: done
                        .into_iter()
                        .flat_map(|(_, j): (_, JobResult)| j.rows)
                        .collect(),
                };
                let partial = ExperimentOutput {
                    summary: empty_summary(&meta, report.rows.len()),
                    report,
                    meta,
                };
                return Err((e, Some(partial)));
            }
        }
    }

    let fail = |e: Error, done: &[((usize, u64), JobResult)], meta: &ReportMeta| {
        let mut meta = meta.clone();
        meta.complete = false;
        meta.failure = Some(e.to_string());
        let report = RiskReport {
            rows: done.iter().flat_map(|(_, j)| j.rows.clone()).collect(),
        };
        let partial = ExperimentOutput {
            summary: empty_summary(&meta, report.rows.len()),
            report,
            meta,
        };
        (e, Some(partial))
    };

    let spec_fit = if config.predictors.spec {
        let obs: Vec<SpecObservation> = done
            .iter()
            .flat_map(|(_, j)| j.rows.iter().zip(&j.terms))
            .filter_map(|(r, t)| {
                Some(SpecObservation {
                    terms: (*t)?,
                    observed: r.r_test?,
                })
            })
            .collect();
        let fit = fit_spec_params(&obs)
            .map_err(|e| fail(e.context("spectrum-only fit"), &done, &meta))?;
        for (_, job) in done.iter_mut() {
            for (row, t) in job.rows.iter_mut().zip(&job.terms) {
                row.r_spec = t.map(|t| t.evaluate(fit.alpha2, fit.sigma2));
            }
        }
        Some(fit)
    } else {
        None
    };

    let report = RiskReport {
        rows: done.iter().flat_map(|(_, j)| j.rows.clone()).collect(),
    };
    report.check().map_err(|e| fail(e, &done, &meta))?;

    let (scaling, scaling_error) = match scaling_pipeline(&done) {
        Ok(s) => (Some(s), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let optimal = report.optimal_rows();
    let summary = Summary {
        config_hash: meta.config_hash.clone(),
        mode: if meta.synthetic {
            "synthetic"
        } else {
            "kernel"
        },
        rows: report.rows.len(),
        spec_fit,
        correlations_all: correlations(report.rows.iter()),
        correlations_optimal: correlations(optimal.iter().copied()),
        scaling,
        scaling_error,
    };
    Ok(ExperimentOutput {
        report,
        meta,
        summary,
    })
}

fn empty_summary(meta: &ReportMeta, rows: usize) -> Summary {
    Summary {
        config_hash: meta.config_hash.clone(),
        mode: if meta.synthetic {
            "synthetic"
        } else {
            "kernel"
        },
        rows,
        spec_fit: None,
        correlations_all: Correlations::default(),
        correlations_optimal: Correlations::default(),
        scaling: None,
        scaling_error: None,
    }
}

/// Path of the JSON summary written next to a report.
pub fn summary_path(output: &Path) -> PathBuf {
    output.with_extension("json")
}

fn persist(config: &ExperimentConfig, out: &ExperimentOutput) -> Result<()> {
    let path = &config.output_path;
    io::write_text(path, &io::write_report(&out.report, &out.meta))?;
    let json = serde_json::to_string_pretty(&out.summary).expect("summary serializes");
    io::write_text(&summary_path(path), &(json + "\n"))
}

/// Run, then write the CSV report and its JSON summary to `config.output_path`.
///
/// A failed run still writes the rows finished before the failure, marked
/// incomplete.
pub fn run_experiment(
    config: &ExperimentConfig,
    threads: Option<usize>,
) -> Result<ExperimentOutput> {
    config.validate()?;
    io::check_overwrite(&config.output_path, &config.hash())?;
    let source = Source::from_config(config)?;
    match evaluate(config, &source, threads) {
        Ok(out) => {
            persist(config, &out)?;
            Ok(out)
        }
        Err((e, partial)) => {
            if let Some(partial) = partial {
                persist(config, &partial)?;
            }
            Err(e)
        }
    }
}

/// MP-consistency curves for every job, and per-seed coincidence across sizes.
#[derive(Debug, Clone)]
pub struct MpCheck {
    pub curves: Vec<((usize, u64), Vec<CurvePoint>)>,
    pub scores: BTreeMap<u64, f64>,
    pub median: f64,
}

pub fn mp_check(
    config: &ExperimentConfig,
    source: &Source,
    threads: Option<usize>,
) -> Result<MpCheck> {
    config.validate()?;
    let jobs = job_list(config);
    let holdout = config.holdout();
    let results: Vec<Result<Vec<CurvePoint>>> = in_pool(threads, || {
        jobs.par_iter()
            .map(|&(n, seed)| {
                let prep = source.prepare(n, seed, &holdout)?;
                let grid = io::build_lambda_grid(&prep.eig, &config.lambda0_grid)?;
                mp_consistency_curves(&prep.eig, &prep.labels, &grid)
                    .map_err(|e| e.context(format!("n={n} seed={seed}")))
            })
            .collect()
    })?;
    let curves: Vec<_> = jobs
        .into_iter()
        .zip(results)
        .map(|(k, r)| Ok((k, r?)))
        .collect::<Result<_>>()?;
    let mut scores = BTreeMap::new();
    for seed in config
        .seeds
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
    {
        let group: Vec<Vec<CurvePoint>> = curves
            .iter()
            .filter(|((_, s), _)| *s == seed)
            .map(|(_, c)| c.clone())
            .collect();
        scores.insert(
            seed,
            curve_coincidence(&group).map_err(|e| e.context(format!("seed={seed}")))?,
        );
    }
    let mut sorted: Vec<f64> = scores.values().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    Ok(MpCheck {
        curves,
        scores,
        median,
    })
}

pub fn write_curves(check: &MpCheck) -> String {
    let mut out = String::from("n,seed,lambda,kappa_hat,f,f_times_kappa\n");
    for ((n, seed), curve) in &check.curves {
        for p in curve {
            out.push_str(&format!(
                "{n},{seed},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                p.lambda, p.kappa_hat, p.f, p.f_times_kappa
            ));
        }
    }
    out
}
