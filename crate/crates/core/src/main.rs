use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ridgerisk::experiment::{self, Source};
use ridgerisk::io::{self, ExperimentConfig, Holdout, PopulationSpec};
use ridgerisk::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ridgerisk",
    version,
    about = "Risk prediction for high-dimensional kernel ridge regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic instances and evaluate every predictor.
    Synth(Common),
    /// Evaluate predictors on subsamples of a kernel file.
    Predict(Common),
    /// Estimate γ̂, δ̂, α̂ and the observed rate.
    Scaling(Common),
    /// Empirical MP-consistency curves and their coincidence score.
    Mpcheck(Common),
    /// Fit the spectrum-only family and report predictor correlations.
    Baselines(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Kernel file (KRMX format).
    #[arg(long)]
    kernel: Option<PathBuf>,
    /// Output CSV path; a JSON summary is written alongside.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    threads: Option<usize>,
    /// Smallest λ₀ in units of the top eigenvalue.
    #[arg(long)]
    lambda_min: Option<f64>,
    #[arg(long)]
    lambda_max: Option<f64>,
    #[arg(long)]
    lambda_count: Option<usize>,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long)]
    p: Option<usize>,
    /// Holdout rows, or a fraction of the kernel file when it contains a point.
    #[arg(long)]
    holdout: Option<String>,
}

const DEFAULT_N_GRID: [usize; 5] = [64, 128, 256, 512, 1024];

impl Common {
    fn config(&self, default_out: &str) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::synthetic(
                PopulationSpec::default(),
                DEFAULT_N_GRID.to_vec(),
                PathBuf::from(default_out),
            ),
        };
        if let Some(k) = &self.kernel {
            cfg.kernel = Some(k.clone());
        }
        if let Some(o) = &self.out {
            cfg.output_path = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(g) = &self.n_grid {
            cfg.n_grid = g.clone();
        }
        if let Some(v) = self.lambda_min {
            cfg.lambda0_grid.min = v;
        }
        if let Some(v) = self.lambda_max {
            cfg.lambda0_grid.max = v;
        }
        if let Some(v) = self.lambda_count {
            cfg.lambda0_grid.count = v;
        }
        if self.p.is_some() || self.gamma.is_some() || self.delta.is_some() || self.sigma2.is_some()
        {
            let mut pop = cfg.population.unwrap_or_default();
            pop.p = self.p.unwrap_or(pop.p);
            pop.gamma = self.gamma.unwrap_or(pop.gamma);
            pop.delta = self.delta.unwrap_or(pop.delta);
            pop.sigma2 = self.sigma2.unwrap_or(pop.sigma2);
            cfg.population = Some(pop);
        }
        if let Some(h) = &self.holdout {
            cfg.holdout = Some(h.parse::<Holdout>()?);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("json serializes")
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => {
            let cfg = args.config("ridgerisk.csv")?;
            if cfg.kernel.is_some() {
                return Err(Error::input(
                    "synth generates its own data; use predict for kernel files",
                ));
            }
            let out = experiment::run_experiment(&cfg, args.threads)?;
            print_json(&serde_json::to_value(&out.summary).expect("summary serializes"));
        }
        Command::Predict(args) => {
            let cfg = args.config("ridgerisk.csv")?;
            if cfg.kernel.is_none() {
                return Err(Error::input(
                    "predict needs --kernel or a config with a kernel path",
                ));
            }
            let out = experiment::run_experiment(&cfg, args.threads)?;
            print_json(&serde_json::to_value(&out.summary).expect("summary serializes"));
        }
        Command::Scaling(args) => {
            let cfg = args.config("ridgerisk.csv")?;
            let out = experiment::run_experiment(&cfg, args.threads)?;
            match (&out.summary.scaling, &out.summary.scaling_error) {
                (Some(s), _) => print_json(&serde_json::to_value(s).expect("estimate serializes")),
                (None, err) => {
                    return Err(Error::input(
                        err.clone().unwrap_or_else(|| "no scaling estimate".into()),
                    ))
                }
            }
        }
        Command::Mpcheck(args) => {
            let cfg = args.config("mpcheck.csv")?;
            let source = Source::from_config(&cfg)?;
            let check = experiment::mp_check(&cfg, &source, args.threads)?;
            io::write_text(&cfg.output_path, &experiment::write_curves(&check))?;
            let scores: serde_json::Map<String, serde_json::Value> = check
                .scores
                .iter()
                .map(|(s, v)| (s.to_string(), json!(v)))
                .collect();
            print_json(&json!({
                "config_hash": cfg.hash(),
                "coincidence_by_seed": scores,
                "coincidence_median": check.median,
            }));
        }
        Command::Baselines(args) => {
            let cfg = args.config("ridgerisk.csv")?;
            let out = experiment::run_experiment(&cfg, args.threads)?;
            let s = &out.summary;
            print_json(&json!({
                "config_hash": s.config_hash,
                "spec_fit": s.spec_fit,
                "correlations_all": s.correlations_all,
                "correlations_optimal": s.correlations_optimal,
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
