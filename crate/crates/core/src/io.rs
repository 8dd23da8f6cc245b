//! Kernel files, experiment configuration, and the CSV risk report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::predictors::{RiskReport, RiskRow, DEFAULT_REGIME_THRESHOLD};
use crate::ridge_path::{LabelMatrix, LambdaGrid};
use crate::spectral::{EigenSystem, GramMatrix, GramScale};

pub const KERNEL_MAGIC: &[u8; 4] = b"KRMX";
pub const KERNEL_VERSION: u32 = 1;
const KERNEL_HEADER_LEN: u64 = 4 + 4 + 8 + 8;
/// Relative asymmetry tolerated in a kernel file.
pub const KERNEL_SYMMETRY_TOLERANCE: f64 = 1e-8;

/// Serialize a raw-scale kernel and its labels.
pub fn encode_kernel(kernel: &DMatrix<f64>, labels: &DMatrix<f64>) -> Result<Vec<u8>> {
    let n = kernel.nrows();
    if kernel.ncols() != n {
        return Err(Error::input(format!(
            "kernel is {}×{}, not square",
            n,
            kernel.ncols()
        )));
    }
    if labels.nrows() != n {
        return Err(Error::input(format!(
            "kernel has n={n} but labels have {} rows",
            labels.nrows()
        )));
    }
    let c = labels.ncols();
    let mut out = Vec::with_capacity(KERNEL_HEADER_LEN as usize + 8 * n * (n + c));
    out.extend_from_slice(KERNEL_MAGIC);
    out.extend_from_slice(&KERNEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(c as u64).to_le_bytes());
    for m in [kernel, labels] {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.extend_from_slice(&m[(i, j)].to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Parse a kernel file image. Labels come back uncentered.
pub fn decode_kernel(bytes: &[u8]) -> Result<(GramMatrix, LabelMatrix)> {
    let actual = bytes.len() as u64;
    if actual < KERNEL_HEADER_LEN {
        return Err(Error::Truncated {
            expected: KERNEL_HEADER_LEN,
            actual,
        });
    }
    if &bytes[..4] != KERNEL_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"KRMX\"",
            &bytes[..4]
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != KERNEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported kernel file version {version}"
        )));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let c = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    if n == 0 {
        return Err(Error::Format("kernel file declares n = 0".into()));
    }
    let expected = n
        .checked_mul(n)
        .and_then(|nn| n.checked_mul(c).and_then(|nc| nn.checked_add(nc)))
        .and_then(|v| v.checked_mul(8))
        .and_then(|v| v.checked_add(KERNEL_HEADER_LEN))
        .ok_or_else(|| Error::Format(format!("declared sizes n={n}, c={c} overflow")))?;
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(Error::Format(format!(
            "kernel file has {} trailing bytes",
            actual - expected
        )));
    }
    let (n, c) = (n as usize, c as usize);
    let mut values = bytes[KERNEL_HEADER_LEN as usize..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
    let kernel = DMatrix::from_row_iterator(n, n, values.by_ref().take(n * n));
    let labels = DMatrix::from_row_iterator(n, c, values);
    let gram = GramMatrix::new(kernel, GramScale::Raw, KERNEL_SYMMETRY_TOLERANCE)?;
    Ok((gram, LabelMatrix::new(labels)?))
}

pub fn write_kernel(path: &Path, kernel: &DMatrix<f64>, labels: &DMatrix<f64>) -> Result<()> {
    let bytes = encode_kernel(kernel, labels)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_kernel(path: &Path) -> Result<(GramMatrix, LabelMatrix)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_kernel(&bytes).map_err(|e| e.context(format!("reading {}", path.display())))
}

/// Subtract each label column's mean.
pub fn center_labels(y: &LabelMatrix) -> LabelMatrix {
    y.centered()
}

/// Geometric λ₀ range in units of the top `Σ̂` eigenvalue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            min: 1e-6,
            max: 1e1,
            count: 24,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0) || !self.max.is_finite() || self.count == 0 {
            return Err(Error::input(format!(
                "lambda grid needs 0 < min, finite max and count ≥ 1; got {self:?}"
            )));
        }
        if self.count == 1 && self.max != self.min || self.count > 1 && !(self.max > self.min) {
            return Err(Error::input(format!(
                "lambda grid with {} points needs max {} min; got {self:?}",
                self.count,
                if self.count == 1 { "=" } else { ">" }
            )));
        }
        Ok(())
    }

    /// Multipliers of λ̂₁, geometric from `min` to `max`.
    pub fn factors(&self) -> Result<Vec<f64>> {
        self.validate()?;
        if self.count == 1 {
            return Ok(vec![self.min]);
        }
        let (a, b) = (self.min.ln(), self.max.ln());
        let step = (b - a) / (self.count - 1) as f64;
        Ok((0..self.count)
            .map(|i| match i {
                0 => self.min,
                i if i + 1 == self.count => self.max,
                i => (a + step * i as f64).exp(),
            })
            .collect())
    }
}

/// `λ₀ = factor · λ̂₁`, resolved to `λ = λ₀ / n`.
pub fn build_lambda_grid(eig: &EigenSystem, spec: &GridSpec) -> Result<LambdaGrid> {
    let top = eig.top();
    if !(top > 0.0) {
        return Err(Error::input(
            "top eigenvalue is zero; the lambda grid has no scale",
        ));
    }
    let base = spec.factors()?.into_iter().map(|f| f * top).collect();
    LambdaGrid::new(base, eig.n())
}

/// Power-law population for synthetic mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub p: usize,
    pub gamma: f64,
    pub delta: f64,
    pub sigma2: f64,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        Self {
            p: 2000,
            gamma: 0.5,
            delta: 0.2,
            sigma2: 0.0,
        }
    }
}

/// Size of the held-out set: a row count, or a fraction of a kernel file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Holdout {
    Count(usize),
    Fraction(f64),
}

impl std::str::FromStr for Holdout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let parsed = if s.contains(['.', 'e', 'E']) {
            s.parse::<f64>().ok().map(Holdout::Fraction)
        } else {
            s.parse::<usize>().ok().map(Holdout::Count)
        };
        let h = parsed.ok_or_else(|| {
            Error::input(format!("holdout must be a count or a fraction, got {s:?}"))
        })?;
        h.validate()?;
        Ok(h)
    }
}

impl Holdout {
    fn validate(&self) -> Result<()> {
        match *self {
            Holdout::Count(0) => Err(Error::input("holdout count must be ≥ 1")),
            Holdout::Fraction(f) if !(f > 0.0 && f < 1.0) => Err(Error::input(format!(
                "holdout fraction must lie in (0, 1), got {f}"
            ))),
            _ => Ok(()),
        }
    }

    /// Rows held out of a pool of `total`.
    pub fn rows_of(&self, total: usize) -> usize {
        match *self {
            Holdout::Count(c) => c,
            Holdout::Fraction(f) => ((total as f64) * f).floor().max(1.0) as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorFlags {
    pub gcv: bool,
    pub spec: bool,
    pub norm: bool,
}

impl Default for PredictorFlags {
    fn default() -> Self {
        Self {
            gcv: true,
            spec: true,
            norm: true,
        }
    }
}

/// Everything that determines an experiment's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_grid: Vec<usize>,
    #[serde(default)]
    pub lambda0_grid: GridSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Synthetic mode; ignored when `kernel` is set.
    #[serde(default)]
    pub population: Option<PopulationSpec>,
    /// Kernel-file mode.
    #[serde(default)]
    pub kernel: Option<PathBuf>,
    #[serde(default)]
    pub holdout: Option<Holdout>,
    #[serde(default)]
    pub predictors: PredictorFlags,
    #[serde(default = "default_regime_threshold")]
    pub regime_threshold: f64,
    pub output_path: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_regime_threshold() -> f64 {
    DEFAULT_REGIME_THRESHOLD
}

pub const DEFAULT_SYNTHETIC_HOLDOUT: usize = 2000;
pub const DEFAULT_KERNEL_HOLDOUT: f64 = 0.2;

impl ExperimentConfig {
    pub fn synthetic(population: PopulationSpec, n_grid: Vec<usize>, output_path: PathBuf) -> Self {
        Self {
            n_grid,
            lambda0_grid: GridSpec::default(),
            seeds: default_seeds(),
            population: Some(population),
            kernel: None,
            holdout: None,
            predictors: PredictorFlags::default(),
            regime_threshold: DEFAULT_REGIME_THRESHOLD,
            output_path,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::input(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| e.context(format!("reading {}", path.display())))
    }

    pub fn is_synthetic(&self) -> bool {
        self.kernel.is_none()
    }

    /// Holdout with the mode's default filled in.
    pub fn holdout(&self) -> Holdout {
        self.holdout.unwrap_or(if self.is_synthetic() {
            Holdout::Count(DEFAULT_SYNTHETIC_HOLDOUT)
        } else {
            Holdout::Fraction(DEFAULT_KERNEL_HOLDOUT)
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return Err(Error::input("n_grid must be nonempty with every size ≥ 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::input("seeds must be nonempty"));
        }
        self.lambda0_grid.validate()?;
        let holdout = self.holdout();
        holdout.validate()?;
        if !(self.regime_threshold >= 1.0) {
            return Err(Error::input("regime threshold must be ≥ 1"));
        }
        if self.is_synthetic() {
            if self.population.is_none() {
                return Err(Error::input(
                    "synthetic mode needs a [population] section or a kernel file",
                ));
            }
            if matches!(holdout, Holdout::Fraction(_)) {
                return Err(Error::input(
                    "synthetic mode needs a holdout row count, not a fraction",
                ));
            }
        }
        Ok(())
    }

    /// SHA-256 over the fields that determine the output (the output path excluded).
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_path = PathBuf::new();
        if canonical.kernel.is_some() {
            canonical.population = None;
        }
        canonical.holdout = Some(self.holdout());
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Metadata carried in the comment lines of a report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportMeta {
    pub config_hash: String,
    pub synthetic: bool,
    pub n_grid: Vec<usize>,
    pub complete: bool,
    pub failure: Option<String>,
}

const FIXED_COLUMNS: [&str; 11] = [
    "n",
    "lambda0",
    "lambda",
    "seed",
    "r_emp",
    "r_test",
    "gcv",
    "kappa_hat",
    "regime_ratio",
    "r_spec",
    "r_norm",
];
const POPULATION_COLUMNS: [&str; 2] = ["r_omni", "r_omni_noisy"];

fn real(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("write to String");
}

fn optional(out: &mut String, v: Option<f64>) {
    if let Some(v) = v {
        real(out, v);
    }
}

/// Render a report. Population columns appear only in synthetic mode.
pub fn write_report(report: &RiskReport, meta: &ReportMeta) -> String {
    let mut out = String::new();
    out.push_str("# ridgerisk risk report\n");
    writeln!(out, "# config_hash={}", meta.config_hash).unwrap();
    writeln!(
        out,
        "# mode={}",
        if meta.synthetic {
            "synthetic"
        } else {
            "kernel"
        }
    )
    .unwrap();
    let grid: Vec<String> = meta.n_grid.iter().map(|n| n.to_string()).collect();
    writeln!(out, "# n_grid={}", grid.join(",")).unwrap();
    let mut header: Vec<&str> = FIXED_COLUMNS.to_vec();
    if meta.synthetic {
        header.extend(POPULATION_COLUMNS);
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for r in &report.rows {
        write!(out, "{},", r.n).unwrap();
        real(&mut out, r.lambda0);
        out.push(',');
        real(&mut out, r.lambda);
        write!(out, ",{},", r.seed).unwrap();
        real(&mut out, r.r_emp);
        out.push(',');
        optional(&mut out, r.r_test);
        out.push(',');
        optional(&mut out, r.gcv);
        out.push(',');
        real(&mut out, r.kappa_hat);
        out.push(',');
        real(&mut out, r.regime_ratio);
        out.push(',');
        optional(&mut out, r.r_spec);
        out.push(',');
        optional(&mut out, r.r_norm);
        if meta.synthetic {
            out.push(',');
            optional(&mut out, r.r_omni);
            out.push(',');
            optional(&mut out, r.r_omni_noisy);
        }
        out.push('\n');
    }
    if meta.complete {
        out.push_str("# status=complete\n");
    } else {
        let why = meta
            .failure
            .as_deref()
            .unwrap_or("unknown")
            .replace('\n', " ");
        writeln!(out, "# status=incomplete error={why}").unwrap();
    }
    out
}

fn parse_field<T: std::str::FromStr>(s: &str, name: &str, line: usize) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("line {line}: bad {name} value {s:?}")))
}

fn parse_optional(s: &str, name: &str, line: usize) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_field(s, name, line).map(Some)
    }
}

/// Inverse of [`write_report`].
pub fn parse_report(text: &str) -> Result<(RiskReport, ReportMeta)> {
    let mut meta = ReportMeta {
        config_hash: String::new(),
        synthetic: false,
        n_grid: Vec::new(),
        complete: false,
        failure: None,
    };
    let mut header: Option<Vec<&str>> = None;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if let Some(comment) = line.strip_prefix("# ") {
            if let Some(h) = comment.strip_prefix("config_hash=") {
                meta.config_hash = h.to_string();
            } else if let Some(m) = comment.strip_prefix("mode=") {
                meta.synthetic = m == "synthetic";
            } else if let Some(g) = comment.strip_prefix("n_grid=") {
                meta.n_grid = g
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_field(s, "n_grid", lineno))
                    .collect::<Result<_>>()?;
            } else if comment == "status=complete" {
                meta.complete = true;
            } else if let Some(e) = comment.strip_prefix("status=incomplete") {
                meta.complete = false;
                meta.failure = Some(e.trim_start().trim_start_matches("error=").to_string());
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let Some(cols) = &header else {
            let expected: Vec<&str> = if meta.synthetic {
                FIXED_COLUMNS
                    .iter()
                    .chain(&POPULATION_COLUMNS)
                    .copied()
                    .collect()
            } else {
                FIXED_COLUMNS.to_vec()
            };
            if fields != expected {
                return Err(Error::Format(format!(
                    "line {lineno}: unexpected header {line:?}"
                )));
            }
            header = Some(fields);
            continue;
        };
        if fields.len() != cols.len() {
            return Err(Error::Format(format!(
                "line {lineno}: {} fields, header has {}",
                fields.len(),
                cols.len()
            )));
        }
        let f = |i: usize| fields[i];
        rows.push(RiskRow {
            n: parse_field(f(0), "n", lineno)?,
            lambda0: parse_field(f(1), "lambda0", lineno)?,
            lambda: parse_field(f(2), "lambda", lineno)?,
            seed: parse_field(f(3), "seed", lineno)?,
            r_emp: parse_field(f(4), "r_emp", lineno)?,
            r_test: parse_optional(f(5), "r_test", lineno)?,
            gcv: parse_optional(f(6), "gcv", lineno)?,
            kappa_hat: parse_field(f(7), "kappa_hat", lineno)?,
            regime_ratio: parse_field(f(8), "regime_ratio", lineno)?,
            r_spec: parse_optional(f(9), "r_spec", lineno)?,
            r_norm: parse_optional(f(10), "r_norm", lineno)?,
            r_omni: if meta.synthetic {
                parse_optional(f(11), "r_omni", lineno)?
            } else {
                None
            },
            r_omni_noisy: if meta.synthetic {
                parse_optional(f(12), "r_omni_noisy", lineno)?
            } else {
                None
            },
        });
    }
    if header.is_none() {
        return Err(Error::Format("report has no header line".into()));
    }
    Ok((RiskReport { rows }, meta))
}

/// Refuse to replace a report written under a different configuration.
pub fn check_overwrite(path: &Path, config_hash: &str) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let recorded = text
        .lines()
        .find_map(|l| l.strip_prefix("# config_hash="))
        .map(str::to_string);
    match recorded {
        Some(h) if h == config_hash => Ok(()),
        Some(h) => Err(Error::input(format!(
            "{} was written by a different configuration (hash {h}, now {config_hash}); \
             remove it or choose another output path",
            path.display()
        ))),
        None => Err(Error::input(format!(
            "{} exists and is not a ridgerisk report; refusing to overwrite",
            path.display()
        ))),
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::eigh;
    use proptest::prelude::*;

    #[test]
    fn one_by_one_kernel_round_trips_bit_exactly() {
        let k = DMatrix::from_element(1, 1, 2.0);
        let y = DMatrix::from_element(1, 1, 1.0);
        let bytes = encode_kernel(&k, &y).unwrap();
        assert_eq!(bytes.len(), 40);
        let (g, l) = decode_kernel(&bytes).unwrap();
        assert_eq!(g.entries(), &k);
        assert_eq!(l.values(), &y);
        assert!(!l.is_centered());
        let again = encode_kernel(g.entries(), l.values()).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn malformed_kernel_files() {
        let k = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let y = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let good = encode_kernel(&k, &y).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[..4].copy_from_slice(b"XMRK");
        assert!(matches!(decode_kernel(&bad_magic), Err(Error::Format(_))));

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(decode_kernel(&bad_version), Err(Error::Format(_))));

        // Declared n = 2 but only the first kernel row present.
        let short = &good[..24 + 16];
        assert!(matches!(
            decode_kernel(short),
            Err(Error::Truncated {
                expected: 72,
                actual: 40
            })
        ));
        assert!(matches!(
            decode_kernel(&good[..10]),
            Err(Error::Truncated { .. })
        ));

        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_kernel(&long), Err(Error::Format(_))));

        let asym = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.1, 3.0]);
        let bytes = encode_kernel(&asym, &y).unwrap();
        assert!(matches!(decode_kernel(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn centering_examples() {
        let y = LabelMatrix::from_vector(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let c = center_labels(&y);
        let expected = [0.75, -0.25, -0.25, -0.25];
        for (a, b) in c.values().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(c.is_centered());
        assert_eq!(center_labels(&c).values(), c.values());
        let constant = LabelMatrix::from_vector(&[3.0; 5]).unwrap();
        assert!(center_labels(&constant).values().iter().all(|&v| v == 0.0));
    }

    fn diag_eig(values: &[f64]) -> EigenSystem {
        let k = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(values));
        eigh(&GramMatrix::new(k, GramScale::Raw, 1e-12).unwrap()).unwrap()
    }

    #[test]
    fn lambda_grid_examples() {
        // Raw diag(1) on n = 1 has λ̂₁ = 1.
        let eig = diag_eig(&[1.0]);
        let g = build_lambda_grid(
            &eig,
            &GridSpec {
                min: 1e-2,
                max: 1.0,
                count: 3,
            },
        )
        .unwrap();
        let expected = [0.01, 0.1, 1.0];
        for (a, b) in g.base_values().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15 * b);
        }

        // Raw diag(8, 4) on n = 2 has λ̂₁ = 4.
        let eig = diag_eig(&[8.0, 4.0]);
        let g = build_lambda_grid(
            &eig,
            &GridSpec {
                min: 0.5,
                max: 2.0,
                count: 2,
            },
        )
        .unwrap();
        assert_eq!(g.base_values(), &[2.0, 8.0]);
        assert_eq!(g.resolved(), &[1.0, 4.0]);

        let eig = diag_eig(&vec![100.0; 100]);
        let g = build_lambda_grid(
            &eig,
            &GridSpec {
                min: 1e-2,
                max: 1.0,
                count: 3,
            },
        )
        .unwrap();
        for (b, r) in g.base_values().iter().zip(g.resolved()) {
            assert_eq!(*r, b / 100.0);
        }

        let zero = diag_eig(&[0.0, 0.0]);
        assert!(matches!(
            build_lambda_grid(&zero, &GridSpec::default()),
            Err(Error::Input(_))
        ));
        let bad = GridSpec {
            min: 1.0,
            max: 0.5,
            count: 4,
        };
        assert!(matches!(
            build_lambda_grid(&eig, &bad),
            Err(Error::Input(_))
        ));
    }

    fn sample_config() -> ExperimentConfig {
        ExperimentConfig::synthetic(
            PopulationSpec::default(),
            vec![128, 256, 512],
            "out.csv".into(),
        )
    }

    #[test]
    fn config_parses_and_rejects_unknown_keys() {
        let text = r#"
            n_grid = [128, 256]
            seeds = [0, 1, 2]
            holdout = 500
            output_path = "results/a.csv"

            [lambda0_grid]
            min = 1e-4
            max = 10.0
            count = 12

            [population]
            p = 1000
            gamma = 0.5
            delta = 0.2
            sigma2 = 0.25

            [predictors]
            norm = false
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.holdout(), Holdout::Count(500));
        assert!(!cfg.predictors.norm && cfg.predictors.gcv);
        assert_eq!(cfg.lambda0_grid.count, 12);

        let typo = text.replace("seeds", "sedes");
        assert!(matches!(
            ExperimentConfig::from_toml(&typo),
            Err(Error::Input(_))
        ));

        let frac = text.replace("holdout = 500", "holdout = 0.2");
        let cfg = ExperimentConfig::from_toml(&frac).unwrap();
        assert_eq!(cfg.holdout(), Holdout::Fraction(0.2));
        assert!(matches!(cfg.validate(), Err(Error::Input(_))));
    }

    #[test]
    fn holdout_flag_parsing() {
        assert_eq!("250".parse::<Holdout>().unwrap(), Holdout::Count(250));
        assert_eq!("0.25".parse::<Holdout>().unwrap(), Holdout::Fraction(0.25));
        assert!("0".parse::<Holdout>().is_err());
        assert!("1.5".parse::<Holdout>().is_err());
        assert!("many".parse::<Holdout>().is_err());
        assert_eq!(Holdout::Fraction(0.2).rows_of(1000), 200);
    }

    #[test]
    fn hash_tracks_content_not_destination() {
        let a = sample_config();
        let mut b = a.clone();
        b.output_path = "elsewhere.csv".into();
        assert_eq!(a.hash(), b.hash());
        b.seeds = vec![1];
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.holdout = Some(Holdout::Count(DEFAULT_SYNTHETIC_HOLDOUT));
        assert_eq!(a.hash(), c.hash());
    }

    #[test]
    fn overwrite_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        check_overwrite(&path, "abc").unwrap();
        let meta = ReportMeta {
            config_hash: "abc".into(),
            synthetic: true,
            n_grid: vec![1],
            complete: true,
            failure: None,
        };
        write_text(&path, &write_report(&RiskReport::default(), &meta)).unwrap();
        check_overwrite(&path, "abc").unwrap();
        assert!(matches!(
            check_overwrite(&path, "def"),
            Err(Error::Input(_))
        ));
        fs::write(&path, "hello").unwrap();
        assert!(check_overwrite(&path, "abc").is_err());
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![
            -1e300f64..1e300,
            -1.0f64..1.0,
            Just(0.0),
            Just(f64::MIN_POSITIVE),
            Just(5e-324),
        ]
    }

    fn row() -> impl Strategy<Value = RiskRow> {
        (
            (1usize..5000, finite(), finite(), any::<u64>(), finite()),
            (
                proptest::option::of(finite()),
                proptest::option::of(finite()),
                finite(),
                finite(),
            ),
            (
                proptest::option::of(finite()),
                proptest::option::of(finite()),
                proptest::option::of(finite()),
                proptest::option::of(finite()),
            ),
        )
            .prop_map(
                |(
                    (n, lambda0, lambda, seed, r_emp),
                    (r_test, gcv, kappa_hat, regime_ratio),
                    (r_spec, r_norm, r_omni, r_omni_noisy),
                )| RiskRow {
                    n,
                    lambda0,
                    lambda,
                    seed,
                    r_emp,
                    r_test,
                    gcv,
                    kappa_hat,
                    regime_ratio,
                    r_spec,
                    r_norm,
                    r_omni,
                    r_omni_noisy,
                },
            )
    }

    proptest! {
        #[test]
        fn csv_round_trip(rows in proptest::collection::vec(row(), 0..20), complete in any::<bool>()) {
            let meta = ReportMeta {
                config_hash: "00ff".into(),
                synthetic: true,
                n_grid: vec![64, 128],
                complete,
                failure: (!complete).then(|| "numerical error: stalled".to_string()),
            };
            let report = RiskReport { rows };
            let text = write_report(&report, &meta);
            let (parsed, parsed_meta) = parse_report(&text).unwrap();
            prop_assert_eq!(&parsed, &report);
            prop_assert_eq!(parsed_meta, meta);
        }

        #[test]
        fn kernel_mode_drops_population_columns(rows in proptest::collection::vec(row(), 1..5)) {
            let meta = ReportMeta {
                config_hash: "1".into(),
                synthetic: false,
                n_grid: vec![8],
                complete: true,
                failure: None,
            };
            let report = RiskReport { rows };
            let text = write_report(&report, &meta);
            prop_assert!(!text.contains("r_omni"));
            let (parsed, _) = parse_report(&text).unwrap();
            for (a, b) in parsed.rows.iter().zip(&report.rows) {
                prop_assert_eq!(a.r_omni, None);
                prop_assert_eq!(a.r_test, b.r_test);
                prop_assert_eq!(a.kappa_hat, b.kappa_hat);
            }
        }

        #[test]
        fn kernel_file_round_trip(n in 1usize..8, c in 1usize..4, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = DMatrix::from_fn(n, n + 2, |_, _| rng.random_range(-1.0..1.0));
            let k = &x * x.transpose();
            let k = (&k + k.transpose()) * 0.5;
            let y = DMatrix::from_fn(n, c, |_, _| rng.random_range(-3.0..3.0));
            let bytes = encode_kernel(&k, &y).unwrap();
            prop_assert_eq!(bytes.len(), 24 + 8 * n * (n + c));
            let (g, l) = decode_kernel(&bytes).unwrap();
            prop_assert_eq!(g.entries(), &k);
            prop_assert_eq!(l.values(), &y);
        }
    }
}
