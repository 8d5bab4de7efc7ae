//! Seeded, replicated stability studies producing rate tables and bound
//! reports.
//!
//! A run is fully determined by its [`ExperimentConfig`] (including the root
//! seed): replications draw from independent [`SeedSpec`] streams, execute in
//! parallel, and are aggregated in stream order, so output files are
//! byte-identical across runs.

mod runs;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{BoundReport, BoundsError, HolderPair};
use crate::measure::{format_f64, MeasureError, SeedSpec};
use crate::potential::{PotentialError, SurrogateError};
use crate::prior::{KLSpec, PriorError};
use crate::transport::TransportError;

pub use runs::run;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("rate fit needs positive data, got ({x}, {y})")]
    NonPositiveInput { x: f64, y: f64 },
    #[error("rate fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Pass/fail conventions applied to every study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Allowed deviation of a fitted slope from its target.
    pub slope_tolerance: f64,
    /// Minimum fraction of replications whose bound must hold.
    pub satisfaction_rate: f64,
    pub min_r_squared: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { slope_tolerance: 0.2, satisfaction_rate: 0.95, min_r_squared: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmpiricalPriorParams {
    pub dim: usize,
    pub sigma: f64,
    pub y: Vec<f64>,
    pub prior_std: f64,
    pub n_grid: Vec<usize>,
    pub replications: usize,
    /// Reference set size as a multiple of the largest N.
    pub reference_factor: usize,
}

impl Default for EmpiricalPriorParams {
    fn default() -> Self {
        Self {
            dim: 1,
            sigma: 1.0,
            y: vec![0.5],
            prior_std: 1.0,
            n_grid: vec![64, 128, 256, 512, 1024, 2048, 4096],
            replications: 20,
            reference_factor: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaternParams {
    pub kl: KLSpec,
    pub filters: usize,
    pub filter_half_width: f64,
    pub sigma: f64,
    /// (γ*, τ*) = (γ, τ) + ε · direction.
    pub direction: [f64; 2],
    pub eps_grid: Vec<f64>,
    pub particles: usize,
    pub replications: usize,
}

impl Default for MaternParams {
    fn default() -> Self {
        Self {
            kl: KLSpec::default(),
            filters: 4,
            filter_half_width: 0.1,
            sigma: 0.05,
            direction: [1.0, 1.0],
            // Small perturbations: with n = 2048 particles in 32 modes the
            // discrete W1 bends below linear once ε exceeds about 0.05.
            eps_grid: vec![0.003125, 0.00625, 0.0125, 0.025],
            particles: 2048,
            replications: 2,
        }
    }
}

/// How T* departs from the affine base map T(u) = scale·u + offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapPerturbation {
    /// T* = (1−ε)T + εT².
    SquaredBlend,
    /// T* = T + ε.
    Translation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PushforwardParams {
    pub dim: usize,
    pub sigma: f64,
    /// Rows of the linear forward matrix (m × dim).
    pub forward: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub base_scale: f64,
    pub base_offset: f64,
    pub perturbation: MapPerturbation,
    pub eps_grid: Vec<f64>,
    pub translation_eps: f64,
    pub particles: usize,
    pub replications: usize,
}

impl Default for PushforwardParams {
    fn default() -> Self {
        Self {
            dim: 1,
            sigma: 0.2,
            forward: vec![vec![1.0]],
            y: vec![0.55],
            base_scale: 0.5,
            base_offset: 0.25,
            perturbation: MapPerturbation::SquaredBlend,
            eps_grid: vec![0.02, 0.04, 0.08, 0.16],
            translation_eps: 0.1,
            particles: 4096,
            replications: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateParams {
    pub sigma: f64,
    pub y: Vec<f64>,
    pub widths: Vec<usize>,
    pub seeds: usize,
    pub particles: usize,
    pub holder: HolderPair,
    pub adam_steps: usize,
    pub learning_rate: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            y: vec![0.3],
            widths: vec![2, 4, 8, 16, 32],
            seeds: 5,
            particles: 2000,
            holder: HolderPair { p: 1.0, q: f64::INFINITY },
            adam_steps: 300,
            learning_rate: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPerturbationParams {
    pub dim: usize,
    pub sigma: f64,
    pub y: Vec<f64>,
    /// ‖y − y'‖ values; y' = y + shift·e₁.
    pub shifts: Vec<f64>,
    pub radius: f64,
    pub particles: usize,
    pub replications: usize,
    pub holder: HolderPair,
}

impl Default for DataPerturbationParams {
    fn default() -> Self {
        Self {
            dim: 1,
            sigma: 1.0,
            y: vec![0.5],
            shifts: vec![0.0125, 0.025, 0.05, 0.1],
            radius: 0.1,
            particles: 2000,
            replications: 10,
            holder: HolderPair { p: f64::INFINITY, q: 1.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LikelihoodPerturbationParams {
    pub dim: usize,
    pub sigma: f64,
    pub y: Vec<f64>,
    pub particles: usize,
    /// Number of random sinusoidal perturbations.
    pub perturbations: usize,
    pub replications: usize,
    pub max_delta: f64,
    pub holder: HolderPair,
}

impl Default for LikelihoodPerturbationParams {
    fn default() -> Self {
        Self {
            dim: 2,
            sigma: 1.0,
            y: vec![0.3, -0.2],
            particles: 400,
            perturbations: 10,
            replications: 10,
            max_delta: 0.2,
            holder: HolderPair { p: 2.0, q: 2.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorShiftParams {
    pub dim: usize,
    pub sigma: f64,
    pub y: Vec<f64>,
    pub eps_grid: Vec<f64>,
    pub particles: usize,
    pub replications: usize,
}

impl Default for PriorShiftParams {
    fn default() -> Self {
        Self {
            dim: 1,
            sigma: 1.0,
            y: vec![0.5],
            eps_grid: vec![0.02, 0.04, 0.08, 0.16],
            particles: 1000,
            replications: 10,
        }
    }
}

/// The study to run with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    EmpiricalPrior(EmpiricalPriorParams),
    MaternHyper(MaternParams),
    Pushforward(PushforwardParams),
    Surrogate(SurrogateParams),
    DataPerturbation(DataPerturbationParams),
    LikelihoodPerturbation(LikelihoodPerturbationParams),
    PriorShift(PriorShiftParams),
}

impl Experiment {
    pub const NAMES: [&'static str; 7] = [
        "empirical_prior",
        "matern_hyper",
        "pushforward",
        "surrogate",
        "data_perturbation",
        "likelihood_perturbation",
        "prior_shift",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::EmpiricalPrior(_) => "empirical_prior",
            Self::MaternHyper(_) => "matern_hyper",
            Self::Pushforward(_) => "pushforward",
            Self::Surrogate(_) => "surrogate",
            Self::DataPerturbation(_) => "data_perturbation",
            Self::LikelihoodPerturbation(_) => "likelihood_perturbation",
            Self::PriorShift(_) => "prior_shift",
        }
    }

    /// The named study with default parameters.
    pub fn default_for(name: &str) -> Option<Self> {
        Some(match name {
            "empirical_prior" => Self::EmpiricalPrior(Default::default()),
            "matern_hyper" => Self::MaternHyper(Default::default()),
            "pushforward" => Self::Pushforward(Default::default()),
            "surrogate" => Self::Surrogate(Default::default()),
            "data_perturbation" => Self::DataPerturbation(Default::default()),
            "likelihood_perturbation" => Self::LikelihoodPerturbation(Default::default()),
            "prior_shift" => Self::PriorShift(Default::default()),
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub thresholds: Thresholds,
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment, seed: u64) -> Self {
        Self { experiment, seed, output_dir: None, thresholds: Thresholds::default() }
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |msg: String| Err(ExperimentError::Config(msg));
        fn increasing<T: PartialOrd + Copy>(v: &[T]) -> bool {
            !v.is_empty() && v.windows(2).all(|w| w[0] < w[1])
        }
        let t = &self.thresholds;
        if !(t.slope_tolerance >= 0.0 && (0.0..=1.0).contains(&t.satisfaction_rate) && (0.0..=1.0).contains(&t.min_r_squared)) {
            return bad("thresholds out of range".into());
        }
        let check_model = |dim: usize, sigma: f64, y: &[f64], ydim: usize| -> Result<(), ExperimentError> {
            if dim == 0 {
                return Err(ExperimentError::Config("dim must be positive".into()));
            }
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(ExperimentError::Config(format!("sigma must be positive, got {sigma}")));
            }
            if y.len() != ydim {
                return Err(ExperimentError::Config(format!("y has length {}, expected {ydim}", y.len())));
            }
            Ok(())
        };
        match &self.experiment {
            Experiment::EmpiricalPrior(p) => {
                check_model(p.dim, p.sigma, &p.y, p.dim)?;
                if !increasing(&p.n_grid) || p.n_grid[0] < 64 {
                    return bad("n_grid must be strictly increasing and start at >= 64".into());
                }
                if p.replications == 0 || p.reference_factor < 2 || !(p.prior_std > 0.0) {
                    return bad("replications >= 1, reference_factor >= 2 and prior_std > 0 required".into());
                }
            }
            Experiment::MaternHyper(p) => {
                p.kl.validate()?;
                check_model(p.kl.truncation, p.sigma, &[0.0; 1], 1)?;
                if p.kl.truncation > 128 {
                    return bad("truncation J must be <= 128".into());
                }
                if p.filters == 0 || !(p.filter_half_width > 0.0 && p.filter_half_width <= 0.5) {
                    return bad("need at least one filter with half-width in (0, 0.5]".into());
                }
                if !increasing(&p.eps_grid) || p.eps_grid[0] <= 0.0 {
                    return bad("eps_grid must be positive and strictly increasing".into());
                }
                if p.direction[0].abs() + p.direction[1].abs() == 0.0 {
                    return bad("direction must be nonzero".into());
                }
                let last = *p.eps_grid.last().expect("non-empty");
                let star = KLSpec {
                    gamma: p.kl.gamma + last * p.direction[0],
                    tau: p.kl.tau + last * p.direction[1],
                    ..p.kl
                };
                star.validate()?;
                if p.particles < 64 || p.replications == 0 {
                    return bad("particles >= 64 and replications >= 1 required".into());
                }
            }
            Experiment::Pushforward(p) => {
                let m = p.forward.len();
                check_model(p.dim, p.sigma, &p.y, m)?;
                if p.dim > 2 {
                    return bad("pushforward study supports dim <= 2".into());
                }
                if m == 0 || p.forward.iter().any(|row| row.len() != p.dim) {
                    return bad("forward must be a non-empty m x dim matrix".into());
                }
                if !increasing(&p.eps_grid) || p.eps_grid[0] <= 0.0 {
                    return bad("eps_grid must be positive and strictly increasing".into());
                }
                if p.particles < 64 || p.replications == 0 {
                    return bad("particles >= 64 and replications >= 1 required".into());
                }
            }
            Experiment::Surrogate(p) => {
                check_model(1, p.sigma, &p.y, 1)?;
                if !increasing(&p.widths) || p.widths[0] == 0 {
                    return bad("widths must be positive and strictly increasing".into());
                }
                if p.particles < 64 || p.seeds == 0 {
                    return bad("particles >= 64 and seeds >= 1 required".into());
                }
                HolderPair::new(p.holder.p, p.holder.q)?;
            }
            Experiment::DataPerturbation(p) => {
                check_model(p.dim, p.sigma, &p.y, p.dim)?;
                if !increasing(&p.shifts) || p.shifts[0] <= 0.0 {
                    return bad("shifts must be positive and strictly increasing".into());
                }
                if *p.shifts.last().expect("non-empty") > p.radius {
                    return bad("every shift must lie inside the data ball".into());
                }
                if p.particles < 64 || p.replications == 0 {
                    return bad("particles >= 64 and replications >= 1 required".into());
                }
                HolderPair::new(p.holder.p, p.holder.q)?;
            }
            Experiment::LikelihoodPerturbation(p) => {
                check_model(p.dim, p.sigma, &p.y, p.dim)?;
                if p.particles < 64 || p.replications == 0 || p.perturbations == 0 {
                    return bad("particles >= 64, replications >= 1 and perturbations >= 1 required".into());
                }
                if !(p.max_delta > 0.0) {
                    return bad("max_delta must be positive".into());
                }
                HolderPair::new(p.holder.p, p.holder.q)?;
            }
            Experiment::PriorShift(p) => {
                check_model(p.dim, p.sigma, &p.y, p.dim)?;
                if !increasing(&p.eps_grid) || p.eps_grid[0] <= 0.0 {
                    return bad("eps_grid must be positive and strictly increasing".into());
                }
                if p.particles < 64 || p.replications == 0 {
                    return bad("particles >= 64 and replications >= 1 required".into());
                }
            }
        }
        Ok(())
    }

    /// Stream `k` of the root seed; replication r uses stream r + 1.
    pub fn stream(&self, k: u64) -> SeedSpec {
        SeedSpec::new(self.seed, k)
    }
}

/// Ordinary least squares on (log x, log y).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub log_x: Vec<f64>,
    pub log_y: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn fit_rate(xs: &[f64], ys: &[f64]) -> Result<RateFit, ExperimentError> {
    let n = xs.len().min(ys.len());
    if n < 3 {
        return Err(ExperimentError::TooFewPoints(n));
    }
    if let Some((&x, &y)) = xs.iter().zip(ys).find(|(x, y)| !(**x > 0.0 && **y > 0.0)) {
        return Err(ExperimentError::NonPositiveInput { x, y });
    }
    let log_x: Vec<f64> = xs[..n].iter().map(|x| x.ln()).collect();
    let log_y: Vec<f64> = ys[..n].iter().map(|y| y.ln()).collect();
    let mx = log_x.iter().sum::<f64>() / n as f64;
    let my = log_y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = log_x.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = log_x.iter().zip(&log_y).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = log_y.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    Ok(RateFit { log_x, log_y, slope, intercept, r_squared })
}

/// One line of `rates.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub experiment: String,
    pub param: String,
    pub n_or_eps: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
    pub margin: f64,
}

/// One line of `bounds.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub experiment: String,
    pub param: String,
    pub x: f64,
    pub replication: usize,
    pub report: BoundReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    /// A theoretical inequality evaluated on the particles.
    Bound,
    /// A fitted convergence rate.
    Rate,
    /// An exact identity (zero perturbation, translation, ordering).
    Sanity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub kind: CheckKind,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub experiment: String,
    pub rows: Vec<RateRow>,
    pub reports: Vec<ReportRecord>,
    pub fits: BTreeMap<String, RateFit>,
    pub checks: Vec<Check>,
    pub diagnostics: BTreeMap<String, f64>,
    /// Seed streams consumed, in aggregation order.
    pub streams: Vec<u64>,
}

impl ExperimentOutcome {
    fn new(experiment: &str) -> Self {
        Self { experiment: experiment.to_string(), ..Default::default() }
    }

    fn row(&mut self, param: &str, x: f64, lhs: f64, rhs: f64) {
        self.rows.push(RateRow {
            experiment: self.experiment.clone(),
            param: param.to_string(),
            n_or_eps: x,
            lhs,
            rhs,
            satisfied: lhs <= rhs,
            margin: rhs - lhs,
        });
    }

    fn record(&mut self, param: &str, x: f64, replication: usize, report: BoundReport) {
        self.reports.push(ReportRecord {
            experiment: self.experiment.clone(),
            param: param.to_string(),
            x,
            replication,
            report,
        });
    }

    fn check(&mut self, name: &str, kind: CheckKind, passed: bool, detail: String) {
        self.checks.push(Check { name: name.to_string(), kind, passed, detail });
    }

    pub fn check_named(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Whether every bound and sanity check passed; rate checks are reported
    /// but do not gate.
    pub fn bounds_hold(&self) -> bool {
        self.checks.iter().filter(|c| c.kind != CheckKind::Rate).all(|c| c.passed)
    }

    pub fn all_checks_pass(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn rates_csv(&self) -> Result<Vec<u8>, ExperimentError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["experiment", "param", "N_or_eps", "lhs", "rhs", "satisfied", "margin"])?;
        for r in &self.rows {
            w.write_record([
                r.experiment.clone(),
                r.param.clone(),
                format_f64(r.n_or_eps),
                format_f64(r.lhs),
                format_f64(r.rhs),
                r.satisfied.to_string(),
                format_f64(r.margin),
            ])?;
        }
        w.into_inner().map_err(|e| ExperimentError::Io(e.into_error()))
    }

    pub fn bounds_jsonl(&self) -> Result<String, ExperimentError> {
        let mut out = String::new();
        for record in &self.reports {
            out.push_str(&serde_json::to_string(record)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes `rates.csv`, `bounds.jsonl` and `manifest.json` into `dir`.
    pub fn write_outputs(&self, dir: &Path, config: &ExperimentConfig) -> Result<(), ExperimentError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("rates.csv"), self.rates_csv()?)?;
        fs::write(dir.join("bounds.jsonl"), self.bounds_jsonl()?)?;
        let manifest = serde_json::json!({
            "config": config,
            "version": env!("CARGO_PKG_VERSION"),
            "seeds": { "root": config.seed, "streams": self.streams },
            "fits": self.fits,
            "checks": self.checks,
            "diagnostics": self.diagnostics,
            "bounds_hold": self.bounds_hold(),
            "all_checks_pass": self.all_checks_pass(),
        });
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}
