//! Discrete optimal transport between particle measures.
//!
//! [`exact_ot`] solves the transportation linear program with a dense network
//! simplex and returns a plan with dual potentials. For a metric cost the
//! primal value equals the Lipschitz-ball IPM by Kantorovich duality; for any
//! other distance-like cost it is an upper bound on it, which [`ipm_value`]
//! reports through [`IpmMode`].

mod network_simplex;
mod quantile;
mod sinkhorn;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostKind, DistanceLikeCost};
use crate::measure::{compensated_sum, format_f64, ParticleMeasure};

pub use quantile::{quantile_coupling, w1_1d_oracle};
pub use sinkhorn::sinkhorn;

/// Default cap on n·m for the dense solvers.
pub const DEFAULT_MAX_ENTRIES: usize = 4096 * 4096;
/// Weight totals of the two marginals must agree to this.
pub const BALANCE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("instance has {entries} cost entries, cap is {cap}")]
    InstanceTooLarge { entries: usize, cap: usize },
    #[error("marginal masses differ: {source_mass} vs {target_mass}")]
    UnbalancedWeights { source_mass: f64, target_mass: f64 },
    #[error("dimension mismatch: source {source_dim}, target {target_dim}")]
    DimensionMismatch { source_dim: usize, target_dim: usize },
    #[error("cost is not finite at pair ({i}, {j})")]
    NonFiniteCost { i: usize, j: usize },
    #[error("sinkhorn stopped after {iterations} iterations with marginal violation {violation:e}")]
    MaxIterExceeded { plan: Box<TransportPlan>, violation: f64, iterations: usize },
    #[error("network simplex hit its iteration limit ({0})")]
    IterationLimit(usize),
    #[error("network simplex found an unbounded direction")]
    Unbounded,
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("paired samples: {0}")]
    BadPairs(String),
}

/// A coupling between two particle measures with its cost and dual potentials.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub n: usize,
    pub m: usize,
    /// Row-major n×m coupling.
    pub coupling: Vec<f64>,
    pub primal_cost: f64,
    pub dual_u: Vec<f64>,
    pub dual_v: Vec<f64>,
    pub solver_tag: String,
}

impl TransportPlan {
    pub fn mass(&self, i: usize, j: usize) -> f64 {
        self.coupling[i * self.m + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.coupling.chunks(self.m.max(1)).map(|r| compensated_sum(r.iter().copied())).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.m).map(|j| compensated_sum((0..self.n).map(|i| self.mass(i, j)))).collect()
    }

    /// Σ u_i a_i + Σ v_j b_j.
    pub fn dual_objective(&self, source_weights: &[f64], target_weights: &[f64]) -> f64 {
        compensated_sum(
            self.dual_u
                .iter()
                .zip(source_weights)
                .map(|(u, a)| u * a)
                .chain(self.dual_v.iter().zip(target_weights).map(|(v, b)| v * b)),
        )
    }

    pub fn duality_gap(&self, source_weights: &[f64], target_weights: &[f64]) -> f64 {
        self.primal_cost - self.dual_objective(source_weights, target_weights)
    }

    /// max over (i, j) of u_i + v_j − c_ij; nonpositive for a feasible dual.
    pub fn max_dual_violation(&self, cost_matrix: &[f64]) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.n {
            for j in 0..self.m {
                worst = worst.max(self.dual_u[i] + self.dual_v[j] - cost_matrix[i * self.m + j]);
            }
        }
        worst
    }

    /// Writes the nonzero entries as `i,j,mass` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["i", "j", "mass"])?;
        for i in 0..self.n {
            for j in 0..self.m {
                let mass = self.mass(i, j);
                if mass > 0.0 {
                    w.write_record([i.to_string(), j.to_string(), format_f64(mass)])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Dense row-major n×m matrix of c(source_i, target_j), assembled in parallel.
pub fn cost_matrix(
    source: &ParticleMeasure,
    target: &ParticleMeasure,
    cost: &DistanceLikeCost,
) -> Result<Vec<f64>, TransportError> {
    if source.dim() != target.dim() {
        return Err(TransportError::DimensionMismatch { source_dim: source.dim(), target_dim: target.dim() });
    }
    let m = target.len();
    let mut matrix = vec![0.0; source.len() * m];
    matrix.par_chunks_mut(m.max(1)).enumerate().for_each(|(i, row)| {
        let u = source.point(i);
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = cost.eval(u, target.point(j));
        }
    });
    if let Some(k) = matrix.iter().position(|c| !c.is_finite()) {
        return Err(TransportError::NonFiniteCost { i: k / m, j: k % m });
    }
    Ok(matrix)
}

#[derive(Debug, Clone, Copy)]
pub struct ExactOptions {
    pub max_entries: usize,
    pub max_iterations: usize,
}

impl Default for ExactOptions {
    fn default() -> Self {
        Self { max_entries: DEFAULT_MAX_ENTRIES, max_iterations: usize::MAX }
    }
}

pub(crate) fn check_instance(
    source: &ParticleMeasure,
    target: &ParticleMeasure,
    max_entries: usize,
) -> Result<(), TransportError> {
    if source.dim() != target.dim() {
        return Err(TransportError::DimensionMismatch { source_dim: source.dim(), target_dim: target.dim() });
    }
    let entries = source.len().saturating_mul(target.len());
    if entries > max_entries {
        return Err(TransportError::InstanceTooLarge { entries, cap: max_entries });
    }
    let source_mass = compensated_sum(source.weights().iter().copied());
    let target_mass = compensated_sum(target.weights().iter().copied());
    if (source_mass - target_mass).abs() > BALANCE_TOLERANCE {
        return Err(TransportError::UnbalancedWeights { source_mass, target_mass });
    }
    Ok(())
}

/// Optimal coupling for `cost` by network simplex, with default options.
pub fn exact_ot(
    source: &ParticleMeasure,
    target: &ParticleMeasure,
    cost: &DistanceLikeCost,
) -> Result<TransportPlan, TransportError> {
    exact_ot_with(source, target, cost, ExactOptions::default())
}

pub fn exact_ot_with(
    source: &ParticleMeasure,
    target: &ParticleMeasure,
    cost: &DistanceLikeCost,
    options: ExactOptions,
) -> Result<TransportPlan, TransportError> {
    check_instance(source, target, options.max_entries)?;
    let (n, m) = (source.len(), target.len());
    if source == target {
        return Ok(diagonal_plan(source));
    }
    let matrix = cost_matrix(source, target, cost)?;
    let solution = network_simplex::solve(source.weights(), target.weights(), &matrix, options.max_iterations)
        .map_err(|e| match e {
            network_simplex::SimplexFailure::IterationLimit(k) => TransportError::IterationLimit(k),
            network_simplex::SimplexFailure::Unbounded => TransportError::Unbounded,
        })?;
    log::debug!("network simplex: {}x{} in {} pivots", n, m, solution.iterations);
    let coupling: Vec<f64> = solution.flow.iter().map(|&x| x.max(0.0)).collect();
    let primal_cost = compensated_sum(coupling.iter().zip(&matrix).map(|(x, c)| x * c));
    // Sink potentials from the tree, centred; source potentials as their
    // c-transform, which makes the dual feasible up to rounding.
    let offset = solution.pi[n];
    let dual_v: Vec<f64> = (0..m).map(|j| solution.pi[n + j] - offset).collect();
    let dual_u: Vec<f64> = (0..n)
        .map(|i| {
            let row = &matrix[i * m..(i + 1) * m];
            row.iter().zip(&dual_v).map(|(c, v)| c - v).fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(TransportPlan { n, m, coupling, primal_cost, dual_u, dual_v, solver_tag: "network_simplex".into() })
}

fn diagonal_plan(measure: &ParticleMeasure) -> TransportPlan {
    let n = measure.len();
    let mut coupling = vec![0.0; n * n];
    for (i, w) in measure.weights().iter().enumerate() {
        coupling[i * n + i] = *w;
    }
    TransportPlan {
        n,
        m: n,
        coupling,
        primal_cost: 0.0,
        dual_u: vec![0.0; n],
        dual_v: vec![0.0; n],
        solver_tag: "diagonal".into(),
    }
}

/// Whether an IPM value is the IPM itself or an upper bound on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IpmMode {
    Exact,
    UpperBound,
}

/// 𝒲(source, target; cost), flagged exact when the cost is a metric.
///
/// One-dimensional |u − v|^p costs are solved through the quantile coupling,
/// which is optimal for every convex power and scales to large supports.
pub fn ipm_value(
    source: &ParticleMeasure,
    target: &ParticleMeasure,
    cost: &DistanceLikeCost,
) -> Result<(f64, IpmMode), TransportError> {
    let mode = if cost.is_metric { IpmMode::Exact } else { IpmMode::UpperBound };
    if let CostKind::NormPower { p } = cost.kind {
        if source.dim() == 1 && target.dim() == 1 {
            check_instance(source, target, usize::MAX)?;
            let wp = w1_1d_oracle(source, target, p)?;
            return Ok((wp.powf(p), mode));
        }
    }
    Ok((exact_ot(source, target, cost)?.primal_cost, mode))
}

/// Monte-Carlo estimate of ∫ c dπ₀ for an explicit coupling π₀.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingEstimate {
    pub mean: f64,
    pub se: f64,
}

/// Mean cost over equally weighted coupled pairs with its standard error.
pub fn coupling_cost<'a, I>(pairs: I, cost: &DistanceLikeCost) -> CouplingEstimate
where
    I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
{
    let values: Vec<f64> = pairs.into_iter().map(|(u, v)| cost.eval(u, v)).collect();
    mean_and_se(&values)
}

/// ∫ c dπ₀ where π₀ pairs particle i of `a` with particle i of `b`; both
/// measures must carry the same weights.
pub fn paired_coupling_cost(
    a: &ParticleMeasure,
    b: &ParticleMeasure,
    cost: &DistanceLikeCost,
) -> Result<CouplingEstimate, TransportError> {
    if a.len() != b.len() {
        return Err(TransportError::BadPairs(format!("{} vs {} particles", a.len(), b.len())));
    }
    if a.weights().iter().zip(b.weights()).any(|(x, y)| (x - y).abs() > BALANCE_TOLERANCE) {
        return Err(TransportError::BadPairs("weights differ".into()));
    }
    let values: Vec<f64> = (0..a.len()).into_par_iter().map(|i| cost.eval(a.point(i), b.point(i))).collect();
    let w = a.weights();
    let mean = compensated_sum(values.iter().zip(w).map(|(c, w)| c * w));
    let var = compensated_sum(values.iter().zip(w).map(|(c, w)| w * w * (c - mean).powi(2)));
    Ok(CouplingEstimate { mean, se: var.sqrt() })
}

pub(crate) fn mean_and_se(values: &[f64]) -> CouplingEstimate {
    let n = values.len();
    if n == 0 {
        return CouplingEstimate { mean: f64::NAN, se: f64::NAN };
    }
    let mean = compensated_sum(values.iter().copied()) / n as f64;
    let se = if n > 1 {
        let var = compensated_sum(values.iter().map(|v| (v - mean).powi(2))) / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    CouplingEstimate { mean, se }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    #[default]
    Exact,
    Sinkhorn,
}

/// Solver settings as read from experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default)]
    pub solver: SolverKind,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_epsilon() -> f64 {
    0.01
}
fn default_max_iter() -> usize {
    10_000
}
fn default_tol() -> f64 {
    1e-9
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { solver: SolverKind::Exact, epsilon: default_epsilon(), max_iter: default_max_iter(), tol: default_tol() }
    }
}

impl SolverConfig {
    pub fn solve(
        &self,
        source: &ParticleMeasure,
        target: &ParticleMeasure,
        cost: &DistanceLikeCost,
    ) -> Result<TransportPlan, TransportError> {
        match self.solver {
            SolverKind::Exact => exact_ot(source, target, cost),
            SolverKind::Sinkhorn => sinkhorn(source, target, cost, self.epsilon, self.max_iter, self.tol),
        }
    }
}
