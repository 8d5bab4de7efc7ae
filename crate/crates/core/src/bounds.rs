//! Monte-Carlo assembly of the stability bounds' right-hand sides.
//!
//! Every norm is taken under the particle measure it is handed, so for
//! discrete priors the assembled bounds hold exactly; the standard errors
//! describe how far those particle norms may sit from their population
//! values and feed the 3-sigma slack of [`BoundReport::satisfied`].

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::DistanceLikeCost;
use crate::measure::{compensated_sum, euclidean_norm, reweight, MeasureError, ParticleMeasure, Reweighted};
use crate::potential::{Envelopes, Potential};
use crate::prior::KLSpec;
use crate::transport::{exact_ot, ipm_value, paired_coupling_cost, IpmMode, TransportError};

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("Hölder exponents p={p}, q={q} are not conjugate")]
    NotConjugate { p: f64, q: f64 },
    #[error("evidence of `{label}` underflowed; the likelihood is incompatible with the prior")]
    EvidenceUnderflow { label: String },
    #[error("‖h‖_L1 of `{label}` is zero on the particles")]
    EnvelopeUnderflow { label: String },
    #[error("potential `{0}` carries no Lipschitz field")]
    MissingLipschitz(String),
    #[error("potential `{0}` carries no data-Lipschitz function")]
    MissingDataLipschitz(String),
    #[error("Lipschitz field of `{potential}` is stated against `{field_cost}`, bound requested for `{cost}`")]
    CostMismatch { potential: String, field_cost: String, cost: String },
    #[error("|y - y'| = {distance} exceeds the ball radius {radius}")]
    OutsideBall { distance: f64, radius: f64 },
    #[error("envelope evaluation failed on the data ball at z={z:?}")]
    BallSupFailure { z: Vec<f64> },
    #[error("paired coupling needs particle-aligned priors")]
    NotPaired,
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Conjugate exponents 1/p + 1/q = 1 on [1, ∞].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HolderPair {
    #[serde(with = "extended_real")]
    pub p: f64,
    #[serde(with = "extended_real")]
    pub q: f64,
}

impl HolderPair {
    pub fn new(p: f64, q: f64) -> Result<Self, BoundsError> {
        let inv = |x: f64| if x.is_infinite() { 0.0 } else { 1.0 / x };
        if !(p >= 1.0 && q >= 1.0) || (inv(p) + inv(q) - 1.0).abs() > 1e-12 {
            return Err(BoundsError::NotConjugate { p, q });
        }
        Ok(Self { p, q })
    }

    /// (p, p/(p-1)).
    pub fn with_p(p: f64) -> Result<Self, BoundsError> {
        let q = if p == 1.0 {
            f64::INFINITY
        } else if p.is_infinite() {
            1.0
        } else {
            p / (p - 1.0)
        };
        Self::new(p, q)
    }
}

/// Serializes ∞ as the string "inf" so configs stay plain JSON.
mod extended_real {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*x)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) if t == "inf" || t == "infinity" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got `{t}`"))),
        }
    }
}

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, se: 0.0 }
    }
}

/// ‖fn‖_{L^p(prior)} over the particles. For finite p the standard error
/// comes from the delta method applied to Σ w_i |fn(u_i)|^p; p = ∞ is the
/// maximum over positive-weight particles with no standard error.
pub fn lp_norm_under_prior<F>(f: F, prior: &ParticleMeasure, p: f64) -> Estimate
where
    F: Fn(&[f64]) -> f64,
{
    let w = prior.weights();
    if p.is_infinite() {
        let max = prior
            .points()
            .zip(w)
            .filter(|(_, &wi)| wi > 0.0)
            .map(|(u, _)| f(u).abs())
            .fold(0.0f64, f64::max);
        return Estimate::exact(max);
    }
    let powered: Vec<f64> = prior.points().map(|u| f(u).abs().powf(p)).collect();
    let mean = compensated_sum(powered.iter().zip(w).map(|(v, w)| v * w));
    let var = compensated_sum(powered.iter().zip(w).map(|(v, w)| w * w * (v - mean) * (v - mean)));
    let value = mean.powf(1.0 / p);
    let se = if mean > 0.0 { value / (p * mean) * var.sqrt() } else { 0.0 };
    Estimate { value, se }
}

/// How the left-hand side was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LhsMode {
    /// The IPM itself (metric cost).
    Exact,
    /// An optimal-transport value that dominates the IPM.
    UpperBound,
    /// The cost of an explicit coupling.
    Coupling,
}

impl From<IpmMode> for LhsMode {
    fn from(mode: IpmMode) -> Self {
        match mode {
            IpmMode::Exact => LhsMode::Exact,
            IpmMode::UpperBound => LhsMode::UpperBound,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub label: String,
    pub lhs_estimate: f64,
    pub lhs_mode: LhsMode,
    pub rhs_value: f64,
    pub rhs_components: BTreeMap<String, f64>,
    pub mc_standard_errors: BTreeMap<String, f64>,
    /// Standard error of rhs − lhs propagated from the component errors.
    pub combined_se: f64,
    pub satisfied: bool,
    /// rhs − lhs.
    pub margin: f64,
}

/// A right-hand side built as constant · Π x_i^{e_i}, tracking the
/// first-order propagation of the factors' standard errors.
#[derive(Debug, Default)]
struct ProductAssembly {
    constant: f64,
    factors: Vec<(String, Estimate, f64)>,
}

impl ProductAssembly {
    fn new(constant: f64) -> Self {
        Self { constant, factors: Vec::new() }
    }

    fn factor(mut self, name: &str, est: Estimate, exponent: f64) -> Self {
        self.factors.push((name.to_string(), est, exponent));
        self
    }

    fn value(&self) -> f64 {
        self.factors.iter().fold(self.constant, |acc, (_, e, k)| acc * e.value.powf(*k))
    }

    fn se(&self) -> f64 {
        let mut var = 0.0;
        for (i, (_, est, k)) in self.factors.iter().enumerate() {
            if est.se == 0.0 {
                continue;
            }
            // ∂/∂x_i of the product, valid also when x_i = 0 and k = 1.
            let others = self
                .factors
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .fold(self.constant, |acc, (_, (_, e, kk))| acc * e.value.powf(*kk));
            let partial = others * k * est.value.powf(k - 1.0);
            var += (partial * est.se).powi(2);
        }
        var.sqrt()
    }

    fn report(self, label: &str, lhs: f64, lhs_se: f64, lhs_mode: LhsMode) -> BoundReport {
        let rhs_value = self.value();
        let rhs_se = self.se();
        let mut rhs_components = BTreeMap::new();
        let mut mc_standard_errors = BTreeMap::new();
        rhs_components.insert("constant".to_string(), self.constant);
        for (name, est, _) in &self.factors {
            rhs_components.insert(name.clone(), est.value);
            if est.se > 0.0 {
                mc_standard_errors.insert(name.clone(), est.se);
            }
        }
        if lhs_se > 0.0 {
            mc_standard_errors.insert("lhs".to_string(), lhs_se);
        }
        mc_standard_errors.insert("rhs".to_string(), rhs_se);
        BoundReport::new(label, lhs, lhs_mode, rhs_value, rhs_components, mc_standard_errors, lhs_se, rhs_se)
    }
}

impl BoundReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        label: &str,
        lhs_estimate: f64,
        lhs_mode: LhsMode,
        rhs_value: f64,
        rhs_components: BTreeMap<String, f64>,
        mc_standard_errors: BTreeMap<String, f64>,
        lhs_se: f64,
        rhs_se: f64,
    ) -> Self {
        let combined_se = (lhs_se * lhs_se + rhs_se * rhs_se).sqrt();
        Self {
            label: label.to_string(),
            lhs_estimate,
            lhs_mode,
            rhs_value,
            rhs_components,
            mc_standard_errors,
            combined_se,
            satisfied: lhs_estimate <= rhs_value + 3.0 * combined_se,
            margin: rhs_value - lhs_estimate,
        }
    }
}

fn posterior(prior: &ParticleMeasure, phi: &Potential, y: &[f64]) -> Result<Reweighted, BoundsError> {
    let out = reweight(prior, phi, y).map_err(|e| match e {
        MeasureError::AllWeightsUnderflow => BoundsError::EvidenceUnderflow { label: phi.label.clone() },
        other => BoundsError::Measure(other),
    })?;
    if !out.log_evidence.is_finite() {
        return Err(BoundsError::EvidenceUnderflow { label: phi.label.clone() });
    }
    Ok(out)
}

/// Z = Σ w_i exp(-Φ(u_i)) with its Monte-Carlo standard error.
pub fn evidence_estimate(prior: &ParticleMeasure, phi: &Potential, y: &[f64]) -> Result<Estimate, BoundsError> {
    let post = posterior(prior, phi, y)?;
    let z = post.evidence();
    if z <= 0.0 {
        return Err(BoundsError::EvidenceUnderflow { label: phi.label.clone() });
    }
    let w = prior.weights();
    let var = compensated_sum(prior.points().zip(w).map(|(u, w)| {
        let t = (-phi.phi(u, y)).exp() - z;
        w * w * t * t
    }));
    Ok(Estimate { value: z, se: var.sqrt() })
}

fn origin(dim: usize) -> Vec<f64> {
    vec![0.0; dim]
}

fn h_norm(h: impl Fn(&[f64]) -> f64, prior: &ParticleMeasure, label: &str) -> Result<Estimate, BoundsError> {
    let est = lp_norm_under_prior(h, prior, 1.0);
    if !(est.value > 0.0) {
        return Err(BoundsError::EnvelopeUnderflow { label: label.to_string() });
    }
    Ok(est)
}

struct LikelihoodTerms {
    g: f64,
    norm_fc0: Estimate,
    norm_f: Estimate,
    lhs: f64,
    lhs_mode: LhsMode,
    z: Estimate,
    z_prime: Estimate,
}

fn likelihood_terms(
    phi: &Potential,
    phi_prime: &Potential,
    env: &Envelopes,
    prior: &ParticleMeasure,
    cost: &DistanceLikeCost,
    holder: HolderPair,
    y: &[f64],
    y_prime: &[f64],
) -> Result<LikelihoodTerms, BoundsError> {
    let zero = origin(prior.dim());
    let norm_fc0 = lp_norm_under_prior(|u| (env.f)(u) * cost.eval(u, &zero), prior, holder.p);
    let norm_f = lp_norm_under_prior(|u| (env.f)(u), prior, holder.p);
    let nu = posterior(prior, phi, y)?;
    let nu_prime = posterior(prior, phi_prime, y_prime)?;
    let (lhs, mode) = ipm_value(&nu.posterior, &nu_prime.posterior, cost)?;
    Ok(LikelihoodTerms {
        g: (env.g)(y),
        norm_fc0,
        norm_f,
        lhs,
        lhs_mode: mode.into(),
        z: evidence_estimate(prior, phi, y)?,
        z_prime: evidence_estimate(prior, phi_prime, y_prime)?,
    })
}

/// ‖Φ(·;y) − Φ'(·;y')‖_{L^q(prior)}.
fn potential_gap(
    phi: &Potential,
    phi_prime: &Potential,
    prior: &ParticleMeasure,
    q: f64,
    y: &[f64],
    y_prime: &[f64],
) -> Estimate {
    lp_norm_under_prior(|u| phi.phi(u, y) - phi_prime.phi(u, y_prime), prior, q)
}

/// Likelihood perturbation with envelopes merged as f∨f', g∨g', h∧h':
/// 𝒟(ν,ν';c) ≤ 2g²‖f c(·,0)‖_p‖f‖_p / ‖h‖²_{L¹} · ‖Φ − Φ'‖_q.
/// The left side is the transport value between the two posteriors on the
/// same prior particles.
pub fn likelihood_bound_rhs(
    phi: &Potential,
    phi_prime: &Potential,
    prior: &ParticleMeasure,
    cost: &DistanceLikeCost,
    holder: HolderPair,
    y: &[f64],
) -> Result<BoundReport, BoundsError> {
    let gap = potential_gap(phi, phi_prime, prior, holder.q, y, y);
    likelihood_bound_rhs_with_gap(phi, phi_prime, prior, cost, holder, y, gap)
}

/// [`likelihood_bound_rhs`] with the factor ‖Φ − Φ'‖_q replaced by a
/// caller-supplied upper bound, e.g. a sup error certified on a grid.
pub fn likelihood_bound_rhs_with_gap(
    phi: &Potential,
    phi_prime: &Potential,
    prior: &ParticleMeasure,
    cost: &DistanceLikeCost,
    holder: HolderPair,
    y: &[f64],
    gap: Estimate,
) -> Result<BoundReport, BoundsError> {
    let env = phi.envelopes().merge(phi_prime.envelopes());
    let t = likelihood_terms(phi, phi_prime, &env, prior, cost, holder, y, y)?;
    let h = h_norm(|u| (env.h)(u, y), prior, &phi.label)?;
    let mut report = ProductAssembly::new(2.0)
        .factor("g_y", Estimate::exact(t.g), 2.0)
        .factor("norm_fc0_Lp", t.norm_fc0, 1.0)
        .factor("norm_f_Lp", t.norm_f, 1.0)
        .factor("norm_h_L1", h, -2.0)
        .factor("norm_phi_diff_Lq", gap, 1.0)
        .report("likelihood_perturbation", t.lhs, 0.0, t.lhs_mode);
    report.rhs_components.insert("evidence_z".into(), t.z.value);
    report.rhs_components.insert("evidence_z_prime".into(), t.z_prime.value);
    Ok(report)
}

/// The evidence form g‖f c(·,0)‖_p[Z + g‖f‖_p]/(Z Z') · ‖Φ − Φ'‖_q, with Z
/// and Z' supplied by the caller.
#[allow(clippy::too_many_arguments)]
pub fn likelihood_bound_rhs_explicit(
    phi: &Potential,
    phi_prime: &Potential,
    prior: &ParticleMeasure,
    cost: &DistanceLikeCost,
    holder: HolderPair,
    y: &[f64],
    z_hat: Estimate,
    z_prime_hat: Estimate,
) -> Result<BoundReport, BoundsError> {
    if !(z_hat.value > 0.0 && z_prime_hat.value > 0.0) {
        return Err(BoundsError::EvidenceUnderflow { label: phi.label.clone() });
    }
    let env = phi.envelopes().merge(phi_prime.envelopes());
    let t = likelihood_terms(phi, phi_prime, &env, prior, cost, holder, y, y)?;
    let gap = potential_gap(phi, phi_prime, prior, holder.q, y, y);
    let bracket = Estimate {
        value: z_hat.value + t.g * t.norm_f.value,
        se: (z_hat.se.powi(2) + (t.g * t.norm_f.se).powi(2)).sqrt(),
    };
    Ok(ProductAssembly::new(1.0)
        .factor("g_y", Estimate::exact(t.g), 1.0)
        .factor("norm_fc0_Lp", t.norm_fc0, 1.0)
        .factor("z_plus_g_norm_f", bracket, 1.0)
        .factor("evidence_z", z_hat, -1.0)
        .factor("evidence_z_prime", z_prime_hat, -1.0)
        .factor("norm_phi_diff_Lq", gap, 1.0)
        .report("likelihood_perturbation_explicit", t.lhs, 0.0, t.lhs_mode))
}

/// Which data-perturbation corollary to assemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataBoundVariant {
    /// Uses ‖Φ(·;y) − Φ(·;y')‖_q directly.
    PotentialGap,
    /// Uses ‖b‖_q ‖y − y'‖ from the data-Lipschitz function.
    Lipschitz,
}

/// Deterministic sample of the closed ball B_r(y): the centre, and for each of
/// four radii the ± coordinate directions, the ± radial direction and eight
/// fixed pseudo-random directions.
pub fn data_ball_grid(y: &[f64], radius: f64) -> Vec<Vec<f64>> {
    let k = y.len();
    let mut directions: Vec<Vec<f64>> = Vec::new();
    for i in 0..k {
        for sign in [1.0, -1.0] {
            let mut e = vec![0.0; k];
            e[i] = sign;
            directions.push(e);
        }
    }
    let ny = euclidean_norm(y);
    if ny > 0.0 {
        directions.push(y.iter().map(|v| v / ny).collect());
        directions.push(y.iter().map(|v| -v / ny).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x0ba1);
    for _ in 0..8 {
        let v: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = euclidean_norm(&v);
        if n > 0.0 {
            directions.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let mut grid = vec![y.to_vec()];
    for frac in [0.25, 0.5, 0.75, 1.0] {
        for dir in &directions {
            grid.push(y.iter().zip(dir).map(|(c, d)| c + frac * radius * d).collect());
        }
    }
    grid
}

/// Data perturbation y → y' within the ball B_r(y), with sup_{B_r} g² and
/// ‖inf_{B_r} h(·,z)‖_{L¹} taken over [`data_ball_grid`].
#[allow(clippy::too_many_arguments)]
pub fn data_perturbation_bound(
    phi: &Potential,
    prior: &ParticleMeasure,
    cost: &DistanceLikeCost,
    holder: HolderPair,
    y: &[f64],
    y_prime: &[f64],
    radius: f64,
    variant: DataBoundVariant,
) -> Result<BoundReport, BoundsError> {
    let distance = euclidean_norm(&y.iter().zip(y_prime).map(|(a, b)| a - b).collect::<Vec<_>>());
    if distance > radius * (1.0 + 1e-12) {
        return Err(BoundsError::OutsideBall { distance, radius });
    }
    let grid = data_ball_grid(y, radius);
    let env = phi.envelopes();
    let mut sup_g = 0.0f64;
    for z in &grid {
        let g = (env.g)(z);
        if !g.is_finite() {
            return Err(BoundsError::BallSupFailure { z: z.clone() });
        }
        sup_g = sup_g.max(g);
    }
    let mut inf_h = Vec::with_capacity(prior.len());
    for u in prior.points() {
        let mut lo = f64::INFINITY;
        for z in &grid {
            let h = (env.h)(u, z);
            if !h.is_finite() {
                return Err(BoundsError::BallSupFailure { z: z.clone() });
            }
            lo = lo.min(h);
        }
        inf_h.push(lo);
    }
    let h = {
        let w = prior.weights();
        let mean = compensated_sum(inf_h.iter().zip(w).map(|(h, w)| h * w));
        let var = compensated_sum(inf_h.iter().zip(w).map(|(h, w)| w * w * (h - mean).powi(2)));
        if !(mean > 0.0) {
            return Err(BoundsError::EnvelopeUnderflow { label: phi.label.clone() });
        }
        Estimate { value: mean, se: var.sqrt() }
    };
    let t = likelihood_terms(phi, phi, env, prior, cost, holder, y, y_prime)?;
    let base = ProductAssembly::new(2.0)
        .factor("sup_ball_g", Estimate::exact(sup_g), 2.0)
        .factor("norm_fc0_Lp", t.norm_fc0, 1.0)
        .factor("norm_f_Lp", t.norm_f, 1.0)
        .factor("norm_inf_ball_h_L1", h, -2.0);
    let assembly = match variant {
        DataBoundVariant::PotentialGap => {
            base.factor("norm_phi_diff_Lq", potential_gap(phi, phi, prior, holder.q, y, y_prime), 1.0)
        }
        DataBoundVariant::Lipschitz => {
            let b = phi.data_lipschitz().ok_or_else(|| BoundsError::MissingDataLipschitz(phi.label.clone()))?;
            let norm_b = lp_norm_under_prior(|u| b(u, y, radius), prior, holder.q);
            base.factor("norm_b_Lq", norm_b, 1.0).factor("data_shift", Estimate::exact(distance), 1.0)
        }
    };
    Ok(assembly.report("data_perturbation", t.lhs, 0.0, t.lhs_mode))
}

/// How 𝒟(μ, μ_*; c_y) is bounded in the prior-perturbation bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorDistanceRoute {
    /// Optimal transport with the adapted cost.
    ExactOt,
    /// The particle-wise coupling u_i ↔ u*_i (common random numbers).
    PairedCoupling,
}

/// Theorem-form and evidence-form reports for a prior perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorBoundReports {
    pub envelope_form: BoundReport,
    pub evidence_form: BoundReport,
}

/// Prior perturbation μ → μ_* under a fixed likelihood:
/// 𝒟(ν,ν_*;c) ≤ g²[‖f‖_{L¹(μ)} + ‖f c(·,0)‖_{L¹(μ)}] / (‖h‖_{L¹(μ)}‖h‖_{L¹(μ_*)}) · 𝒟(μ,μ_*;c_y)
/// and its evidence form g[Z + g‖f c(·,0)‖_{L¹(μ)}]/(Z Z_*) · 𝒟(μ,μ_*;c_y).
pub fn prior_bound_rhs(
    phi: &Potential,
    prior: &ParticleMeasure,
    prior_star: &ParticleMeasure,
    cost: &DistanceLikeCost,
    y: &[f64],
    route: PriorDistanceRoute,
) -> Result<PriorBoundReports, BoundsError> {
    let lip = phi.lipschitz().ok_or_else(|| BoundsError::MissingLipschitz(phi.label.clone()))?;
    if lip.cost.kind != cost.kind || lip.cost.description != cost.description {
        return Err(BoundsError::CostMismatch {
            potential: phi.label.clone(),
            field_cost: lip.cost.description.clone(),
            cost: cost.description.clone(),
        });
    }
    let c_y = phi.adapted_cost(y).expect("Lipschitz field present");
    let prior_distance = match route {
        PriorDistanceRoute::ExactOt => Estimate::exact(exact_ot(prior, prior_star, &c_y)?.primal_cost),
        PriorDistanceRoute::PairedCoupling => {
            let est = paired_coupling_cost(prior, prior_star, &c_y).map_err(|_| BoundsError::NotPaired)?;
            Estimate { value: est.mean, se: est.se }
        }
    };
    let env = phi.envelopes();
    let zero = origin(prior.dim());
    let g = (env.g)(y);
    let norm_f = lp_norm_under_prior(|u| (env.f)(u), prior, 1.0);
    let norm_fc0 = lp_norm_under_prior(|u| (env.f)(u) * cost.eval(u, &zero), prior, 1.0);
    let h = h_norm(|u| (env.h)(u, y), prior, &phi.label)?;
    let h_star = h_norm(|u| (env.h)(u, y), prior_star, &phi.label)?;
    let nu = posterior(prior, phi, y)?;
    let nu_star = posterior(prior_star, phi, y)?;
    let (lhs, mode) = ipm_value(&nu.posterior, &nu_star.posterior, cost)?;
    let z = evidence_estimate(prior, phi, y)?;
    let z_star = evidence_estimate(prior_star, phi, y)?;
    let distance_name = match route {
        PriorDistanceRoute::ExactOt => "ipm_prior_cy",
        PriorDistanceRoute::PairedCoupling => "coupling_prior_cy",
    };

    let norm_sum = Estimate {
        value: norm_f.value + norm_fc0.value,
        se: (norm_f.se.powi(2) + norm_fc0.se.powi(2)).sqrt(),
    };
    let mut envelope_form = ProductAssembly::new(1.0)
        .factor("g_y", Estimate::exact(g), 2.0)
        .factor("norm_f_plus_fc0_L1", norm_sum, 1.0)
        .factor("norm_h_L1_prior", h, -1.0)
        .factor("norm_h_L1_prior_star", h_star, -1.0)
        .factor(distance_name, prior_distance, 1.0)
        .report("prior_perturbation", lhs, 0.0, mode.into());
    envelope_form.rhs_components.insert("norm_f_L1".into(), norm_f.value);
    envelope_form.rhs_components.insert("norm_fc0_L1".into(), norm_fc0.value);
    envelope_form.rhs_components.insert("evidence_z".into(), z.value);
    envelope_form.rhs_components.insert("evidence_z_star".into(), z_star.value);

    let bracket = Estimate {
        value: z.value + g * norm_fc0.value,
        se: (z.se.powi(2) + (g * norm_fc0.se).powi(2)).sqrt(),
    };
    let evidence_form = ProductAssembly::new(1.0)
        .factor("g_y", Estimate::exact(g), 1.0)
        .factor("z_plus_g_norm_fc0", bracket, 1.0)
        .factor("evidence_z", z, -1.0)
        .factor("evidence_z_star", z_star, -1.0)
        .factor(distance_name, prior_distance, 1.0)
        .report("prior_perturbation_explicit", lhs, 0.0, mode.into());
    Ok(PriorBoundReports { envelope_form, evidence_form })
}

/// Inputs of the chain 𝒲₁(ν,ν_*) ≤ [1∨L](1+μ|·|)(1+μ|·|²+μ_*|·|²)^{1/2} / (‖h‖_{L¹(μ)}‖h‖_{L¹(μ_*)}) · 𝒲₂(μ,μ_*)
/// for f = g = 1, c = |u−v| and a Lipschitz constant L bounded uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct W1W2Chain {
    pub lipschitz_sup: f64,
    pub first_moment: Estimate,
    pub second_moment: Estimate,
    pub second_moment_star: Estimate,
    pub h_norm: Estimate,
    pub h_norm_star: Estimate,
    /// 𝒲₂(μ, μ_*) or any upper bound on it.
    pub w2: Estimate,
}

impl W1W2Chain {
    pub fn report(&self, label: &str, lhs: f64, lhs_mode: LhsMode) -> BoundReport {
        let one_plus = |e: Estimate| Estimate { value: 1.0 + e.value, se: e.se };
        let moments = Estimate {
            value: 1.0 + self.second_moment.value + self.second_moment_star.value,
            se: (self.second_moment.se.powi(2) + self.second_moment_star.se.powi(2)).sqrt(),
        };
        ProductAssembly::new(1.0)
            .factor("one_or_lipschitz", Estimate::exact(self.lipschitz_sup.max(1.0)), 1.0)
            .factor("one_plus_first_moment", one_plus(self.first_moment), 1.0)
            .factor("one_plus_second_moments", moments, 0.5)
            .factor("norm_h_L1_prior", self.h_norm, -1.0)
            .factor("norm_h_L1_prior_star", self.h_norm_star, -1.0)
            .factor("w2_prior", self.w2, 1.0)
            .report(label, lhs, 0.0, lhs_mode)
    }
}

/// 2^{(1∨(2s−1))/2+1} (E‖u‖^{2s} + E‖u_*‖^{2s})^{1/2}
/// × (𝒲₂²(η,η_*)Σλ_j + Σλ_j‖x_j−x_j*‖² + Σ(√λ_j−√λ*_j)²)^{1/2}.
pub fn product_coupling_bound(
    lambdas: &[f64],
    lambdas_star: &[f64],
    basis_gram_diffs: &[f64],
    w2_eta: f64,
    s: f64,
    moment_2s: f64,
    moment_2s_star: f64,
) -> f64 {
    assert_eq!(lambdas.len(), lambdas_star.len(), "eigenvalue sequences differ in length");
    assert_eq!(lambdas.len(), basis_gram_diffs.len(), "basis differences differ in length");
    let prefactor = 2f64.powf((2.0 * s - 1.0).max(1.0) / 2.0 + 1.0);
    let moments = (moment_2s + moment_2s_star).sqrt();
    let trace: f64 = lambdas.iter().sum();
    let basis: f64 = lambdas.iter().zip(basis_gram_diffs).map(|(l, d)| l * d).sum();
    let sqrt_gap: f64 = lambdas.iter().zip(lambdas_star).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
    prefactor * moments * (w2_eta * w2_eta * trace + basis + sqrt_gap).sqrt()
}

/// E‖u‖^{2s} for u = Σ √λ_j ξ_j x_j with standard Gaussian ξ, in closed form
/// for s ∈ {0, 1, 2}.
pub fn gaussian_kl_moment(lambdas: &[f64], s: u32) -> Option<f64> {
    let trace: f64 = lambdas.iter().sum();
    match s {
        0 => Some(1.0),
        1 => Some(trace),
        2 => Some(trace * trace + 2.0 * lambdas.iter().map(|l| l * l).sum::<f64>()),
        _ => None,
    }
}

/// Bound on ∫(a+‖u‖+‖v‖)²‖u−v‖ dπ₀ for the common-ξ coupling of two Gaussian
/// KL priors sharing a basis: (a+x)² ≤ 2a² + 2x² splits the cost into the
/// s = 0 and s = 2 members of the product-coupling family.
pub fn shifted_quadratic_coupling_bound(lambdas: &[f64], lambdas_star: &[f64], a: f64) -> f64 {
    let zeros = vec![0.0; lambdas.len()];
    let m = |l: &[f64], s| gaussian_kl_moment(l, s).expect("s in {0, 2}");
    let b0 = product_coupling_bound(lambdas, lambdas_star, &zeros, 0.0, 0.0, m(lambdas, 0), m(lambdas_star, 0));
    let b2 = product_coupling_bound(lambdas, lambdas_star, &zeros, 0.0, 2.0, m(lambdas, 2), m(lambdas_star, 2));
    2.0 * a * a * b0 + 2.0 * b2
}

/// One mode of the hyper-parameter chain |√λ_j − √λ*_j| ≤ (λ̃_j+τ)^{−α}|γ−γ*|
/// + αγ*((λ̃_j+τ)^{−α−1} ∨ (λ̃_j+τ*)^{−α−1})|τ−τ*|.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqrtEigenGap {
    pub j: usize,
    pub direct: f64,
    pub triangle: f64,
    pub mean_value: f64,
}

pub fn matern_sqrt_gap_chain(spec: &KLSpec, spec_star: &KLSpec) -> Vec<SqrtEigenGap> {
    let alpha = spec.alpha as f64;
    (1..=spec.truncation.min(spec_star.truncation))
        .map(|j| {
            let lt = (std::f64::consts::PI * j as f64).powi(2);
            let a = (lt + spec.tau).powf(-alpha);
            let b = (lt + spec_star.tau).powf(-alpha);
            let direct = (spec.gamma * a - spec_star.gamma * b).abs();
            let triangle = a * (spec.gamma - spec_star.gamma).abs() + spec_star.gamma * (a - b).abs();
            let derivative = (lt + spec.tau).powf(-alpha - 1.0).max((lt + spec_star.tau).powf(-alpha - 1.0));
            let mean_value = a * (spec.gamma - spec_star.gamma).abs()
                + alpha * spec_star.gamma * derivative * (spec.tau - spec_star.tau).abs();
            SqrtEigenGap { j, direct, triangle, mean_value }
        })
        .collect()
}

/// N^{−1/2} + N^{−1/3} for d < 4, N^{−1/2}log(1+N) + N^{−1/3} for d = 4 and
/// N^{−2/d} + N^{−1/3} for d > 4.
pub fn fournier_rate_envelope(d: usize, n: usize) -> f64 {
    let n = n as f64;
    let third = n.powf(-1.0 / 3.0);
    match d {
        0..=3 => n.powf(-0.5) + third,
        4 => n.powf(-0.5) * (1.0 + n).ln() + third,
        _ => n.powf(-2.0 / d as f64) + third,
    }
}

/// Maximum of a scalar function over the particles' support, used when a
/// Lipschitz field must be bounded uniformly.
pub fn sup_over<F: Fn(&[f64]) -> f64>(points: &ParticleMeasure, f: F) -> f64 {
    points.points().map(f).fold(f64::NEG_INFINITY, f64::max)
}

/// (Σ w_i |u_i|^k) with its standard error.
pub fn norm_moment(measure: &ParticleMeasure, k: f64) -> Estimate {
    let w = measure.weights();
    let values: Vec<f64> = measure.points().map(|u| euclidean_norm(u).powf(k)).collect();
    let mean = compensated_sum(values.iter().zip(w).map(|(v, w)| v * w));
    let var = compensated_sum(values.iter().zip(w).map(|(v, w)| w * w * (v - mean).powi(2)));
    Estimate { value: mean, se: var.sqrt() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::norm_cost;
    use crate::measure::{sample_standard_gaussian, SeedSpec};
    use crate::potential::{gaussian_residual_potential, offset_potential, ForwardMap};

    #[test]
    fn holder_pairs() {
        assert!(HolderPair::new(2.0, 2.0).is_ok());
        assert!(HolderPair::new(1.0, f64::INFINITY).is_ok());
        assert!(HolderPair::new(3.0, 1.5).is_ok());
        assert!(HolderPair::new(2.0, 3.0).is_err());
        assert!(HolderPair::new(0.5, -1.0).is_err());
        assert_eq!(HolderPair::with_p(f64::INFINITY).unwrap().q, 1.0);
        let json = serde_json::to_string(&HolderPair::with_p(1.0).unwrap()).unwrap();
        assert_eq!(json, r#"{"p":1.0,"q":"inf"}"#);
        let back: HolderPair = serde_json::from_str(&json).unwrap();
        assert!(back.q.is_infinite());
    }

    #[test]
    fn lp_norm_examples() {
        let m = sample_standard_gaussian(1, 100, SeedSpec::new(0, 0)).unwrap();
        for p in [1.0, 2.0, f64::INFINITY] {
            assert_eq!(lp_norm_under_prior(|_| 1.0, &m, p).value, 1.0);
        }
        let dirac = ParticleMeasure::dirac(vec![2.0]).unwrap();
        assert!((lp_norm_under_prior(|u| u[0], &dirac, 3.0).value - 2.0).abs() < 1e-15);
    }

    #[test]
    fn lp_norm_of_square_matches_second_moment() {
        let m = sample_standard_gaussian(1, 100_000, SeedSpec::new(4, 0)).unwrap();
        let est = lp_norm_under_prior(|u| u[0] * u[0], &m, 1.0);
        assert!((est.value - 1.0).abs() <= 3.0 * est.se, "{est:?}");
    }

    #[test]
    fn product_coupling_single_mode_hand_value() {
        let v = product_coupling_bound(&[1.0], &[4.0], &[0.0], 0.0, 0.0, 1.0, 1.0);
        assert!((v - 4.0).abs() < 1e-12, "{v}");
        assert_eq!(product_coupling_bound(&[1.0, 0.5], &[1.0, 0.5], &[0.0, 0.0], 0.0, 1.0, 2.0, 2.0), 0.0);
    }

    #[test]
    fn fournier_examples() {
        assert!((fournier_rate_envelope(2, 100) - (0.1 + 100f64.powf(-1.0 / 3.0))).abs() < 1e-15);
        assert!((fournier_rate_envelope(4, 1) - (2f64.ln() + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_likelihood_perturbation_is_zero_over_zero() {
        let phi = gaussian_residual_potential(&ForwardMap::tanh(1), 1.0).unwrap();
        let prior = sample_standard_gaussian(1, 500, SeedSpec::new(2, 0)).unwrap();
        let holder = HolderPair::new(2.0, 2.0).unwrap();
        let r = likelihood_bound_rhs(&phi, &phi, &prior, &norm_cost(1.0).unwrap(), holder, &[0.3]).unwrap();
        assert_eq!((r.lhs_estimate, r.rhs_value), (0.0, 0.0));
        assert!(r.satisfied);
    }

    #[test]
    fn constant_offset_leaves_posterior_unchanged() {
        let phi = gaussian_residual_potential(&ForwardMap::tanh(1), 1.0).unwrap();
        let prior = sample_standard_gaussian(1, 300, SeedSpec::new(3, 0)).unwrap();
        let holder = HolderPair::new(1.0, f64::INFINITY).unwrap();
        let c = norm_cost(1.0).unwrap();
        let rhs: Vec<f64> = [0.1, 0.2]
            .iter()
            .map(|&k| {
                let r = likelihood_bound_rhs(&phi, &offset_potential(&phi, k), &prior, &c, holder, &[0.2]).unwrap();
                assert!(r.lhs_estimate < 1e-12 && r.satisfied);
                r.rhs_value
            })
            .collect();
        assert!(rhs[1] > rhs[0]);
    }

    #[test]
    fn ball_grid_reaches_the_far_radial_point() {
        let grid = data_ball_grid(&[3.0, 4.0], 0.5);
        let far = grid.iter().map(|z| euclidean_norm(z)).fold(0.0, f64::max);
        assert!((far - 5.5).abs() < 1e-12);
        assert!(grid.iter().all(|z| euclidean_norm(&[z[0] - 3.0, z[1] - 4.0]) <= 0.5 + 1e-12));
    }

    #[test]
    fn mean_value_chain_dominates_direct_gap() {
        let spec = KLSpec { gamma: 100.0, tau: 1.0, alpha: 2, truncation: 32 };
        let star = KLSpec { gamma: 100.4, tau: 1.3, ..spec };
        for gap in matern_sqrt_gap_chain(&spec, &star) {
            assert!(gap.direct <= gap.triangle * (1.0 + 1e-12));
            assert!(gap.triangle <= gap.mean_value * (1.0 + 1e-12));
        }
    }
}
