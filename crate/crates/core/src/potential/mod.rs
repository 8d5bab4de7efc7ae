//! Likelihood potentials Φ(u; y) carried together with their envelope
//! functions f, g, h and optional Lipschitz fields.

mod surrogate;

pub use surrogate::{
    fit_surrogate, relu_forward, surrogate_potential, FitOptions, ReluSurrogate, SurrogateError,
    SurrogateFit,
};

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::cost::{
    adapted_cost, norm_cost, AdaptedCostSpec, DataDependence, DistanceLikeCost, LipschitzField,
    PointFn,
};
use crate::measure::euclidean_norm;

/// A map (u, y) → ℝ.
pub type DataFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
/// b(u; y, r): data-Lipschitz field valid on the ball of radius r around y.
pub type DataLipschitzFn = Arc<dyn Fn(&[f64], &[f64], f64) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Debug, Error)]
pub enum PotentialError {
    #[error("forward map `{0}` carries no boundedness metadata; envelopes cannot be derived")]
    MissingEnvelope(String),
    #[error("noise level sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error(
        "envelope violated for `{label}` at u={u:?}, y={y:?}: need {lower} <= phi={phi} <= {upper}"
    )]
    EnvelopeViolation { label: String, u: Vec<f64>, y: Vec<f64>, lower: f64, phi: f64, upper: f64 },
    #[error("lipschitz field violated for `{label}` at u={u:?}, v={v:?}: |dphi|={diff} > {bound}")]
    LipschitzViolation { label: String, u: Vec<f64>, v: Vec<f64>, diff: f64, bound: f64 },
    #[error("potential `{label}` is not finite at u={u:?}")]
    NonFinite { label: String, u: Vec<f64> },
}

/// The functions f, g, h of the two-sided bound
/// -log f(u) - log g(y) <= Φ(u;y) <= -log h(u,y).
#[derive(Clone)]
pub struct Envelopes {
    pub f: PointFn,
    pub g: PointFn,
    pub h: DataFn,
}

impl fmt::Debug for Envelopes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Envelopes { .. }")
    }
}

impl Envelopes {
    pub fn constant(f: f64, g: f64, h: f64) -> Self {
        Self { f: Arc::new(move |_| f), g: Arc::new(move |_| g), h: Arc::new(move |_, _| h) }
    }

    /// f ∨ f', g ∨ g', h ∧ h': a common envelope for two potentials.
    pub fn merge(&self, other: &Envelopes) -> Envelopes {
        let (f1, f2) = (Arc::clone(&self.f), Arc::clone(&other.f));
        let (g1, g2) = (Arc::clone(&self.g), Arc::clone(&other.g));
        let (h1, h2) = (Arc::clone(&self.h), Arc::clone(&other.h));
        Envelopes {
            f: Arc::new(move |u| f1(u).max(f2(u))),
            g: Arc::new(move |y| g1(y).max(g2(y))),
            h: Arc::new(move |u, y| h1(u, y).min(h2(u, y))),
        }
    }

    /// Envelopes of Φ + e for some |e| <= slack: f e^{slack}, g, h e^{-slack}.
    pub fn widened(&self, slack: f64) -> Envelopes {
        let (f, h) = (Arc::clone(&self.f), Arc::clone(&self.h));
        let grow = slack.exp();
        Envelopes {
            f: Arc::new(move |u| f(u) * grow),
            g: Arc::clone(&self.g),
            h: Arc::new(move |u, y| h(u, y) / grow),
        }
    }
}

/// A Lipschitz field together with the cost it is stated against:
/// |Φ(u;y) - Φ(v;y)| <= L(u,v;y) c(u,v).
#[derive(Clone, Debug)]
pub struct LipschitzData {
    pub field: LipschitzField,
    pub cost: DistanceLikeCost,
}

#[derive(Clone)]
pub struct Potential {
    pub label: String,
    phi: DataFn,
    envelopes: Envelopes,
    lipschitz: Option<LipschitzData>,
    data_lipschitz: Option<DataLipschitzFn>,
    pub data_ball_radius: Option<f64>,
    pub nonnegative: bool,
}

impl fmt::Debug for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Potential")
            .field("label", &self.label)
            .field("lipschitz", &self.lipschitz)
            .field("has_data_lipschitz", &self.data_lipschitz.is_some())
            .field("data_ball_radius", &self.data_ball_radius)
            .field("nonnegative", &self.nonnegative)
            .finish()
    }
}

impl Potential {
    pub fn new(label: impl Into<String>, phi: DataFn, envelopes: Envelopes) -> Self {
        Self {
            label: label.into(),
            phi,
            envelopes,
            lipschitz: None,
            data_lipschitz: None,
            data_ball_radius: None,
            nonnegative: false,
        }
    }

    pub fn with_lipschitz(mut self, field: LipschitzField, cost: DistanceLikeCost) -> Self {
        self.lipschitz = Some(LipschitzData { field, cost });
        self
    }

    pub fn with_data_lipschitz(mut self, b: DataLipschitzFn, radius: Option<f64>) -> Self {
        self.data_lipschitz = Some(b);
        self.data_ball_radius = radius;
        self
    }

    pub fn nonnegative(mut self, yes: bool) -> Self {
        self.nonnegative = yes;
        self
    }

    #[inline]
    pub fn phi(&self, u: &[f64], y: &[f64]) -> f64 {
        (self.phi)(u, y)
    }

    pub fn phi_fn(&self) -> DataFn {
        Arc::clone(&self.phi)
    }

    pub fn envelopes(&self) -> &Envelopes {
        &self.envelopes
    }

    pub fn f(&self, u: &[f64]) -> f64 {
        (self.envelopes.f)(u)
    }

    pub fn g(&self, y: &[f64]) -> f64 {
        (self.envelopes.g)(y)
    }

    pub fn h(&self, u: &[f64], y: &[f64]) -> f64 {
        (self.envelopes.h)(u, y)
    }

    pub fn lipschitz(&self) -> Option<&LipschitzData> {
        self.lipschitz.as_ref()
    }

    pub fn data_lipschitz(&self) -> Option<&DataLipschitzFn> {
        self.data_lipschitz.as_ref()
    }

    /// The adapted cost c_y built from this potential's growth envelope f and
    /// Lipschitz field, at fixed data `y`.
    pub fn adapted_cost(&self, y: &[f64]) -> Option<DistanceLikeCost> {
        let lip = self.lipschitz.as_ref()?;
        let field = Arc::clone(&lip.field.field);
        Some(adapted_cost(AdaptedCostSpec {
            base: lip.cost.clone(),
            growth_f: Arc::clone(&self.envelopes.f),
            lipschitz: field,
            data_y: y.to_vec(),
        }))
    }

    /// Checks the envelope sandwich at every given point. Comparisons are made in
    /// log space with a relative slack of 1e-12.
    pub fn check_envelopes<'a, I>(&self, points: I, y: &[f64]) -> Result<(), PotentialError>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        check_sandwich(&self.label, &self.phi, &self.envelopes, points, y)
    }

    /// Checks |Φ(u)-Φ(v)| <= L(u,v;y) c(u,v) (1 + 1e-9) on the given pairs.
    pub fn check_lipschitz<'a, I>(&self, pairs: I, y: &[f64]) -> Result<(), PotentialError>
    where
        I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
    {
        let Some(lip) = &self.lipschitz else { return Ok(()) };
        for (u, v) in pairs {
            let diff = (self.phi(u, y) - self.phi(v, y)).abs();
            let bound = lip.field.eval(u, v, y) * lip.cost.eval(u, v);
            if diff > bound * (1.0 + 1e-9) + 1e-300 {
                return Err(PotentialError::LipschitzViolation {
                    label: self.label.clone(),
                    u: u.to_vec(),
                    v: v.to_vec(),
                    diff,
                    bound,
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn check_sandwich<'a, I>(
    label: &str,
    phi: &DataFn,
    env: &Envelopes,
    points: I,
    y: &[f64],
) -> Result<(), PotentialError>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let g = (env.g)(y);
    for u in points {
        let value = phi(u, y);
        if !value.is_finite() {
            return Err(PotentialError::NonFinite { label: label.to_string(), u: u.to_vec() });
        }
        let lower = -(env.f)(u).ln() - g.ln();
        let upper = -(env.h)(u, y).ln();
        let slack = 1e-12 * (1.0 + value.abs());
        if value < lower - slack || value > upper + slack {
            return Err(PotentialError::EnvelopeViolation {
                label: label.to_string(),
                u: u.to_vec(),
                y: y.to_vec(),
                lower,
                phi: value,
                upper,
            });
        }
    }
    Ok(())
}

/// Boundedness metadata of a forward map.
#[derive(Debug, Clone, PartialEq)]
pub enum ForwardBound {
    /// ‖G(u)‖ <= sup_norm for every u.
    Saturating { sup_norm: f64 },
    /// G linear with ‖G(u)‖ <= operator_norm ‖u‖.
    Linear { operator_norm: f64 },
}

#[derive(Clone)]
pub struct ForwardMap {
    pub label: String,
    eval: VectorFn,
    pub input_dim: usize,
    pub output_dim: usize,
    pub bound: Option<ForwardBound>,
}

impl fmt::Debug for ForwardMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ForwardMap")
            .field("label", &self.label)
            .field("input_dim", &self.input_dim)
            .field("output_dim", &self.output_dim)
            .field("bound", &self.bound)
            .finish()
    }
}

impl ForwardMap {
    /// Componentwise tanh on ℝ^d.
    pub fn tanh(dim: usize) -> Self {
        Self {
            label: format!("tanh(d={dim})"),
            eval: Arc::new(|u| u.iter().map(|x| x.tanh()).collect()),
            input_dim: dim,
            output_dim: dim,
            bound: Some(ForwardBound::Saturating { sup_norm: (dim as f64).sqrt() }),
        }
    }

    /// u ↦ A u for an m×d matrix A; the operator norm is its largest singular value.
    pub fn linear(matrix: DMatrix<f64>) -> Self {
        let operator_norm = operator_norm(&matrix);
        let (m, d) = matrix.shape();
        Self {
            label: format!("linear({m}x{d})"),
            eval: Arc::new(move |u| (0..m).map(|i| (0..d).map(|k| matrix[(i, k)] * u[k]).sum()).collect()),
            input_dim: d,
            output_dim: m,
            bound: Some(ForwardBound::Linear { operator_norm }),
        }
    }

    pub fn custom(label: impl Into<String>, input_dim: usize, output_dim: usize, eval: VectorFn) -> Self {
        Self { label: label.into(), eval, input_dim, output_dim, bound: None }
    }

    pub fn eval(&self, u: &[f64]) -> Vec<f64> {
        (self.eval)(u)
    }
}

pub fn operator_norm(matrix: &DMatrix<f64>) -> f64 {
    if matrix.is_empty() {
        return 0.0;
    }
    matrix.singular_values().max()
}

fn squared_residual(gu: &[f64], y: &[f64]) -> f64 {
    gu.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Φ(u;y) = |G(u) - y|² / (2σ²) with envelopes and Lipschitz fields derived
/// from the forward map's boundedness metadata.
///
/// Saturating maps with ‖G‖ <= S get f = g = 1, h = exp(-(S² + |y|²)/σ²),
/// L = (S + |y|)/σ² against |u - v|, and b(u) = (|G(u)| + |y| + r)/σ².
/// Linear maps with operator norm K get h = exp(-(K²‖u‖² + |y|²)/σ²),
/// L = (K/σ²)(max(1, K/2)(‖u‖ + ‖v‖) + |y|) and b(u) = (K‖u‖ + |y| + r)/σ².
pub fn gaussian_residual_potential(fwd: &ForwardMap, sigma: f64) -> Result<Potential, PotentialError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(PotentialError::BadSigma(sigma));
    }
    let bound = fwd.bound.clone().ok_or_else(|| PotentialError::MissingEnvelope(fwd.label.clone()))?;
    let s2 = sigma * sigma;
    let map = Arc::clone(&fwd.eval);
    let phi: DataFn = Arc::new(move |u, y| squared_residual(&map(u), y) / (2.0 * s2));
    let euclid = norm_cost(1.0).expect("p = 1 is valid");
    let label = format!("gaussian_residual[{}](sigma={sigma})", fwd.label);
    let map = Arc::clone(&fwd.eval);
    let b: DataLipschitzFn = match bound {
        ForwardBound::Saturating { .. } => {
            Arc::new(move |u, y, r| (euclidean_norm(&map(u)) + euclidean_norm(y) + r) / s2)
        }
        ForwardBound::Linear { operator_norm: k } => {
            Arc::new(move |u, y, r| (k * euclidean_norm(u) + euclidean_norm(y) + r) / s2)
        }
    };
    let potential = match bound {
        ForwardBound::Saturating { sup_norm } => {
            let envelopes = Envelopes {
                f: Arc::new(|_| 1.0),
                g: Arc::new(|_| 1.0),
                h: Arc::new(move |_, y| {
                    let ny = euclidean_norm(y);
                    (-(sup_norm * sup_norm + ny * ny) / s2).exp()
                }),
            };
            let field = LipschitzField::new(
                Arc::new(move |_, _, y| (sup_norm + euclidean_norm(y)) / s2),
                DataDependence::MonotoneInNorm,
            );
            Potential::new(label, phi, envelopes).with_lipschitz(field, euclid)
        }
        ForwardBound::Linear { operator_norm: k } => {
            let envelopes = Envelopes {
                f: Arc::new(|_| 1.0),
                g: Arc::new(|_| 1.0),
                h: Arc::new(move |u, y| {
                    let (nu, ny) = (euclidean_norm(u), euclidean_norm(y));
                    (-(k * k * nu * nu + ny * ny) / s2).exp()
                }),
            };
            let scale = k.max(2.0) / 2.0;
            let field = LipschitzField::new(
                Arc::new(move |u, v, y| {
                    k / s2 * (scale * (euclidean_norm(u) + euclidean_norm(v)) + euclidean_norm(y))
                }),
                DataDependence::MonotoneInNorm,
            );
            Potential::new(label, phi, envelopes).with_lipschitz(field, euclid)
        }
    };
    Ok(potential.with_data_lipschitz(b, None).nonnegative(true))
}

/// Φ'(u;y) = Φ(u;y) + δ sin(ω Σ_k u_k + φ₀); envelopes widened by |δ|.
pub fn sinusoidal_perturbation(base: &Potential, delta: f64, omega: f64, phase: f64) -> Potential {
    let inner = base.phi_fn();
    let phi: DataFn = Arc::new(move |u, y| {
        let s: f64 = u.iter().sum();
        inner(u, y) + delta * (omega * s + phase).sin()
    });
    let label = format!("{}+{delta}*sin({omega}*u+{phase})", base.label);
    Potential::new(label, phi, base.envelopes.widened(delta.abs()))
}

/// Φ'(u;y) = Φ(u;y) + κ.
pub fn offset_potential(base: &Potential, kappa: f64) -> Potential {
    let inner = base.phi_fn();
    let phi: DataFn = Arc::new(move |u, y| inner(u, y) + kappa);
    let env = base.envelopes();
    let (f, h) = (Arc::clone(&env.f), Arc::clone(&env.h));
    let f_scale = (-kappa).exp().max(1.0);
    let h_scale = (-kappa).exp();
    let envelopes = Envelopes {
        f: Arc::new(move |u| f(u) * f_scale),
        g: Arc::clone(&env.g),
        h: Arc::new(move |u, y| h(u, y) * h_scale),
    };
    let mut out = Potential::new(format!("{}+{kappa}", base.label), phi, envelopes);
    if let Some(lip) = base.lipschitz() {
        out = out.with_lipschitz(lip.field.clone(), lip.cost.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{sample_standard_gaussian, SeedSpec};

    #[test]
    fn tanh_potential_values() {
        let phi = gaussian_residual_potential(&ForwardMap::tanh(1), 1.0).unwrap();
        assert_eq!(phi.phi(&[0.0], &[0.0]), 0.0);
        assert!((phi.phi(&[40.0], &[0.0]) - 0.5).abs() < 1e-15);
        assert_eq!(phi.f(&[3.0]), 1.0);
        assert_eq!(phi.g(&[3.0]), 1.0);
    }

    #[test]
    fn tanh_envelope_at_random_points() {
        let phi = gaussian_residual_potential(&ForwardMap::tanh(2), 1.0).unwrap();
        let y = [1.0, 0.0];
        assert!((phi.h(&[0.0, 0.0], &y) - (-3.0f64).exp()).abs() < 1e-15);
        let prior = sample_standard_gaussian(2, 100, SeedSpec::new(5, 0)).unwrap();
        let scaled: Vec<Vec<f64>> = prior.points().map(|u| vec![3.0 * u[0], 3.0 * u[1]]).collect();
        phi.check_envelopes(scaled.iter().map(|u| u.as_slice()), &y).unwrap();
        for u in &scaled {
            assert!((-phi.phi(u, &y)).exp() >= (-3.0f64).exp());
        }
    }

    #[test]
    fn missing_envelope_is_reported() {
        let fwd = ForwardMap::custom("cube", 1, 1, Arc::new(|u| vec![u[0].powi(3)]));
        assert!(matches!(
            gaussian_residual_potential(&fwd, 1.0),
            Err(PotentialError::MissingEnvelope(_))
        ));
        assert!(matches!(
            gaussian_residual_potential(&ForwardMap::tanh(1), 0.0),
            Err(PotentialError::BadSigma(_))
        ));
    }

    #[test]
    fn linear_operator_norm() {
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, -4.0]);
        let fwd = ForwardMap::linear(a);
        assert!((operator_norm_of(&fwd) - 4.0).abs() < 1e-12);
        assert_eq!(fwd.eval(&[1.0, 1.0]), vec![3.0, -4.0]);
    }

    fn operator_norm_of(fwd: &ForwardMap) -> f64 {
        match fwd.bound {
            Some(ForwardBound::Linear { operator_norm }) => operator_norm,
            _ => panic!("not linear"),
        }
    }

    #[test]
    fn linear_envelopes_and_lipschitz_hold_for_large_norms() {
        let a = DMatrix::from_row_slice(2, 3, &[2.5, -1.0, 0.3, 0.7, 1.9, -2.2]);
        let phi = gaussian_residual_potential(&ForwardMap::linear(a), 0.4).unwrap();
        let y = [0.8, -1.3];
        let cloud = sample_standard_gaussian(3, 400, SeedSpec::new(9, 1)).unwrap();
        let pts: Vec<Vec<f64>> = cloud.points().map(|u| u.iter().map(|x| 2.0 * x).collect()).collect();
        phi.check_envelopes(pts.iter().map(|u| u.as_slice()), &y).unwrap();
        let pairs = pts.iter().zip(pts.iter().rev()).map(|(u, v)| (u.as_slice(), v.as_slice()));
        phi.check_lipschitz(pairs, &y).unwrap();
    }

    #[test]
    fn sinusoidal_perturbation_envelopes() {
        let base = gaussian_residual_potential(&ForwardMap::tanh(1), 0.7).unwrap();
        let pert = sinusoidal_perturbation(&base, 0.3, 2.0, 0.5);
        let y = [0.4];
        let cloud = sample_standard_gaussian(1, 500, SeedSpec::new(2, 2)).unwrap();
        pert.check_envelopes(cloud.points(), &y).unwrap();
        let merged = base.envelopes().merge(pert.envelopes());
        assert!(((merged.f)(&[0.0]) - 0.3f64.exp()).abs() < 1e-15);
        assert_eq!((merged.h)(&[0.0], &y), pert.h(&[0.0], &y));
    }

    #[test]
    fn violation_is_reported() {
        let phi: DataFn = Arc::new(|u, _| u[0]);
        let p = Potential::new("identity", phi, Envelopes::constant(1.0, 1.0, 1.0));
        let err = p.check_envelopes([[-1.0].as_slice()], &[0.0]).unwrap_err();
        assert!(matches!(err, PotentialError::EnvelopeViolation { .. }));
    }
}
