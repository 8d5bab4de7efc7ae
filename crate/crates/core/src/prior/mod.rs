//! Prior families: truncated Karhunen-Loève Gaussians, empirical subsamples
//! and pushforwards of a reference measure through a transport map.

pub mod quadrature;

use std::f64::consts::{PI, SQRT_2};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::{MeasureError, ParticleMeasure, SeedSpec};
use quadrature::{bump_filters, Bump};

/// Images farther than this outside [0,1]^d are rejected rather than clamped.
pub const DOMAIN_ESCAPE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("invalid Karhunen-Loève spec: {0}")]
    BadSpec(String),
    #[error("transport map `{map}` sends {input:?} to {image:?}, outside the unit box")]
    DomainEscape { map: String, input: Vec<f64>, image: Vec<f64> },
    #[error("maps act on dimension {0} but the reference has dimension {1}")]
    DimensionMismatch(usize, usize),
    #[error("sample size must be positive")]
    EmptySample,
}

/// N(0, γ²(Δ + τ)^{-2α}) on [0,1] with Dirichlet Laplacian, truncated to J modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KLSpec {
    pub gamma: f64,
    pub tau: f64,
    pub alpha: u32,
    pub truncation: usize,
}

impl Default for KLSpec {
    fn default() -> Self {
        Self { gamma: 100.0, tau: 1.0, alpha: 2, truncation: 32 }
    }
}

impl KLSpec {
    pub fn validate(&self) -> Result<(), PriorError> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(PriorError::BadSpec(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(PriorError::BadSpec(format!("tau must be >= 0, got {}", self.tau)));
        }
        if self.alpha == 0 || self.truncation == 0 {
            return Err(PriorError::BadSpec("alpha and truncation must be positive".into()));
        }
        Ok(())
    }

    pub fn eigenvalue(&self, j: usize) -> f64 {
        let lap = (PI * j as f64).powi(2);
        self.gamma * self.gamma * (lap + self.tau).powi(-2 * self.alpha as i32)
    }

    /// λ_1, …, λ_J.
    pub fn eigenvalues(&self) -> Vec<f64> {
        (1..=self.truncation).map(|j| self.eigenvalue(j)).collect()
    }

    pub fn sqrt_eigenvalues(&self) -> Vec<f64> {
        (1..=self.truncation)
            .map(|j| self.gamma * (PI * PI * (j * j) as f64 + self.tau).powi(-(self.alpha as i32)))
            .collect()
    }

    /// Σ_{j>J} λ_j / Σ_j λ_j. The tail beyond 10^5 terms is bounded by the
    /// integral γ² π^{-4α} K^{1-4α}/(4α-1).
    pub fn tail_mass_fraction(&self) -> f64 {
        const TERMS: usize = 100_000;
        let head: f64 = (1..=self.truncation).map(|j| self.eigenvalue(j)).sum();
        let mut tail: f64 = (self.truncation + 1..=TERMS).map(|j| self.eigenvalue(j)).sum();
        let a = 4.0 * self.alpha as f64;
        tail += self.gamma * self.gamma * PI.powf(-a) * (TERMS as f64).powf(1.0 - a) / (a - 1.0);
        if head + tail == 0.0 {
            0.0
        } else {
            tail / (head + tail)
        }
    }
}

/// Dirichlet eigenpairs of -d²/dt² on [0,1]: (πj)² and √2 sin(πjt).
pub fn laplacian_spectrum_1d(j_max: usize) -> (Vec<f64>, impl Fn(usize, f64) -> f64) {
    let eigenvalues = (1..=j_max).map(|j| (PI * j as f64).powi(2)).collect();
    (eigenvalues, |j: usize, t: f64| SQRT_2 * (PI * j as f64 * t).sin())
}

fn gaussian_coefficients(sqrt_lambda: &[f64], xi: &[f64]) -> Vec<f64> {
    xi.chunks_exact(sqrt_lambda.len())
        .flat_map(|row| row.iter().zip(sqrt_lambda).map(|(x, s)| x * s))
        .collect()
}

fn standard_normals(len: usize, seed: SeedSpec) -> Vec<f64> {
    let mut rng = seed.rng();
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// n draws of the KL coefficient vector (√λ_1 ξ_1, …, √λ_J ξ_J).
pub fn kl_gaussian_sampler(spec: &KLSpec, n: usize, seed: SeedSpec) -> Result<ParticleMeasure, PriorError> {
    spec.validate()?;
    if n == 0 {
        return Err(PriorError::EmptySample);
    }
    let xi = standard_normals(n * spec.truncation, seed);
    Ok(ParticleMeasure::uniform(spec.truncation, gaussian_coefficients(&spec.sqrt_eigenvalues(), &xi))?)
}

/// Two KL priors driven by the same ξ, realizing the product coupling
/// u = Σ √λ_j ξ_j x_j, u* = Σ √λ*_j ξ_j x_j.
pub fn kl_gaussian_pair(
    spec: &KLSpec,
    spec_star: &KLSpec,
    n: usize,
    seed: SeedSpec,
) -> Result<(ParticleMeasure, ParticleMeasure), PriorError> {
    spec.validate()?;
    spec_star.validate()?;
    if spec.truncation != spec_star.truncation {
        return Err(PriorError::DimensionMismatch(spec.truncation, spec_star.truncation));
    }
    if n == 0 {
        return Err(PriorError::EmptySample);
    }
    let xi = standard_normals(n * spec.truncation, seed);
    let a = ParticleMeasure::uniform(spec.truncation, gaussian_coefficients(&spec.sqrt_eigenvalues(), &xi))?;
    let b = ParticleMeasure::uniform(
        spec.truncation,
        gaussian_coefficients(&spec_star.sqrt_eigenvalues(), &xi),
    )?;
    Ok((a, b))
}

/// G_{ij} = ⟨κ_i, x_j⟩ for `m` bump filters of half-width `half_width`
/// against the first `j_max` Dirichlet modes.
pub fn filter_matrix(m: usize, j_max: usize, half_width: f64) -> DMatrix<f64> {
    let filters: Vec<Bump> = bump_filters(m, half_width);
    let (_, mode) = laplacian_spectrum_1d(j_max);
    DMatrix::from_fn(m, j_max, |i, j| filters[i].integrate_against(|t| mode(j + 1, t)))
}

/// Something that draws i.i.d. particles from a fixed law.
pub trait PriorSampler: Send + Sync {
    fn dim(&self) -> usize;
    fn sample(&self, n: usize, seed: SeedSpec) -> Result<ParticleMeasure, PriorError>;
}

/// N(mean·1, std² I) on ℝ^dim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub dim: usize,
    pub mean: f64,
    pub std: f64,
}

impl PriorSampler for GaussianPrior {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample(&self, n: usize, seed: SeedSpec) -> Result<ParticleMeasure, PriorError> {
        if n == 0 {
            return Err(PriorError::EmptySample);
        }
        let pts = standard_normals(n * self.dim, seed).into_iter().map(|z| self.mean + self.std * z).collect();
        Ok(ParticleMeasure::uniform(self.dim, pts)?)
    }
}

/// Uniform law on [0,1]^dim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformBox {
    pub dim: usize,
}

impl PriorSampler for UniformBox {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample(&self, n: usize, seed: SeedSpec) -> Result<ParticleMeasure, PriorError> {
        if n == 0 {
            return Err(PriorError::EmptySample);
        }
        let mut rng = seed.rng();
        let pts = (0..n * self.dim).map(|_| rng.random::<f64>()).collect();
        Ok(ParticleMeasure::uniform(self.dim, pts)?)
    }
}

impl PriorSampler for KLSpec {
    fn dim(&self) -> usize {
        self.truncation
    }

    fn sample(&self, n: usize, seed: SeedSpec) -> Result<ParticleMeasure, PriorError> {
        kl_gaussian_sampler(self, n, seed)
    }
}

/// μ_N: N i.i.d. draws from `base` with weights 1/N.
pub fn empirical_subsample(base: &dyn PriorSampler, n: usize, seed: SeedSpec) -> Result<ParticleMeasure, PriorError> {
    base.sample(n, seed)
}

/// Coordinatewise transport maps on [0,1]^d, selected by name in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum TransportMap {
    Identity,
    Constant { value: f64 },
    /// scale·u + offset
    Affine { scale: f64, offset: f64 },
    /// u²
    Poly2,
    /// scale·u + offset + ε
    PerturbedAffine { scale: f64, offset: f64, epsilon: f64 },
    /// (1-ε)·T(u) + ε·T(u)² with T(u) = scale·u + offset
    SquaredBlend { scale: f64, offset: f64, epsilon: f64 },
}

impl TransportMap {
    #[inline]
    fn scalar(&self, x: f64) -> f64 {
        match *self {
            Self::Identity => x,
            Self::Constant { value } => value,
            Self::Affine { scale, offset } => scale * x + offset,
            Self::Poly2 => x * x,
            Self::PerturbedAffine { scale, offset, epsilon } => scale * x + offset + epsilon,
            Self::SquaredBlend { scale, offset, epsilon } => {
                let t = scale * x + offset;
                (1.0 - epsilon) * t + epsilon * t * t
            }
        }
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        u.iter().map(|&x| self.scalar(x)).collect()
    }

    pub fn name(&self) -> String {
        serde_json::to_string(self).unwrap_or_else(|_| format!("{self:?}"))
    }
}

/// T♯ϱ for a reference law ϱ on [0,1]^d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushforwardSpec {
    pub map: TransportMap,
    pub reference: UniformBox,
}

fn push_points(map: &TransportMap, reference: &ParticleMeasure) -> Result<ParticleMeasure, PriorError> {
    let d = reference.dim();
    let mut out = Vec::with_capacity(reference.raw_points().len());
    let mut clamped = 0usize;
    for u in reference.points() {
        let image = map.apply(u);
        for &x in &image {
            if !(-DOMAIN_ESCAPE_TOLERANCE..=1.0 + DOMAIN_ESCAPE_TOLERANCE).contains(&x) {
                return Err(PriorError::DomainEscape { map: map.name(), input: u.to_vec(), image });
            }
            if !(0.0..=1.0).contains(&x) {
                clamped += 1;
            }
            out.push(x.clamp(0.0, 1.0));
        }
    }
    if clamped > 0 {
        log::warn!("{} clamped {clamped} coordinates back into the unit box", map.name());
    }
    Ok(ParticleMeasure::new(d, out, reference.weights().to_vec())?)
}

/// Applies T to n reference draws.
pub fn pushforward_sampler(spec: &PushforwardSpec, n: usize, seed: SeedSpec) -> Result<ParticleMeasure, PriorError> {
    let reference = spec.reference.sample(n, seed)?;
    push_points(&spec.map, &reference)
}

impl PriorSampler for PushforwardSpec {
    fn dim(&self) -> usize {
        self.reference.dim
    }

    fn sample(&self, n: usize, seed: SeedSpec) -> Result<ParticleMeasure, PriorError> {
        pushforward_sampler(self, n, seed)
    }
}

/// T♯ϱ_n and T*♯ϱ_n on the same reference draws ϱ_n.
pub fn pushforward_pair(
    map: &TransportMap,
    map_star: &TransportMap,
    reference: &ParticleMeasure,
) -> Result<(ParticleMeasure, ParticleMeasure), PriorError> {
    Ok((push_points(map, reference)?, push_points(map_star, reference)?))
}

/// (Σ w_i |T(x_i) - T*(x_i)|^p)^{1/p} over given reference draws, with a
/// delta-method standard error.
pub fn lp_map_distance_on(map: &TransportMap, map_star: &TransportMap, reference: &ParticleMeasure, p: f64) -> (f64, f64) {
    let values: Vec<f64> = reference
        .points()
        .map(|u| {
            let (a, b) = (map.apply(u), map_star.apply(u));
            let d = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            d.powf(p)
        })
        .collect();
    let w = reference.weights();
    let mean: f64 = values.iter().zip(w).map(|(v, w)| v * w).sum();
    let var: f64 = values.iter().zip(w).map(|(v, w)| w * w * (v - mean) * (v - mean)).sum();
    let value = mean.powf(1.0 / p);
    let se = if mean > 0.0 { value / (p * mean) * var.sqrt() } else { 0.0 };
    (value, se)
}

/// Monte-Carlo ‖T - T*‖_{L^p(ϱ)} from n fresh reference draws.
pub fn lp_map_distance(
    map: &TransportMap,
    map_star: &TransportMap,
    reference: &dyn PriorSampler,
    p: f64,
    n: usize,
    seed: SeedSpec,
) -> Result<(f64, f64), PriorError> {
    let draws = reference.sample(n, seed)?;
    Ok(lp_map_distance_on(map, map_star, &draws, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::quadrature::CompositeRule;

    #[test]
    fn kl_single_mode_variance() {
        let spec = KLSpec { gamma: 1.0, tau: 0.0, alpha: 1, truncation: 1 };
        assert!((spec.eigenvalue(1) - PI.powi(-4)).abs() < 1e-18);
        let m = kl_gaussian_sampler(&spec, 100_000, SeedSpec::new(1, 0)).unwrap();
        let var: f64 = m.points().map(|u| u[0] * u[0]).sum::<f64>() / m.len() as f64;
        assert!((var / spec.eigenvalue(1) - 1.0).abs() < 0.02);
    }

    #[test]
    fn kl_zero_gamma_is_degenerate() {
        let spec = KLSpec { gamma: 0.0, ..KLSpec::default() };
        let m = kl_gaussian_sampler(&spec, 10, SeedSpec::new(1, 0)).unwrap();
        assert!(m.raw_points().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn kl_coefficient_variances_and_decorrelation() {
        let spec = KLSpec { gamma: 1.0, tau: 1.0, alpha: 1, truncation: 4 };
        let n = 100_000;
        let m = kl_gaussian_sampler(&spec, n, SeedSpec::new(2, 0)).unwrap();
        let lambda = spec.eigenvalues();
        for j in 0..4 {
            let var: f64 = m.points().map(|u| u[j] * u[j]).sum::<f64>() / n as f64;
            assert!((var / lambda[j] - 1.0).abs() < 0.05, "j={j}");
            for k in 0..j {
                let cov: f64 = m.points().map(|u| u[j] * u[k]).sum::<f64>() / n as f64;
                let corr = cov / (lambda[j] * lambda[k]).sqrt();
                assert!(corr.abs() < 4.0 / (n as f64).sqrt(), "corr({j},{k})={corr}");
            }
        }
    }

    #[test]
    fn eigenvalues_decrease_and_tail_is_small_at_defaults() {
        let spec = KLSpec::default();
        let l = spec.eigenvalues();
        assert!(l.windows(2).all(|w| w[0] > w[1] && w[1] > 0.0));
        assert!(spec.tail_mass_fraction() < 1e-6, "{}", spec.tail_mass_fraction());
    }

    #[test]
    fn laplacian_modes_are_orthonormal() {
        let (eig, mode) = laplacian_spectrum_1d(8);
        assert_eq!(eig[0], PI * PI);
        assert_eq!(mode(3, 0.0), 0.0);
        assert!(mode(3, 1.0).abs() < 1e-14);
        let rule = CompositeRule::new(0.0, 1.0, 16, 16);
        for j in 1..=8 {
            for k in 1..=8 {
                let ip = rule.integrate(|t| mode(j, t) * mode(k, t));
                let expect = if j == k { 1.0 } else { 0.0 };
                assert!((ip - expect).abs() < 1e-10, "({j},{k}) -> {ip}");
            }
        }
    }

    #[test]
    fn filter_matrix_matches_fine_quadrature() {
        let g = filter_matrix(3, 5, 0.1);
        let (_, mode) = laplacian_spectrum_1d(5);
        let filters = bump_filters(3, 0.1);
        let fine = CompositeRule::new(0.0, 1.0, 400, 16);
        for i in 0..3 {
            for j in 0..5 {
                let reference = fine.integrate(|t| filters[i].eval(t) * mode(j + 1, t));
                // 64 nodes per support resolve the bump to ~1e-7, far below Monte-Carlo error.
                assert!((g[(i, j)] - reference).abs() < 1e-7, "({i},{j}) {} vs {reference}", g[(i, j)]);
            }
        }
    }

    #[test]
    fn pushforward_examples() {
        let reference = UniformBox { dim: 1 };
        let id = PushforwardSpec { map: TransportMap::Identity, reference };
        let a = pushforward_sampler(&id, 50, SeedSpec::new(3, 0)).unwrap();
        assert_eq!(a, reference.sample(50, SeedSpec::new(3, 0)).unwrap());

        let c = PushforwardSpec { map: TransportMap::Constant { value: 0.25 }, reference };
        let m = pushforward_sampler(&c, 20, SeedSpec::new(3, 0)).unwrap();
        assert!(m.raw_points().iter().all(|x| *x == 0.25));

        let esc = PushforwardSpec { map: TransportMap::Affine { scale: 1.0, offset: 0.5 }, reference };
        assert!(matches!(pushforward_sampler(&esc, 100, SeedSpec::new(3, 0)), Err(PriorError::DomainEscape { .. })));
    }

    #[test]
    fn squared_pushforward_matches_sqrt_law_within_dkw_band() {
        let n = 10_000;
        let spec = PushforwardSpec { map: TransportMap::Poly2, reference: UniformBox { dim: 1 } };
        let m = pushforward_sampler(&spec, n, SeedSpec::new(4, 0)).unwrap();
        let mut xs: Vec<f64> = m.raw_points().to_vec();
        xs.sort_by(f64::total_cmp);
        let band = ((2.0f64 / 0.05).ln() / (2.0 * n as f64)).sqrt();
        let mut worst = 0.0f64;
        for (i, x) in xs.iter().enumerate() {
            let cdf = x.sqrt();
            worst = worst.max((cdf - i as f64 / n as f64).abs()).max((cdf - (i + 1) as f64 / n as f64).abs());
        }
        assert!(worst < band, "KS {worst} vs band {band}");
    }

    #[test]
    fn lp_map_distance_examples() {
        let reference = UniformBox { dim: 1 };
        let seed = SeedSpec::new(5, 0);
        let id = TransportMap::Identity;
        assert_eq!(lp_map_distance(&id, &id, &reference, 2.0, 100, seed).unwrap(), (0.0, 0.0));

        let shift = TransportMap::PerturbedAffine { scale: 1.0, offset: 0.0, epsilon: 0.1 };
        let (v, se) = lp_map_distance(&id, &shift, &reference, 2.0, 100, seed).unwrap();
        assert!((v - 0.1).abs() < 1e-12 && se < 1e-12);

        let eps = 0.2;
        let stretch = TransportMap::Affine { scale: 1.0 + eps, offset: 0.0 };
        let (v, se) = lp_map_distance(&id, &stretch, &reference, 2.0, 100_000, seed).unwrap();
        let exact = eps / 3f64.sqrt();
        assert!((v - exact).abs() < 3.0 * se, "{v} vs {exact} (se {se})");
    }
}
