//! Weighted particle clouds standing in for probability measures on ℝ^d,
//! seeded sampling, weighted moments and Bayes reweighting.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance on the total mass of a particle measure.
pub const WEIGHT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("particle measure must contain at least one point")]
    Empty,
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error("point buffer of length {len} is not a multiple of dim {dim}")]
    RaggedPoints { len: usize, dim: usize },
    #[error("expected {expected} weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("weight {index} is negative or not finite: {value}")]
    BadWeight { index: usize, value: f64 },
    #[error("weights sum to {sum}, expected 1")]
    NotNormalized { sum: f64 },
    #[error("coordinate {index} is not finite")]
    NonFinitePoint { index: usize },
    #[error("every likelihood term exp(-phi) underflowed; likelihood and prior are mismatched")]
    AllWeightsUnderflow,
    #[error("invalid measure csv: {0}")]
    Csv(String),
}

/// Kahan-Neumaier compensated sum.
pub(crate) fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// A finite weighted point cloud in ℝ^dim. Points are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl ParticleMeasure {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self, MeasureError> {
        if dim == 0 {
            return Err(MeasureError::ZeroDimension);
        }
        if !points.len().is_multiple_of(dim) {
            return Err(MeasureError::RaggedPoints { len: points.len(), dim });
        }
        let n = points.len() / dim;
        if n == 0 {
            return Err(MeasureError::Empty);
        }
        if weights.len() != n {
            return Err(MeasureError::WeightCount { expected: n, got: weights.len() });
        }
        if let Some(index) = points.iter().position(|x| !x.is_finite()) {
            return Err(MeasureError::NonFinitePoint { index });
        }
        if let Some((index, &value)) =
            weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w >= 0.0))
        {
            return Err(MeasureError::BadWeight { index, value });
        }
        let sum = compensated_sum(weights.iter().copied());
        if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(MeasureError::NotNormalized { sum });
        }
        Ok(Self { dim, points, weights })
    }

    /// Equal weights 1/n.
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self, MeasureError> {
        if dim == 0 {
            return Err(MeasureError::ZeroDimension);
        }
        let n = points.len() / dim;
        let w = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        Self::new(dim, points, vec![w; n])
    }

    /// Builds a measure from unnormalized nonnegative masses.
    pub fn from_masses(dim: usize, points: Vec<f64>, masses: Vec<f64>) -> Result<Self, MeasureError> {
        if let Some((index, &value)) =
            masses.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w >= 0.0))
        {
            return Err(MeasureError::BadWeight { index, value });
        }
        let total = compensated_sum(masses.iter().copied());
        if total <= 0.0 {
            return Err(MeasureError::AllWeightsUnderflow);
        }
        let weights = masses.into_iter().map(|w| w / total).collect();
        Self::new(dim, points, weights)
    }

    pub fn dirac(point: Vec<f64>) -> Result<Self, MeasureError> {
        let dim = point.len();
        Self::new(dim, point, vec![1.0])
    }

    pub fn from_rows(rows: &[Vec<f64>], weights: Vec<f64>) -> Result<Self, MeasureError> {
        let dim = rows.first().map(Vec::len).ok_or(MeasureError::Empty)?;
        let mut points = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(MeasureError::RaggedPoints { len: row.len(), dim });
            }
            points.extend_from_slice(row);
        }
        Self::new(dim, points, weights)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.points.chunks_exact(self.dim)
    }

    pub fn raw_points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Same points, new weights.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self, MeasureError> {
        Self::new(self.dim, self.points.clone(), weights)
    }

    /// Applies `f` to every point, keeping the weights.
    pub fn map_points<F>(&self, out_dim: usize, f: F) -> Result<Self, MeasureError>
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        let mut points = Vec::with_capacity(self.len() * out_dim);
        for p in self.points() {
            let q = f(p);
            if q.len() != out_dim {
                return Err(MeasureError::RaggedPoints { len: q.len(), dim: out_dim });
            }
            points.extend(q);
        }
        Self::new(out_dim, points, self.weights.clone())
    }

    /// Effective sample size (Σw)² / Σw².
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Writes the `w,x1,...,xd` CSV block with 17 significant digits.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), MeasureError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["w".to_string()];
        header.extend((1..=self.dim).map(|k| format!("x{k}")));
        wtr.write_record(&header).map_err(|e| MeasureError::Csv(e.to_string()))?;
        for (w, p) in self.weights.iter().zip(self.points()) {
            let mut row = vec![format_f64(*w)];
            row.extend(p.iter().map(|x| format_f64(*x)));
            wtr.write_record(&row).map_err(|e| MeasureError::Csv(e.to_string()))?;
        }
        wtr.flush().map_err(|e| MeasureError::Csv(e.to_string()))
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, MeasureError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers().map_err(|e| MeasureError::Csv(e.to_string()))?.clone();
        if header.is_empty() || &header[0] != "w" {
            return Err(MeasureError::Csv("first column must be `w`".into()));
        }
        for (k, name) in header.iter().enumerate().skip(1) {
            if name != format!("x{k}") {
                return Err(MeasureError::Csv(format!("unexpected column `{name}`")));
            }
        }
        let dim = header.len() - 1;
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| MeasureError::Csv(e.to_string()))?;
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|e| MeasureError::Csv(format!("`{s}`: {e}")))
            };
            weights.push(parse(&record[0])?);
            for field in record.iter().skip(1) {
                points.push(parse(field)?);
            }
        }
        Self::new(dim, points, weights)
    }
}

/// Scientific notation with 17 significant digits; round-trips every f64.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Counter-based seed: a root seed plus an independent ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub root_seed: u64,
    pub stream_id: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedSpec {
    pub fn new(root_seed: u64, stream_id: u64) -> Self {
        Self { root_seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.root_seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// A child stream keyed by `tag`; same root, hashed stream id.
    pub fn derive(&self, tag: u64) -> Self {
        Self {
            root_seed: self.root_seed,
            stream_id: splitmix64(self.stream_id ^ splitmix64(tag.wrapping_add(1))),
        }
    }
}

/// n equally weighted draws from N(0, I_dim).
pub fn sample_standard_gaussian(
    dim: usize,
    n: usize,
    seed: SeedSpec,
) -> Result<ParticleMeasure, MeasureError> {
    if dim == 0 {
        return Err(MeasureError::ZeroDimension);
    }
    if n == 0 {
        return Err(MeasureError::Empty);
    }
    let mut rng = seed.rng();
    let points: Vec<f64> = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    ParticleMeasure::uniform(dim, points)
}

/// Posterior particles together with the log of the self-normalized evidence.
#[derive(Debug, Clone)]
pub struct Reweighted {
    pub posterior: ParticleMeasure,
    pub log_evidence: f64,
}

impl Reweighted {
    /// Σ w_i exp(-Φ(u_i)). May underflow to zero even when the posterior is fine.
    pub fn evidence(&self) -> f64 {
        self.log_evidence.exp()
    }
}

/// Bayes reweighting by exp(-phi(u)), accumulated in log space.
pub fn reweight_with<F>(prior: &ParticleMeasure, phi: F) -> Result<Reweighted, MeasureError>
where
    F: Fn(&[f64]) -> f64,
{
    let neg_phi: Vec<f64> = prior.points().map(|u| -phi(u)).collect();
    let shift = neg_phi
        .iter()
        .zip(prior.weights())
        .filter(|(_, &w)| w > 0.0)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(MeasureError::AllWeightsUnderflow);
    }
    let masses: Vec<f64> =
        neg_phi.iter().zip(prior.weights()).map(|(v, w)| if *w > 0.0 { w * (v - shift).exp() } else { 0.0 }).collect();
    let total = compensated_sum(masses.iter().copied());
    if !(total > 0.0 && total.is_finite()) {
        return Err(MeasureError::AllWeightsUnderflow);
    }
    let weights = masses.into_iter().map(|m| m / total).collect();
    let posterior = prior.with_weights(weights)?;
    Ok(Reweighted { posterior, log_evidence: shift + total.ln() })
}

/// Bayes reweighting of `prior` by the potential at data `y`.
pub fn reweight(
    prior: &ParticleMeasure,
    phi: &crate::potential::Potential,
    y: &[f64],
) -> Result<Reweighted, MeasureError> {
    reweight_with(prior, |u| phi.phi(u, y))
}

/// Σ w_i f(u_i).
pub fn weighted_moment<F>(m: &ParticleMeasure, f: F) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    compensated_sum(m.points().zip(m.weights()).map(|(u, w)| w * f(u)))
}

/// Weighted mean of f with its self-normalized Monte-Carlo standard error
/// sqrt(Σ w_i² (f_i - mean)²).
pub fn weighted_mean_se<F>(m: &ParticleMeasure, f: F) -> (f64, f64)
where
    F: Fn(&[f64]) -> f64,
{
    let values: Vec<f64> = m.points().map(&f).collect();
    let mean = compensated_sum(values.iter().zip(m.weights()).map(|(v, w)| v * w));
    let var = values
        .iter()
        .zip(m.weights())
        .map(|(v, w)| w * w * (v - mean) * (v - mean))
        .sum::<f64>();
    (mean, var.sqrt())
}

pub fn euclidean_norm(u: &[f64]) -> f64 {
    u.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn euclidean_distance(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_particle_gaussian() {
        let m = sample_standard_gaussian(1, 1, SeedSpec::new(7, 0)).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.weights(), &[1.0]);
    }

    #[test]
    fn gaussian_mean_is_near_zero() {
        let n = 100_000;
        let m = sample_standard_gaussian(2, n, SeedSpec::new(11, 3)).unwrap();
        for k in 0..2 {
            let mean = weighted_moment(&m, |u| u[k]);
            assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "coordinate {k}: {mean}");
        }
    }

    #[test]
    fn seeding_is_deterministic_and_streams_differ() {
        let a = sample_standard_gaussian(3, 50, SeedSpec::new(5, 1)).unwrap();
        let b = sample_standard_gaussian(3, 50, SeedSpec::new(5, 1)).unwrap();
        let c = sample_standard_gaussian(3, 50, SeedSpec::new(5, 2)).unwrap();
        assert_eq!(a.raw_points(), b.raw_points());
        assert_ne!(a.raw_points(), c.raw_points());
        assert_ne!(SeedSpec::new(5, 1).derive(0), SeedSpec::new(5, 1).derive(1));
    }

    #[test]
    fn rejects_invalid_measures() {
        assert!(matches!(ParticleMeasure::new(1, vec![], vec![]), Err(MeasureError::Empty)));
        assert!(matches!(
            ParticleMeasure::new(1, vec![0.0, 1.0], vec![0.5, 0.6]),
            Err(MeasureError::NotNormalized { .. })
        ));
        assert!(matches!(
            ParticleMeasure::new(1, vec![0.0, 1.0], vec![1.5, -0.5]),
            Err(MeasureError::BadWeight { index: 1, .. })
        ));
        assert!(matches!(
            ParticleMeasure::new(2, vec![0.0, 1.0, 2.0], vec![1.0]),
            Err(MeasureError::RaggedPoints { .. })
        ));
    }

    #[test]
    fn constant_potential_leaves_prior_unchanged() {
        let prior = sample_standard_gaussian(2, 100, SeedSpec::new(1, 0)).unwrap();
        let r = reweight_with(&prior, |_| 0.0).unwrap();
        assert_eq!(r.posterior, prior);
        assert_eq!(r.evidence(), 1.0);

        let kappa = 2.5;
        let r = reweight_with(&prior, |_| kappa).unwrap();
        assert_eq!(r.posterior.weights(), prior.weights());
        assert!((r.evidence() - (-kappa).exp()).abs() < 1e-15);
    }

    #[test]
    fn reweight_survives_huge_potentials() {
        let prior = ParticleMeasure::uniform(1, vec![0.0, 1.0, 2.0]).unwrap();
        let r = reweight_with(&prior, |u| 2000.0 + u[0]).unwrap();
        assert_eq!(r.evidence(), 0.0);
        assert!(r.log_evidence.is_finite());
        let total: f64 = r.posterior.weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-15);
        let err = reweight_with(&prior, |_| f64::INFINITY).unwrap_err();
        assert!(matches!(err, MeasureError::AllWeightsUnderflow));
    }

    #[test]
    fn evidence_is_permutation_invariant() {
        let prior = sample_standard_gaussian(1, 200, SeedSpec::new(4, 0)).unwrap();
        let phi = |u: &[f64]| (u[0] - 0.7).powi(2);
        let z = reweight_with(&prior, phi).unwrap().log_evidence;
        let mut rev: Vec<f64> = prior.raw_points().to_vec();
        rev.reverse();
        let reversed = ParticleMeasure::uniform(1, rev).unwrap();
        let z_rev = reweight_with(&reversed, phi).unwrap().log_evidence;
        assert!((z - z_rev).abs() < 1e-13);
    }

    #[test]
    fn conjugate_gaussian_posterior_mean() {
        // N(0,1) prior, Φ = (u-1)²/2 gives N(1/2, 1/2).
        let prior = sample_standard_gaussian(1, 100_000, SeedSpec::new(2024, 0)).unwrap();
        let post = reweight_with(&prior, |u| 0.5 * (u[0] - 1.0).powi(2)).unwrap().posterior;
        let (mean, se) = weighted_mean_se(&post, |u| u[0]);
        assert!((mean - 0.5).abs() < 3.0 * se, "mean {mean} se {se}");
        let (second, se2) = weighted_mean_se(&post, |u| (u[0] - 0.5).powi(2));
        assert!((second - 0.5).abs() < 3.0 * se2, "var {second} se {se2}");
    }

    #[test]
    fn moments() {
        let prior = sample_standard_gaussian(1, 50, SeedSpec::new(0, 0)).unwrap();
        assert!((weighted_moment(&prior, |_| 1.0) - 1.0).abs() < 1e-15);
        let dirac = ParticleMeasure::dirac(vec![3.0]).unwrap();
        assert_eq!(weighted_moment(&dirac, |u| u[0]), 3.0);

        let m = sample_standard_gaussian(1, 100_000, SeedSpec::new(9, 9)).unwrap();
        let (second, se) = weighted_mean_se(&m, |u| u[0] * u[0]);
        assert!((second - 1.0).abs() < 3.0 * se);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = ParticleMeasure::from_masses(2, vec![0.1, -2.0, 1.0 / 3.0, 7.5], vec![1.0, 2.0])
            .unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("w,x1,x2\n"));
        let back = ParticleMeasure::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }
}
