//! Distance-like cost functions and the likelihood-adapted cost c_y.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::{euclidean_distance, euclidean_norm};

pub type CostFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
pub type PointFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// A field L(u, v; y).
pub type PairDataFn = Arc<dyn Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync>;
/// Returns the data point in the ball of radius r (centred at 0) that maximizes L(u, v; ·).
pub type MaximizerFn = Arc<dyn Fn(&[f64], &[f64], f64) -> Vec<f64> + Send + Sync>;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("norm power must be >= 1, got {0}")]
    BadPower(f64),
    #[error("growth exponent must be >= 0, got {0}")]
    BadGrowth(f64),
    #[error("lipschitz field has no declared dependence on the data; cannot take the sup over a ball")]
    NotMonotone,
    #[error("cost `{0}` needs a likelihood potential and data to be built")]
    NeedsPotential(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CostKind {
    /// ‖u - v‖^p
    NormPower { p: f64 },
    /// (‖u‖ + ‖v‖)^s ‖u - v‖
    WeightedGrowth { s: f64 },
    /// (a + ‖u‖ + ‖v‖)² ‖u - v‖
    ShiftedQuadraticGrowth { a: f64 },
    Adapted,
    Custom,
}

/// A positive, symmetric cost vanishing exactly on the diagonal.
#[derive(Clone)]
pub struct DistanceLikeCost {
    evaluator: CostFn,
    pub is_metric: bool,
    pub weak_triangle_constant: f64,
    pub description: String,
    pub kind: CostKind,
}

impl fmt::Debug for DistanceLikeCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DistanceLikeCost")
            .field("description", &self.description)
            .field("is_metric", &self.is_metric)
            .field("weak_triangle_constant", &self.weak_triangle_constant)
            .field("kind", &self.kind)
            .finish()
    }
}

impl DistanceLikeCost {
    pub fn custom(
        description: impl Into<String>,
        is_metric: bool,
        weak_triangle_constant: f64,
        evaluator: CostFn,
    ) -> Self {
        Self {
            evaluator,
            is_metric,
            weak_triangle_constant,
            description: description.into(),
            kind: CostKind::Custom,
        }
    }

    #[inline]
    pub fn eval(&self, u: &[f64], v: &[f64]) -> f64 {
        (self.evaluator)(u, v)
    }

    /// c(u, 0).
    pub fn from_origin(&self, u: &[f64]) -> f64 {
        let zero = vec![0.0; u.len()];
        (self.evaluator)(u, &zero)
    }

    pub fn evaluator(&self) -> CostFn {
        Arc::clone(&self.evaluator)
    }
}

/// c(u, v) = ‖u - v‖₂^p.
pub fn norm_cost(p: f64) -> Result<DistanceLikeCost, CostError> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(CostError::BadPower(p));
    }
    let evaluator: CostFn = if p == 1.0 {
        Arc::new(euclidean_distance)
    } else if p == 2.0 {
        Arc::new(|u, v| u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum())
    } else {
        Arc::new(move |u, v| euclidean_distance(u, v).powf(p))
    };
    Ok(DistanceLikeCost {
        evaluator,
        is_metric: p == 1.0,
        weak_triangle_constant: 2f64.powf(p - 1.0),
        description: format!("norm_p(p={p})"),
        kind: CostKind::NormPower { p },
    })
}

/// c(u, v) = (‖u‖ + ‖v‖)^s ‖u - v‖.
pub fn weighted_growth_cost(s: f64) -> Result<DistanceLikeCost, CostError> {
    if !(s >= 0.0 && s.is_finite()) {
        return Err(CostError::BadGrowth(s));
    }
    let evaluator: CostFn = if s == 0.0 {
        Arc::new(euclidean_distance)
    } else {
        Arc::new(move |u, v| {
            (euclidean_norm(u) + euclidean_norm(v)).powf(s) * euclidean_distance(u, v)
        })
    };
    Ok(DistanceLikeCost {
        evaluator,
        is_metric: s == 0.0,
        weak_triangle_constant: 2f64.powf(f64::max(1.0, 2.0 * s - 1.0)),
        description: format!("growth_s(s={s})"),
        kind: CostKind::WeightedGrowth { s },
    })
}

/// c(u, v) = (a + ‖u‖ + ‖v‖)² ‖u - v‖ with a = 1 + |y|; the convenient
/// equivalent of c_y for linear Gaussian-residual likelihoods.
pub fn shifted_quadratic_growth_cost(a: f64) -> DistanceLikeCost {
    DistanceLikeCost {
        evaluator: Arc::new(move |u, v| {
            let s = a + (euclidean_norm(u) + euclidean_norm(v));
            s * s * euclidean_distance(u, v)
        }),
        is_metric: false,
        weak_triangle_constant: 8.0,
        description: format!("shifted_quadratic_growth(a={a})"),
        kind: CostKind::ShiftedQuadraticGrowth { a },
    }
}

/// How a Lipschitz field L(u, v; y) depends on the data y.
#[derive(Clone)]
pub enum DataDependence {
    /// L does not depend on y.
    Independent,
    /// L depends on y only through |y| and is nondecreasing in it.
    MonotoneInNorm,
    /// An explicit maximizer over the ball of radius r.
    Maximizer(MaximizerFn),
    Unspecified,
}

impl fmt::Debug for DataDependence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::Independent => "Independent",
            Self::MonotoneInNorm => "MonotoneInNorm",
            Self::Maximizer(_) => "Maximizer",
            Self::Unspecified => "Unspecified",
        };
        f.write_str(name)
    }
}

/// A local Lipschitz field L(u, v; y) for Φ with respect to some cost.
#[derive(Clone)]
pub struct LipschitzField {
    pub field: PairDataFn,
    pub data_dependence: DataDependence,
}

impl fmt::Debug for LipschitzField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LipschitzField").field("data_dependence", &self.data_dependence).finish()
    }
}

impl LipschitzField {
    pub fn new(field: PairDataFn, data_dependence: DataDependence) -> Self {
        Self { field, data_dependence }
    }

    #[inline]
    pub fn eval(&self, u: &[f64], v: &[f64], y: &[f64]) -> f64 {
        (self.field)(u, v, y)
    }
}

/// Ingredients of c_y.
#[derive(Clone)]
pub struct AdaptedCostSpec {
    pub base: DistanceLikeCost,
    pub growth_f: PointFn,
    pub lipschitz: PairDataFn,
    pub data_y: Vec<f64>,
}

/// c_y(u,v) = [1 ∨ c(u,0) ∨ c(v,0)] · [f(u) ∨ f(v)] · [1 ∨ L(u,v;y)] · c(u,v).
pub fn adapted_cost(spec: AdaptedCostSpec) -> DistanceLikeCost {
    let AdaptedCostSpec { base, growth_f, lipschitz, data_y } = spec;
    let description = format!("adapted[{}]", base.description);
    let base_eval = base.evaluator();
    let evaluator: CostFn = Arc::new(move |u, v| {
        let c = base_eval(u, v);
        if c == 0.0 {
            return 0.0;
        }
        let zero = vec![0.0; u.len()];
        let size = 1f64.max(base_eval(u, &zero)).max(base_eval(v, &zero));
        let growth = growth_f(u).max(growth_f(v));
        let lip = 1f64.max(lipschitz(u, v, &data_y));
        size * growth * lip * c
    });
    DistanceLikeCost {
        evaluator,
        is_metric: false,
        weak_triangle_constant: f64::INFINITY,
        description,
        kind: CostKind::Adapted,
    }
}

/// The field (u, v) ↦ sup_{|y| ≤ r} L(u, v; y), uniform over the data ball at 0.
pub fn tensorize_uniform_sup(
    lipschitz: &LipschitzField,
    radius: f64,
    data_dim: usize,
) -> Result<Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>, CostError> {
    let field = Arc::clone(&lipschitz.field);
    match &lipschitz.data_dependence {
        DataDependence::Independent => {
            let zero = vec![0.0; data_dim];
            Ok(Arc::new(move |u, v| field(u, v, &zero)))
        }
        DataDependence::MonotoneInNorm => {
            let mut extreme = vec![0.0; data_dim];
            if let Some(first) = extreme.first_mut() {
                *first = radius;
            }
            Ok(Arc::new(move |u, v| field(u, v, &extreme)))
        }
        DataDependence::Maximizer(rule) => {
            let rule = Arc::clone(rule);
            Ok(Arc::new(move |u, v| field(u, v, &rule(u, v, radius))))
        }
        DataDependence::Unspecified => Err(CostError::NotMonotone),
    }
}

/// Cost selection in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostConfig {
    NormP { p: f64 },
    GrowthS { s: f64 },
    Adapted,
}

impl CostConfig {
    /// `adapted` builds c_y from the experiment's potential at data `y`.
    pub fn build(
        &self,
        context: Option<(&crate::potential::Potential, &[f64])>,
    ) -> Result<DistanceLikeCost, CostError> {
        match self {
            Self::NormP { p } => norm_cost(*p),
            Self::GrowthS { s } => weighted_growth_cost(*s),
            Self::Adapted => {
                let (phi, y) =
                    context.ok_or_else(|| CostError::NeedsPotential("adapted".into()))?;
                phi.adapted_cost(y).ok_or_else(|| CostError::NeedsPotential("adapted".into()))
            }
        }
    }
}
