//! Numerical verification of posterior stability bounds for Bayesian inverse
//! problems. Posteriors are particle measures, discrepancies are integral
//! probability metrics computed through discrete optimal transport, and every
//! theoretical right-hand side is assembled from Monte-Carlo estimates.

pub mod cost;
pub mod experiments;
pub mod measure;
pub mod potential;
pub mod bounds;
pub mod prior;
pub mod transport;

pub use cost::{norm_cost, weighted_growth_cost, DistanceLikeCost};
pub use measure::{ParticleMeasure, SeedSpec};
pub use potential::Potential;
