//! Entropic optimal transport by Sinkhorn iterations in the log domain.

use super::{check_instance, cost_matrix, TransportError, TransportPlan, DEFAULT_MAX_ENTRIES};
use crate::cost::DistanceLikeCost;
use crate::measure::{compensated_sum, ParticleMeasure};

fn log_sum_exp<I: Iterator<Item = f64> + Clone>(terms: I) -> f64 {
    let max = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Entropic plan with regularization `epsilon`. Iterates until the L1
/// violation of the source marginal is at most `tol`; the plan rows are then
/// rescaled onto the source weights so the returned row sums are exact up to
/// rounding. On hitting `max_iter` the best iterate is returned inside
/// [`TransportError::MaxIterExceeded`].
pub fn sinkhorn(
    source: &ParticleMeasure,
    target: &ParticleMeasure,
    cost: &DistanceLikeCost,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<TransportPlan, TransportError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(TransportError::BadEpsilon(epsilon));
    }
    check_instance(source, target, DEFAULT_MAX_ENTRIES)?;
    let (n, m) = (source.len(), target.len());
    let c = cost_matrix(source, target, cost)?;
    let log_a: Vec<f64> = source.weights().iter().map(|w| w.ln()).collect();
    let log_b: Vec<f64> = target.weights().iter().map(|w| w.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];

    let (c, log_b) = (&c[..], &log_b[..]);
    let row_lse = |f: &[f64], g: &[f64], i: usize| {
        log_sum_exp((0..m).map(|j| log_b[j] + (f[i] + g[j] - c[i * m + j]) / epsilon))
    };
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let mut iterations = 0;
    let mut violation = f64::INFINITY;
    while iterations < max_iter {
        iterations += 1;
        for i in 0..n {
            f[i] = -epsilon * log_sum_exp((0..m).map(|j| log_b[j] + (g[j] - c[i * m + j]) / epsilon));
        }
        for j in 0..m {
            g[j] = -epsilon * log_sum_exp((0..n).map(|i| log_a[i] + (f[i] - c[i * m + j]) / epsilon));
        }
        // Columns are now exact; measure the row violation.
        violation = (0..n)
            .map(|i| {
                let a = source.weights()[i];
                if a == 0.0 {
                    0.0
                } else {
                    (a * row_lse(&f, &g, i).exp() - a).abs()
                }
            })
            .sum();
        if best.as_ref().is_none_or(|(v, _, _)| violation < *v) {
            best = Some((violation, f.clone(), g.clone()));
        }
        if violation <= tol {
            break;
        }
    }
    let (best_violation, f, g) = best.expect("at least one iteration when max_iter > 0");
    let plan = assemble(source, target, c, &f, &g, epsilon);
    if best_violation <= tol {
        Ok(plan)
    } else {
        Err(TransportError::MaxIterExceeded { plan: Box::new(plan), violation, iterations })
    }
}

fn assemble(
    source: &ParticleMeasure,
    target: &ParticleMeasure,
    c: &[f64],
    f: &[f64],
    g: &[f64],
    epsilon: f64,
) -> TransportPlan {
    let (n, m) = (source.len(), target.len());
    let (a, b) = (source.weights(), target.weights());
    let mut coupling = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut coupling[i * m..(i + 1) * m];
        for j in 0..m {
            row[j] = if a[i] > 0.0 && b[j] > 0.0 { a[i] * b[j] * ((f[i] + g[j] - c[i * m + j]) / epsilon).exp() } else { 0.0 };
        }
        let total = compensated_sum(row.iter().copied());
        if total > 0.0 {
            for x in row.iter_mut() {
                *x *= a[i] / total;
            }
        }
    }
    let primal_cost = compensated_sum(coupling.iter().zip(c).map(|(x, c)| x * c));
    TransportPlan {
        n,
        m,
        coupling,
        primal_cost,
        dual_u: f.to_vec(),
        dual_v: g.to_vec(),
        solver_tag: format!("sinkhorn(eps={epsilon})"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::norm_cost;

    #[test]
    fn unique_coupling_is_exact_for_every_epsilon() {
        let a = ParticleMeasure::dirac(vec![0.0]).unwrap();
        let b = ParticleMeasure::dirac(vec![1.0]).unwrap();
        for eps in [10.0, 1.0, 0.1, 0.01] {
            let plan = sinkhorn(&a, &b, &norm_cost(1.0).unwrap(), eps, 100, 1e-12).unwrap();
            assert_eq!(plan.primal_cost, 1.0, "eps={eps}");
        }
    }

    #[test]
    fn identical_measures_cost_vanishes_with_epsilon() {
        let pts: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let a = ParticleMeasure::uniform(1, pts).unwrap();
        let c = norm_cost(1.0).unwrap();
        let costs: Vec<f64> = [0.1, 0.01, 0.001]
            .iter()
            .map(|&eps| sinkhorn(&a, &a, &c, eps, 100_000, 1e-10).unwrap().primal_cost)
            .collect();
        assert!(costs[0] > costs[1] && costs[1] > costs[2]);
        assert!(costs[2] < 1e-6, "{costs:?}");
    }

    #[test]
    fn rejects_bad_epsilon_and_reports_iteration_cap() {
        let a = ParticleMeasure::uniform(1, vec![0.0, 1.0]).unwrap();
        let b = ParticleMeasure::uniform(1, vec![0.3, 0.5]).unwrap();
        let c = norm_cost(2.0).unwrap();
        assert!(matches!(sinkhorn(&a, &b, &c, 0.0, 10, 1e-9), Err(TransportError::BadEpsilon(_))));
        match sinkhorn(&a, &b, &c, 1e-3, 1, 0.0) {
            Err(TransportError::MaxIterExceeded { plan, iterations, .. }) => {
                assert_eq!(iterations, 1);
                assert_eq!(plan.coupling.len(), 4);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
