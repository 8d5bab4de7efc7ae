//! Closed-form optimal transport on the line via the monotone (quantile) coupling.

use super::TransportError;
use crate::measure::ParticleMeasure;

fn sorted_order(m: &ParticleMeasure) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..m.len()).collect();
    idx.sort_by(|&a, &b| m.point(a)[0].total_cmp(&m.point(b)[0]).then(a.cmp(&b)));
    idx
}

/// The monotone coupling between two measures on ℝ as (i, j, mass) triples,
/// obtained by merging the cumulative weights of the sorted supports.
pub fn quantile_coupling(
    source: &ParticleMeasure,
    target: &ParticleMeasure,
) -> Result<Vec<(usize, usize, f64)>, TransportError> {
    if source.dim() != 1 || target.dim() != 1 {
        return Err(TransportError::DimensionMismatch { source_dim: source.dim(), target_dim: target.dim() });
    }
    let (sa, sb) = (sorted_order(source), sorted_order(target));
    let (wa, wb) = (source.weights(), target.weights());
    let mut triples = Vec::with_capacity(sa.len() + sb.len());
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (wa[sa[0]], wb[sb[0]]);
    // Whichever atom has less remaining mass is exhausted; rounding dust left
    // when one side runs out is dropped.
    while i < sa.len() && j < sb.len() {
        if ra <= rb {
            if ra > 0.0 {
                triples.push((sa[i], sb[j], ra));
            }
            rb -= ra;
            i += 1;
            if i < sa.len() {
                ra = wa[sa[i]];
            }
        } else {
            if rb > 0.0 {
                triples.push((sa[i], sb[j], rb));
            }
            ra -= rb;
            j += 1;
            if j < sb.len() {
                rb = wb[sb[j]];
            }
        }
    }
    Ok(triples)
}

/// W_p between measures on ℝ, exact for discrete measures.
pub fn w1_1d_oracle(source: &ParticleMeasure, target: &ParticleMeasure, p: f64) -> Result<f64, TransportError> {
    let triples = quantile_coupling(source, target)?;
    let total: f64 = triples
        .iter()
        .map(|&(i, j, mass)| mass * (source.point(i)[0] - target.point(j)[0]).abs().powf(p))
        .sum();
    Ok(total.powf(1.0 / p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(points: &[f64], weights: &[f64]) -> ParticleMeasure {
        ParticleMeasure::new(1, points.to_vec(), weights.to_vec()).unwrap()
    }

    #[test]
    fn oracle_examples() {
        let a = line(&[0.3, -1.0, 2.0], &[0.2, 0.5, 0.3]);
        assert_eq!(w1_1d_oracle(&a, &a, 2.0).unwrap(), 0.0);
        let c = 1.7;
        for p in [1.0, 2.0, 3.5] {
            let d = w1_1d_oracle(&line(&[0.0], &[1.0]), &line(&[c], &[1.0]), p).unwrap();
            assert!((d - c).abs() < 1e-15);
        }
    }

    #[test]
    fn three_point_hand_example() {
        // Source 0 (0.5), 1 (0.5); target 0.5 (0.25), 2 (0.75).
        // Quantile coupling: 0->0.5 mass 0.25, 0->2 mass 0.25, 1->2 mass 0.5.
        let a = line(&[1.0, 0.0], &[0.5, 0.5]);
        let b = line(&[2.0, 0.5], &[0.75, 0.25]);
        let w1 = w1_1d_oracle(&a, &b, 1.0).unwrap();
        assert!((w1 - (0.25 * 0.5 + 0.25 * 2.0 + 0.5 * 1.0)).abs() < 1e-15);
        let coupling = quantile_coupling(&a, &b).unwrap();
        let total: f64 = coupling.iter().map(|t| t.2).sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_higher_dimension() {
        let a = ParticleMeasure::dirac(vec![0.0, 1.0]).unwrap();
        assert!(matches!(w1_1d_oracle(&a, &a, 1.0), Err(TransportError::DimensionMismatch { .. })));
    }
}
