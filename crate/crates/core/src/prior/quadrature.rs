//! Gauss-Legendre quadrature and the compactly supported bump filters used
//! as observation functionals.

use std::f64::consts::PI;

/// Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            let step = p / d;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    if n == 1 {
        return (x, 1.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Composite Gauss-Legendre rule on [a, b]: `panels` equal panels with
/// `order` nodes each.
#[derive(Debug, Clone)]
pub struct CompositeRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl CompositeRule {
    pub fn new(a: f64, b: f64, panels: usize, order: usize) -> Self {
        let (x, w) = gauss_legendre(order);
        let h = (b - a) / panels as f64;
        let mut nodes = Vec::with_capacity(panels * order);
        let mut weights = Vec::with_capacity(panels * order);
        for p in 0..panels {
            let left = a + h * p as f64;
            for (xi, wi) in x.iter().zip(&w) {
                nodes.push(left + 0.5 * h * (xi + 1.0));
                weights.push(0.5 * h * wi);
            }
        }
        Self { nodes, weights }
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(*x)).sum()
    }
}

/// κ(x) = exp(-1 / (1 - ((x - center)/half_width)²)) on |x - center| < half_width, else 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    pub center: f64,
    pub half_width: f64,
}

impl Bump {
    pub fn eval(&self, x: f64) -> f64 {
        let z = (x - self.center) / self.half_width;
        if z.abs() >= 1.0 {
            0.0
        } else {
            (-1.0 / (1.0 - z * z)).exp()
        }
    }

    /// ∫ κ g over the support, 8 panels × 8 nodes.
    pub fn integrate_against<F: Fn(f64) -> f64>(&self, g: F) -> f64 {
        CompositeRule::new(self.center - self.half_width, self.center + self.half_width, 8, 8)
            .integrate(|x| self.eval(x) * g(x))
    }
}

/// `m` bumps of half-width `half_width` centred at i/(m+1), i = 1..m.
pub fn bump_filters(m: usize, half_width: f64) -> Vec<Bump> {
    (1..=m).map(|i| Bump { center: i as f64 / (m + 1) as f64, half_width }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_exact_on_polynomials() {
        for n in [1, 2, 5, 8, 16] {
            let (x, w) = gauss_legendre(n);
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
            // Exact up to degree 2n - 1.
            let deg = 2 * n - 2;
            let integral: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(deg as i32)).sum();
            assert!((integral - 2.0 / (deg as f64 + 1.0)).abs() < 1e-13, "n={n}");
        }
    }

    #[test]
    fn composite_rule_integrates_sine() {
        let rule = CompositeRule::new(0.0, PI, 4, 8);
        assert!((rule.integrate(f64::sin) - 2.0).abs() < 1e-13);
    }

    #[test]
    fn bump_is_compactly_supported_and_symmetric() {
        let b = Bump { center: 0.5, half_width: 0.1 };
        assert_eq!(b.eval(0.39), 0.0);
        assert_eq!(b.eval(0.6), 0.0);
        assert!((b.eval(0.5) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((b.eval(0.45) - b.eval(0.55)).abs() < 1e-15);
        let filters = bump_filters(4, 0.1);
        assert_eq!(filters[0].center, 0.2);
        assert_eq!(filters[3].center, 0.8);
    }
}
