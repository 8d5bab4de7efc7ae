//! ReLU network surrogates for likelihood potentials.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DataFn, Potential};
use crate::measure::SeedSpec;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("input has dimension {got}, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("layer {layer} expects {expected} inputs but previous layer has {got} outputs")]
    BrokenChain { layer: usize, expected: usize, got: usize },
    #[error("network must end in a single output, got {0}")]
    NotScalar(usize),
    #[error("surrogate training diverged: {0}")]
    FitDiverged(String),
    #[error("invalid training setup: {0}")]
    BadSetup(String),
    #[error("network json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One affine map x ↦ W x + b with W stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>, bias: Vec<f64>) -> Self {
        assert_eq!(weights.len(), rows * cols, "weight buffer does not match shape");
        assert_eq!(bias.len(), rows, "bias length does not match rows");
        Self { rows, cols, weights, bias }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            out.push(row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[r]);
        }
    }
}

/// W_L σ(… σ(W_1 u + b_1) …) + b_L with σ = ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReluSurrogate {
    pub layers: Vec<DenseLayer>,
}

impl ReluSurrogate {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self, SurrogateError> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].cols != pair[0].rows {
                return Err(SurrogateError::BrokenChain {
                    layer: i + 1,
                    expected: pair[1].cols,
                    got: pair[0].rows,
                });
            }
        }
        match layers.last() {
            Some(last) if last.rows == 1 => Ok(Self { layers }),
            Some(last) => Err(SurrogateError::NotScalar(last.rows)),
            None => Err(SurrogateError::BadSetup("network has no layers".into())),
        }
    }

    /// A network returning `c` everywhere.
    pub fn constant(input_dim: usize, c: f64) -> Self {
        Self { layers: vec![DenseLayer::new(1, input_dim, vec![0.0; input_dim], vec![c])] }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Number of nonzero weights and biases.
    pub fn size(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.iter().chain(&l.bias).filter(|x| **x != 0.0).count())
            .sum()
    }

    pub fn to_json(&self) -> Result<String, SurrogateError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, SurrogateError> {
        let net: ReluSurrogate = serde_json::from_str(text)?;
        Self::new(net.layers)
    }

    fn eval_unchecked(&self, u: &[f64]) -> f64 {
        let mut x = u.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&x, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut x, &mut next);
        }
        x[0]
    }

    /// Appends relu(·) at the output so the network is nonnegative.
    fn clamped_below(&self) -> Self {
        let mut layers = self.layers.clone();
        layers.push(DenseLayer::new(1, 1, vec![1.0], vec![0.0]));
        Self { layers }
    }
}

pub fn relu_forward(net: &ReluSurrogate, u: &[f64]) -> Result<f64, SurrogateError> {
    if u.len() != net.input_dim() {
        return Err(SurrogateError::DimensionMismatch { expected: net.input_dim(), got: u.len() });
    }
    Ok(net.eval_unchecked(u))
}

/// Training settings for [`fit_surrogate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Axis-aligned box [lo_k, hi_k] on which Φ is approximated.
    pub domain: Vec<(f64, f64)>,
    /// Training points per axis.
    pub grid_n: usize,
    /// Test points per axis for the sup-error estimate.
    pub test_n: usize,
    pub adam_steps: usize,
    pub learning_rate: f64,
}

impl FitOptions {
    pub fn unit_box(dim: usize) -> Self {
        Self { domain: vec![(0.0, 1.0); dim], grid_n: 257, test_n: 4097, adam_steps: 300, learning_rate: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct SurrogateFit {
    pub net: ReluSurrogate,
    /// max |Φ - Φ^N| over the dense test grid.
    pub sup_error: f64,
    pub train_loss: f64,
}

fn tensor_grid(domain: &[(f64, f64)], per_axis: usize) -> Vec<Vec<f64>> {
    let per_axis = per_axis.max(2);
    let total = per_axis.pow(domain.len() as u32);
    (0..total)
        .map(|mut idx| {
            domain
                .iter()
                .map(|&(lo, hi)| {
                    let k = idx % per_axis;
                    idx /= per_axis;
                    lo + (hi - lo) * k as f64 / (per_axis - 1) as f64
                })
                .collect()
        })
        .collect()
}

/// First hidden layer: relu(±(u_k - t)) hinges. In 1D the knots are equispaced
/// with the first one below the domain so the layer spans all continuous
/// piecewise-linear functions on the knot partition. In higher dimension half
/// the units are axis-aligned hinges and half use seeded random directions.
fn first_layer(domain: &[(f64, f64)], width: usize, seed: SeedSpec) -> DenseLayer {
    let d = domain.len();
    let mut weights = vec![0.0; width * d];
    let mut bias = vec![0.0; width];
    let axis_units = if d == 1 { width } else { width.div_ceil(2) };
    let per_axis = axis_units.div_ceil(d).max(1);
    for unit in 0..axis_units {
        let axis = unit % d;
        let k = unit / d;
        let (lo, hi) = domain[axis];
        let step = (hi - lo) / per_axis as f64;
        let knot = if k == 0 { lo - step } else { lo + step * k as f64 };
        weights[unit * d + axis] = 1.0;
        bias[unit] = -knot;
    }
    let mut rng = seed.rng();
    for unit in axis_units..width {
        let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let point: Vec<f64> = domain.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect();
        let mut offset = 0.0;
        for k in 0..d {
            weights[unit * d + k] = dir[k] / norm;
            offset += dir[k] / norm * point[k];
        }
        bias[unit] = -offset;
    }
    DenseLayer::new(width, d, weights, bias)
}

fn hidden_features(hidden: &[DenseLayer], u: &[f64]) -> Vec<f64> {
    let mut x = u.to_vec();
    let mut next = Vec::new();
    for layer in hidden {
        layer.apply(&x, &mut next);
        next.iter_mut().for_each(|v| *v = v.max(0.0));
        std::mem::swap(&mut x, &mut next);
    }
    x
}

fn mse(net: &ReluSurrogate, inputs: &[Vec<f64>], targets: &[f64]) -> f64 {
    inputs.iter().zip(targets).map(|(u, t)| (net.eval_unchecked(u) - t).powi(2)).sum::<f64>()
        / inputs.len() as f64
}

/// Gradient of the mean squared error with respect to all parameters,
/// laid out layer by layer as (weights, bias).
fn mse_gradient(net: &ReluSurrogate, inputs: &[Vec<f64>], targets: &[f64]) -> Vec<Vec<f64>> {
    let nl = net.layers.len();
    let mut grads: Vec<Vec<f64>> =
        net.layers.iter().map(|l| vec![0.0; l.weights.len() + l.bias.len()]).collect();
    let scale = 2.0 / inputs.len() as f64;
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(nl + 1);
    let mut pre: Vec<Vec<f64>> = Vec::with_capacity(nl);
    for (u, t) in inputs.iter().zip(targets) {
        activations.clear();
        pre.clear();
        activations.push(u.clone());
        for (i, layer) in net.layers.iter().enumerate() {
            let mut z = Vec::new();
            layer.apply(&activations[i], &mut z);
            let a = if i + 1 < nl { z.iter().map(|v| v.max(0.0)).collect() } else { z.clone() };
            pre.push(z);
            activations.push(a);
        }
        let mut delta = vec![scale * (activations[nl][0] - t)];
        for i in (0..nl).rev() {
            let layer = &net.layers[i];
            let input = &activations[i];
            let g = &mut grads[i];
            for r in 0..layer.rows {
                for c in 0..layer.cols {
                    g[r * layer.cols + c] += delta[r] * input[c];
                }
                g[layer.weights.len() + r] += delta[r];
            }
            if i > 0 {
                let mut back = vec![0.0; layer.cols];
                for r in 0..layer.rows {
                    for c in 0..layer.cols {
                        back[c] += layer.weights[r * layer.cols + c] * delta[r];
                    }
                }
                for (b, z) in back.iter_mut().zip(&pre[i - 1]) {
                    if *z <= 0.0 {
                        *b = 0.0;
                    }
                }
                delta = back;
            }
        }
    }
    grads
}

/// Fits a ReLU network with hidden widths `widths` to u ↦ Φ(u; y) on a box.
///
/// Hidden layers get a structured initialization (hinge features in the first
/// layer, identity maps in later layers of equal width), the output layer is
/// solved by linear least squares, and all parameters are then refined by a
/// fixed budget of full-batch Adam steps, keeping the best iterate. When the
/// potential is declared nonnegative the output is clamped at zero.
pub fn fit_surrogate(
    phi: &Potential,
    y: &[f64],
    widths: &[usize],
    options: &FitOptions,
    seed: SeedSpec,
) -> Result<SurrogateFit, SurrogateError> {
    let d = options.domain.len();
    if d == 0 || options.grid_n < 2 {
        return Err(SurrogateError::BadSetup("need a non-empty domain and grid_n >= 2".into()));
    }
    if widths.contains(&0) {
        return Err(SurrogateError::BadSetup("hidden widths must be positive".into()));
    }
    let inputs = tensor_grid(&options.domain, options.grid_n);
    let targets: Vec<f64> = inputs.iter().map(|u| phi.phi(u, y)).collect();
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(SurrogateError::FitDiverged("potential is not finite on the training grid".into()));
    }

    let mut hidden: Vec<DenseLayer> = Vec::new();
    if let Some(&w1) = widths.first() {
        hidden.push(first_layer(&options.domain, w1, seed));
        for pair in widths.windows(2) {
            let (prev, width) = (pair[0], pair[1]);
            let mut weights = vec![0.0; width * prev];
            for k in 0..width.min(prev) {
                weights[k * prev + k] = 1.0;
            }
            hidden.push(DenseLayer::new(width, prev, weights, vec![0.0; width]));
        }
    }

    // Output layer by least squares on the hidden features.
    let features: Vec<Vec<f64>> = inputs.iter().map(|u| hidden_features(&hidden, u)).collect();
    let width = features[0].len();
    let design = DMatrix::from_fn(inputs.len(), width + 1, |i, k| if k < width { features[i][k] } else { 1.0 });
    let rhs = DVector::from_column_slice(&targets);
    let solution = design
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| SurrogateError::FitDiverged(format!("least squares failed: {e}")))?;
    if solution.iter().any(|v| !v.is_finite()) {
        return Err(SurrogateError::FitDiverged("least-squares output layer is not finite".into()));
    }
    let mut layers = hidden;
    layers.push(DenseLayer::new(1, width, solution.as_slice()[..width].to_vec(), vec![solution[width]]));
    let mut net = ReluSurrogate::new(layers)?;

    let initial = mse(&net, &inputs, &targets);
    let mut best = (initial, net.clone());
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-12);
    let mut m: Vec<Vec<f64>> = net.layers.iter().map(|l| vec![0.0; l.weights.len() + l.bias.len()]).collect();
    let mut v = m.clone();
    for step in 1..=options.adam_steps {
        let grads = mse_gradient(&net, &inputs, &targets);
        let (c1, c2) = (1.0 - beta1.powi(step as i32), 1.0 - beta2.powi(step as i32));
        for (li, layer) in net.layers.iter_mut().enumerate() {
            let nw = layer.weights.len();
            for (k, g) in grads[li].iter().enumerate() {
                m[li][k] = beta1 * m[li][k] + (1.0 - beta1) * g;
                v[li][k] = beta2 * v[li][k] + (1.0 - beta2) * g * g;
                let update = options.learning_rate * (m[li][k] / c1) / ((v[li][k] / c2).sqrt() + eps);
                if k < nw {
                    layer.weights[k] -= update;
                } else {
                    layer.bias[k - nw] -= update;
                }
            }
        }
        let loss = mse(&net, &inputs, &targets);
        if !loss.is_finite() {
            return Err(SurrogateError::FitDiverged(format!("loss became {loss} at step {step}")));
        }
        if loss < best.0 {
            best = (loss, net.clone());
        }
    }
    let (train_loss, mut net) = best;
    if phi.nonnegative {
        net = net.clamped_below();
    }
    let test = tensor_grid(&options.domain, options.test_n);
    let sup_error = test
        .iter()
        .chain(&inputs)
        .map(|u| (phi.phi(u, y) - net.eval_unchecked(u)).abs())
        .fold(0.0, f64::max);
    Ok(SurrogateFit { net, sup_error, train_loss })
}

/// Wraps a fitted network as a potential with envelopes f' = f e^{e},
/// g' = g, h' = h e^{-e}, where e bounds |Φ - Φ^N| on the points of interest.
pub fn surrogate_potential(net: &ReluSurrogate, base: &Potential, sup_error: f64) -> Potential {
    let net = net.clone();
    let phi: DataFn = Arc::new(move |u, _| net.eval_unchecked(u));
    Potential::new(format!("surrogate[{}]", base.label), phi, base.envelopes().widened(sup_error))
        .nonnegative(base.nonnegative)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::{gaussian_residual_potential, Envelopes, ForwardMap};

    fn abs_net() -> ReluSurrogate {
        ReluSurrogate::new(vec![
            DenseLayer::new(2, 1, vec![1.0, -1.0], vec![0.0, 0.0]),
            DenseLayer::new(1, 2, vec![1.0, 1.0], vec![0.0]),
        ])
        .unwrap()
    }

    #[test]
    fn forward_examples() {
        let c = ReluSurrogate::constant(3, 2.5);
        assert_eq!(relu_forward(&c, &[1.0, -4.0, 9.0]).unwrap(), 2.5);
        let relu = ReluSurrogate::new(vec![
            DenseLayer::new(1, 1, vec![1.0], vec![0.0]),
            DenseLayer::new(1, 1, vec![1.0], vec![0.0]),
        ])
        .unwrap();
        assert_eq!(relu_forward(&relu, &[-1.0]).unwrap(), 0.0);
        assert_eq!(relu_forward(&abs_net(), &[-3.0]).unwrap(), 3.0);
        assert!(matches!(
            relu_forward(&abs_net(), &[1.0, 2.0]),
            Err(SurrogateError::DimensionMismatch { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn broken_chain_rejected() {
        let err = ReluSurrogate::new(vec![
            DenseLayer::new(2, 1, vec![1.0, -1.0], vec![0.0, 0.0]),
            DenseLayer::new(1, 3, vec![1.0, 1.0, 1.0], vec![0.0]),
        ]);
        assert!(matches!(err, Err(SurrogateError::BrokenChain { .. })));
    }

    #[test]
    fn positive_homogeneity_of_abs_net() {
        let net = abs_net();
        for &(u, s) in &[(-3.0, 2.0), (0.7, 0.5), (5.0, 3.0)] {
            let mut scaled = net.clone();
            for l in &mut scaled.layers[..1] {
                l.weights.iter_mut().for_each(|w| *w *= s);
                l.bias.iter_mut().for_each(|b| *b *= s);
            }
            // Scaling the first affine map scales the output linearly.
            let lhs = relu_forward(&scaled, &[u]).unwrap();
            assert!((lhs - s * relu_forward(&net, &[u]).unwrap()).abs() < 1e-12);
            // Scaling only the input scales the output for a bias-free net.
            let rhs = relu_forward(&net, &[s * u]).unwrap();
            assert!((rhs - s * relu_forward(&net, &[u]).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn piecewise_linear_directional_derivatives() {
        let net = fit_surrogate(
            &gaussian_residual_potential(&ForwardMap::tanh(1), 1.0).unwrap(),
            &[0.3],
            &[8],
            &FitOptions { adam_steps: 0, ..FitOptions::unit_box(1) },
            SeedSpec::new(1, 0),
        )
        .unwrap()
        .net;
        // Away from kinks, the forward and backward slopes agree.
        let h = 1e-7;
        let mut agree = 0;
        for k in 0..50 {
            let u = 0.013 + k as f64 * 0.0197;
            let f = |x: f64| relu_forward(&net, &[x]).unwrap();
            let fwd = (f(u + h) - f(u)) / h;
            let bwd = (f(u) - f(u - h)) / h;
            if (fwd - bwd).abs() < 1e-5 * (1.0 + fwd.abs()) {
                agree += 1;
            }
        }
        assert!(agree >= 45, "only {agree} points were locally linear");
    }

    #[test]
    fn json_roundtrip() {
        let net = abs_net();
        let back = ReluSurrogate::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(net, back);
    }

    fn potential_from(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static, nonneg: bool) -> Potential {
        let phi: DataFn = Arc::new(move |u, _| f(u));
        Potential::new("test", phi, Envelopes::constant(1.0, 1.0, 1e-3)).nonnegative(nonneg)
    }

    #[test]
    fn constant_and_linear_potentials_fit_exactly() {
        let opts = FitOptions::unit_box(1);
        let fit = fit_surrogate(&potential_from(|_| 0.7, true), &[0.0], &[2], &opts, SeedSpec::new(0, 0)).unwrap();
        assert!(fit.sup_error < 1e-10, "{}", fit.sup_error);

        let opts2 = FitOptions { grid_n: 33, test_n: 65, ..FitOptions::unit_box(2) };
        let lin = potential_from(|u| 0.5 + 2.0 * u[0] - 0.75 * u[1], false);
        let fit = fit_surrogate(&lin, &[0.0], &[4], &opts2, SeedSpec::new(0, 0)).unwrap();
        assert!(fit.sup_error < 1e-6, "{}", fit.sup_error);
    }

    #[test]
    fn sup_error_decreases_with_width() {
        let phi = gaussian_residual_potential(&ForwardMap::tanh(1), 1.0).unwrap();
        let opts = FitOptions::unit_box(1);
        let errors: Vec<f64> = [4, 8, 16]
            .iter()
            .map(|&w| fit_surrogate(&phi, &[0.2], &[w, w], &opts, SeedSpec::new(3, 0)).unwrap().sup_error)
            .collect();
        assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
    }

    #[test]
    fn surrogate_envelopes() {
        let base = gaussian_residual_potential(&ForwardMap::tanh(1), 1.0).unwrap();
        let y = [0.2];
        let fit = fit_surrogate(&base, &y, &[6], &FitOptions::unit_box(1), SeedSpec::new(4, 0)).unwrap();
        let wrapped = surrogate_potential(&fit.net, &base, fit.sup_error);
        assert!((wrapped.f(&[0.5]) - fit.sup_error.exp()).abs() < 1e-15);
        let exact = surrogate_potential(&fit.net, &base, 0.0);
        assert_eq!(exact.f(&[0.5]), base.f(&[0.5]));
        assert_eq!(exact.h(&[0.5], &y), base.h(&[0.5], &y));
        // Points of the test grid, where the reported sup error is attained or exceeded.
        let pts: Vec<[f64; 1]> = (0..=1024).map(|k| [k as f64 / 1024.0]).collect();
        wrapped.check_envelopes(pts.iter().map(|p| p.as_slice()), &y).unwrap();
        assert!(pts.iter().all(|p| wrapped.phi(p, &y) >= 0.0));
    }
}
