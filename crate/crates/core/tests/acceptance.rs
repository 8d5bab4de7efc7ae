//! Acceptance criteria, one line each. Runs without the libtest harness so
//! the table is always printed; exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use bipstab::bounds::product_coupling_bound;
use bipstab::cost::norm_cost;
use bipstab::experiments::{run, Experiment, ExperimentConfig, ExperimentOutcome};
use bipstab::measure::{reweight, weighted_mean_se, ParticleMeasure};
use bipstab::potential::{gaussian_residual_potential, ForwardMap};
use bipstab::prior::{GaussianPrior, PriorSampler};
use bipstab::transport::{cost_matrix, exact_ot, paired_coupling_cost, w1_1d_oracle};
use bipstab::SeedSpec;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 0;
const OT_TOLERANCE: f64 = 1e-9;
const GAP_TOLERANCE: f64 = 1e-9;
const HAND_TOLERANCE: f64 = 1e-12;
const OT_BUDGET: Duration = Duration::from_secs(10);
const EMPIRICAL_PRIOR_BUDGET: Duration = Duration::from_secs(300);

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn random_measure(rng: &mut ChaCha8Rng, dim: usize, n: usize) -> ParticleMeasure {
    let points: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
    let masses: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    ParticleMeasure::from_masses(dim, points, masses).unwrap()
}

fn run_default(name: &str) -> ExperimentOutcome {
    let config = ExperimentConfig::new(Experiment::default_for(name).unwrap(), SEED);
    run(&config).unwrap_or_else(|e| panic!("{name} failed: {e}"))
}

fn checks(outcome: &ExperimentOutcome, names: &[&str]) -> Verdict {
    let mut passed = true;
    let mut detail = Vec::new();
    for name in names {
        match outcome.check_named(name) {
            Some(c) => {
                passed &= c.passed;
                detail.push(format!("{name}: {}", c.detail));
            }
            None => {
                passed = false;
                detail.push(format!("{name}: missing"));
            }
        }
    }
    verdict(passed, detail.join("; "))
}

/// Fifty 1D instances with up to 512 points a side; the last slot of the
/// tuple holds the plans' duality gaps for the certificate criterion.
fn ot_against_oracle() -> (Verdict, Vec<(f64, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0x0071);
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut gaps = Vec::new();
    for case in 0..50 {
        let p = if case % 2 == 0 { 1.0 } else { 2.0 };
        let n = rng.random_range(1..=512);
        let m = rng.random_range(1..=512);
        let a = random_measure(&mut rng, 1, n);
        let b = random_measure(&mut rng, 1, m);
        let plan = exact_ot(&a, &b, &norm_cost(p).unwrap()).unwrap();
        let oracle = w1_1d_oracle(&a, &b, p).unwrap().powf(p);
        worst = worst.max((plan.primal_cost - oracle).abs());
        if p == 1.0 {
            gaps.push((plan.duality_gap(a.weights(), b.weights()).abs(), plan.primal_cost));
        }
    }
    let elapsed = start.elapsed();
    let v = verdict(
        worst <= OT_TOLERANCE && elapsed < OT_BUDGET,
        format!("max |exact − oracle| = {worst:.2e} (tol {OT_TOLERANCE:.0e}), {:.2} s (budget {} s)", elapsed.as_secs_f64(), OT_BUDGET.as_secs()),
    );
    (v, gaps)
}

fn duality_certificate(mut gaps: Vec<(f64, f64)>) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0x0072);
    let c = norm_cost(1.0).unwrap();
    let mut worst_violation = 0.0f64;
    for _ in 0..10 {
        let dim = rng.random_range(2..=4);
        let (n, m) = (rng.random_range(2..120), rng.random_range(2..120));
        let a = random_measure(&mut rng, dim, n);
        let b = random_measure(&mut rng, dim, m);
        let plan = exact_ot(&a, &b, &c).unwrap();
        gaps.push((plan.duality_gap(a.weights(), b.weights()).abs(), plan.primal_cost));
        worst_violation = worst_violation.max(plan.max_dual_violation(&cost_matrix(&a, &b, &c).unwrap()));
    }
    let worst = gaps.iter().map(|(g, p)| g / (1.0 + p)).fold(0.0f64, f64::max);
    verdict(
        worst <= GAP_TOLERANCE,
        format!(
            "{} metric instances, max gap/(1+primal) = {worst:.2e} (tol {GAP_TOLERANCE:.0e}), max dual violation {worst_violation:.2e}",
            gaps.len()
        ),
    )
}

fn couplings_dominate_optimum() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0x0073);
    let c = norm_cost(1.0).unwrap();
    let mut worst = f64::INFINITY;
    for case in 0..20 {
        let dim = 1 + case % 3;
        let n = rng.random_range(2..80);
        let a = random_measure(&mut rng, dim, n);
        let optimum_of = |x: &ParticleMeasure, y: &ParticleMeasure| exact_ot(x, y, &c).unwrap().primal_cost;
        // Particle-wise pairing with a perturbed copy.
        let shift: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = a.map_points(dim, |u| u.iter().zip(&shift).map(|(x, s)| x * 0.7 + s + x * x * 0.1).collect()).unwrap();
        let paired = paired_coupling_cost(&a, &b, &c).unwrap().mean;
        worst = worst.min(paired - optimum_of(&a, &b));
        // The independent coupling a ⊗ b' on unrelated marginals.
        let k = rng.random_range(2..80);
        let other = random_measure(&mut rng, dim, k);
        let matrix = cost_matrix(&a, &other, &c).unwrap();
        let m = other.len();
        let independent: f64 = a
            .weights()
            .iter()
            .enumerate()
            .flat_map(|(i, wa)| other.weights().iter().enumerate().map(move |(j, wb)| (i, j, wa * wb)))
            .map(|(i, j, w)| w * matrix[i * m + j])
            .sum();
        worst = worst.min(independent - optimum_of(&a, &other));
    }
    verdict(worst >= -1e-12, format!("40 couplings on 20 instances, min (coupling − optimum) = {worst:.3e}"))
}

fn conjugate_oracle() -> Verdict {
    let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 2.0]);
    let sigma = 0.8;
    let y = [0.6, -1.1];
    // Prior N(0, I): mean G^T (G G^T + σ² I)^{-1} y.
    let gram = &g * g.transpose() + DMatrix::identity(2, 2) * sigma * sigma;
    let exact = g.transpose() * gram.lu().solve(&DVector::from_row_slice(&y)).unwrap();
    let phi = gaussian_residual_potential(&ForwardMap::linear(g), sigma).unwrap();
    let prior = GaussianPrior { dim: 2, mean: 0.0, std: 1.0 };
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mu = prior.sample(10_000, SeedSpec::new(SEED, 400 + seed)).unwrap();
        let post = reweight(&mu, &phi, &y).unwrap().posterior;
        for k in 0..2 {
            let (mean, se) = weighted_mean_se(&post, |u| u[k]);
            worst = worst.max((mean - exact[k]).abs() / se);
        }
    }
    verdict(worst <= 3.0, format!("n = 10⁴, 10 seeds, max |mean − exact|/se = {worst:.3} (limit 3)"))
}

fn lemma_hand_value_and_matern(matern: &ExperimentOutcome) -> Verdict {
    // J = 1, λ = 1, λ* = 4, s = 0: 2^{3/2} · √(1 + 1) · |1 − 2| = 4.
    let value = product_coupling_bound(&[1.0], &[4.0], &[0.0], 0.0, 0.0, 1.0, 1.0);
    let hand = 4.0;
    let hand_ok = (value - hand).abs() <= HAND_TOLERANCE;
    let sweep = checks(matern, &["product_coupling_dominates"]);
    verdict(hand_ok && sweep.passed, format!("J=1 value {value} vs hand {hand}; {}", sweep.detail))
}

fn empirical_prior_rate() -> Verdict {
    let start = Instant::now();
    let outcome = run_default("empirical_prior");
    let elapsed = start.elapsed();
    let v = checks(&outcome, &["mean_w1_strictly_decreasing", "mean_w1_slope", "fournier_envelope"]);
    verdict(
        v.passed && elapsed < EMPIRICAL_PRIOR_BUDGET,
        format!("{}; {:.1} s (budget {} s)", v.detail, elapsed.as_secs_f64(), EMPIRICAL_PRIOR_BUDGET.as_secs()),
    )
}

fn byte_identical_rates() -> Verdict {
    let mut same = true;
    let mut sizes = Vec::new();
    for name in ["likelihood_perturbation", "pushforward", "empirical_prior"] {
        let config = ExperimentConfig::new(Experiment::default_for(name).unwrap(), SEED);
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for dir in &dirs {
            run(&config).unwrap().write_outputs(dir.path(), &config).unwrap();
        }
        let first = std::fs::read(dirs[0].path().join("rates.csv")).unwrap();
        let second = std::fs::read(dirs[1].path().join("rates.csv")).unwrap();
        same &= first == second && !first.is_empty();
        sizes.push(format!("{name} {} B", first.len()));
    }
    verdict(same, format!("two runs each: {}", sizes.join(", ")))
}

fn main() {
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let (ot, gaps) = ot_against_oracle();
    results.push((1, "exact OT equals the 1D quantile oracle", ot));
    results.push((2, "duality certificate for metric costs", duality_certificate(gaps)));
    results.push((3, "explicit couplings cost at least the optimum", couplings_dominate_optimum()));
    results.push((4, "conjugate linear-Gaussian posterior mean", conjugate_oracle()));

    let likelihood = run_default("likelihood_perturbation");
    results.push((
        5,
        "likelihood perturbation bound",
        checks(&likelihood, &["theorem_bound_rate", "zero_perturbation_exact"]),
    ));
    let shift = run_default("prior_shift");
    results.push((6, "mean-shift prior perturbation", checks(&shift, &["w1_vs_eps_slope", "evidence_form_rate"])));
    let matern = run_default("matern_hyper");
    results.push((7, "product-coupling bound", lemma_hand_value_and_matern(&matern)));
    results.push((8, "empirical prior rate", empirical_prior_rate()));
    results.push((9, "Matérn hyper-parameter rate", checks(&matern, &["w1_vs_hyper_gap_slope", "zero_perturbation_exact"])));
    let push = run_default("pushforward");
    results.push((10, "pushforward rate", checks(&push, &["w1_vs_map_distance_slope", "translation_exact"])));
    let surrogate = run_default("surrogate");
    results.push((11, "surrogate likelihood bound", checks(&surrogate, &["bound_every_width", "rhs_linear_in_error"])));
    results.push((12, "byte-identical rates.csv", byte_identical_rates()));

    let mut failed = 0;
    for (k, name, v) in &results {
        let status = if v.passed { "PASS" } else { "FAIL" };
        println!("criterion {k:>2} {status}  {name}: {}", v.detail);
        failed += usize::from(!v.passed);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
