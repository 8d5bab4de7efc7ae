use bipstab::bounds::{likelihood_bound_rhs_with_gap, Estimate, HolderPair};
use bipstab::cost::norm_cost;
use bipstab::experiments::{
    fit_rate, run, DataPerturbationParams, EmpiricalPriorParams, Experiment, ExperimentConfig, ExperimentError,
    LikelihoodPerturbationParams, MaternParams, PriorShiftParams, PushforwardParams, ReportRecord, SurrogateParams,
};
use bipstab::potential::{fit_surrogate, gaussian_residual_potential, surrogate_potential, FitOptions, ForwardMap};
use bipstab::prior::{KLSpec, PriorSampler, UniformBox};
use bipstab::SeedSpec;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn small_configs() -> Vec<ExperimentConfig> {
    let experiments = vec![
        Experiment::EmpiricalPrior(EmpiricalPriorParams {
            n_grid: vec![64, 128, 256],
            replications: 4,
            ..Default::default()
        }),
        Experiment::MaternHyper(MaternParams {
            kl: KLSpec { truncation: 8, ..KLSpec::default() },
            particles: 256,
            replications: 1,
            ..Default::default()
        }),
        Experiment::Pushforward(PushforwardParams { particles: 256, replications: 2, ..Default::default() }),
        Experiment::Surrogate(SurrogateParams {
            widths: vec![2, 4, 8],
            seeds: 2,
            particles: 200,
            adam_steps: 20,
            ..Default::default()
        }),
        Experiment::DataPerturbation(DataPerturbationParams { particles: 200, replications: 3, ..Default::default() }),
        Experiment::LikelihoodPerturbation(LikelihoodPerturbationParams {
            particles: 100,
            perturbations: 3,
            replications: 2,
            ..Default::default()
        }),
        Experiment::PriorShift(PriorShiftParams { particles: 150, replications: 2, ..Default::default() }),
    ];
    experiments.into_iter().map(|e| ExperimentConfig::new(e, 21)).collect()
}

#[test]
fn every_study_writes_consistent_outputs() {
    for config in small_configs() {
        let name = config.experiment.name();
        let outcome = run(&config).unwrap_or_else(|e| panic!("{name}: {e}"));
        let dir = tempfile::tempdir().unwrap();
        outcome.write_outputs(dir.path(), &config).unwrap();

        let csv = std::fs::read_to_string(dir.path().join("rates.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("experiment,param,N_or_eps,lhs,rhs,satisfied,margin"));
        assert_eq!(lines.count(), outcome.rows.len(), "{name}");
        assert!(outcome.rows.iter().all(|r| r.experiment == name));

        let jsonl = std::fs::read_to_string(dir.path().join("bounds.jsonl")).unwrap();
        let records: Vec<ReportRecord> = jsonl.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(records.len(), outcome.reports.len());
        assert!(!records.is_empty(), "{name} emitted no bound reports");
        for r in &records {
            let rep = &r.report;
            assert_eq!(rep.satisfied, rep.lhs_estimate <= rep.rhs_value + 3.0 * rep.combined_se, "{name}: {rep:?}");
            assert!((rep.margin - (rep.rhs_value - rep.lhs_estimate)).abs() <= 1e-12 * (1.0 + rep.rhs_value.abs()));
        }

        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["seeds"]["root"], 21);
        assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
        let back: ExperimentConfig = serde_json::from_value(manifest["config"].clone()).unwrap();
        assert_eq!(back, config);
        assert!(!outcome.checks.is_empty());
    }
}

#[test]
fn zero_perturbation_rows_are_exactly_zero() {
    for config in small_configs() {
        let outcome = run(&config).unwrap();
        for row in outcome.rows.iter().filter(|r| r.n_or_eps == 0.0) {
            assert_eq!((row.lhs, row.rhs), (0.0, 0.0), "{}: {row:?}", outcome.experiment);
        }
        if outcome.experiment == "empirical_prior" {
            let reference = outcome.rows.iter().find(|r| r.param == "reference").unwrap();
            assert_eq!(reference.lhs, 0.0);
        }
    }
}

#[test]
fn reruns_are_byte_identical_and_seeds_matter() {
    for config in small_configs().into_iter().filter(|c| c.experiment.name() != "surrogate") {
        let first = run(&config).unwrap().rates_csv().unwrap();
        let second = run(&config).unwrap().rates_csv().unwrap();
        assert_eq!(first, second, "{}", config.experiment.name());
        let other = ExperimentConfig { seed: config.seed + 1, ..config.clone() };
        assert_ne!(first, run(&other).unwrap().rates_csv().unwrap(), "{}", config.experiment.name());
    }
}

#[test]
fn invalid_configs_are_rejected_before_running() {
    let cases = [
        r#"{"experiment":{"empirical_prior":{"y":[0.1,0.2]}}}"#,
        r#"{"experiment":{"empirical_prior":{"replications":0}}}"#,
        r#"{"experiment":{"matern_hyper":{"kl":{"gamma":1.0,"tau":1.0,"alpha":2,"truncation":256}}}}"#,
        r#"{"experiment":{"pushforward":{"dim":3,"forward":[[1.0,0.0,0.0]],"y":[0.1]}}}"#,
        r#"{"experiment":{"data_perturbation":{"shifts":[0.05,0.5],"radius":0.1}}}"#,
        r#"{"experiment":{"surrogate":{"holder":{"p":2.0,"q":3.0}}}}"#,
        r#"{"experiment":{"likelihood_perturbation":{"particles":10}}}"#,
        r#"{"experiment":{"prior_shift":{}},"thresholds":{"satisfaction_rate":1.5}}"#,
        r#"{"experiment":{"unknown_study":{}}}"#,
    ];
    for text in cases {
        assert!(ExperimentConfig::from_json(text).is_err(), "accepted {text}");
    }
    let ok = ExperimentConfig::from_json(r#"{"experiment":{"surrogate":{"holder":{"p":1.0,"q":"inf"}}},"seed":5}"#);
    assert_eq!(ok.unwrap().seed, 5);
}

#[test]
fn rate_fit_recovers_a_noisy_power_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let xs: Vec<f64> = (0..24).map(|k| 2f64.powf(k as f64 / 3.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x.powf(-0.5) * f64::exp(noise.sample(&mut rng))).collect();
    let fit = fit_rate(&xs, &ys).unwrap();
    // OLS standard error of the slope from the residuals.
    let n = xs.len() as f64;
    let mx = fit.log_x.iter().sum::<f64>() / n;
    let sxx: f64 = fit.log_x.iter().map(|x| (x - mx).powi(2)).sum();
    let rss: f64 = fit.log_x.iter().zip(&fit.log_y).map(|(x, y)| (y - fit.intercept - fit.slope * x).powi(2)).sum();
    let se = (rss / (n - 2.0) / sxx).sqrt();
    assert!((fit.slope + 0.5).abs() <= 3.0 * se, "slope {} ± {se}", fit.slope);
    assert!((0.0..=1.0).contains(&fit.r_squared));
    assert!(matches!(fit_rate(&[1.0, 2.0, -1.0], &[1.0, 1.0, 1.0]), Err(ExperimentError::NonPositiveInput { .. })));
}

#[test]
fn exact_surrogate_of_a_constant_potential_gives_zero_discrepancy() {
    // G = 0 makes Φ(u; y) = |y|²/(2σ²) constant in u.
    let phi = gaussian_residual_potential(&ForwardMap::linear(DMatrix::zeros(1, 1)), 0.5).unwrap();
    let y = [0.4];
    let fit = fit_surrogate(&phi, &y, &[4], &FitOptions::unit_box(1), SeedSpec::new(0, 0)).unwrap();
    let mu = UniformBox { dim: 1 }.sample(200, SeedSpec::new(0, 1)).unwrap();
    let phi_n = surrogate_potential(&fit.net, &phi, fit.sup_error);
    let holder = HolderPair::new(1.0, f64::INFINITY).unwrap();
    let report = likelihood_bound_rhs_with_gap(&phi, &phi_n, &mu, &norm_cost(1.0).unwrap(), holder, &y, Estimate::exact(fit.sup_error)).unwrap();
    // Both posteriors equal the prior up to rounding in the normalisation.
    assert!(report.lhs_estimate.abs() < 1e-12, "lhs {}", report.lhs_estimate);
    assert!(report.rhs_value >= 0.0 && fit.sup_error < 1e-9, "sup error {}", fit.sup_error);
}
