use std::path::PathBuf;

use rsbench_core::policy::Route;
use rsbench_core::simulate::{
    kl_estimate, martingale_check, mc_criterion, simulate_paths, Density, Measure, SimConfig, Strategy,
};
use rsbench_core::{solve_value_coefficients, ModelSpec, ValidatedModel, ValueCoefficients};

fn scalar() -> (ValidatedModel, ValueCoefficients) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/scalar/model.json");
    let model = ModelSpec::from_path(path).unwrap().validate().unwrap();
    let vc = solve_value_coefficients(&model, 252).unwrap();
    (model, vc)
}

fn cfg(paths: usize, steps: usize, seed: u64) -> SimConfig {
    SimConfig {
        n_paths: paths,
        steps,
        seed,
        densities: false,
        strategy: Strategy::Optimal(Route::Feed),
        ..SimConfig::default()
    }
}

#[test]
fn antithetic_pairs_halve_the_criterion_variance() {
    let (model, vc) = scalar();
    let plain = simulate_paths(&model, &vc, &cfg(20_000, 1260, 1)).unwrap();
    let paired = simulate_paths(
        &model,
        &vc,
        &SimConfig {
            antithetic: true,
            ..cfg(20_000, 1260, 1)
        },
    )
    .unwrap();
    let theta = model.theta();
    let (p, a) = (
        mc_criterion(&plain, theta).unwrap(),
        mc_criterion(&paired, theta).unwrap(),
    );
    let ratio = (a.std_error / p.std_error).powi(2);
    assert!(ratio <= 0.5 / 0.8, "variance ratio {ratio}");
}

#[test]
fn certainty_equivalent_decreases_with_theta() {
    let (model, vc) = scalar();
    let b = simulate_paths(&model, &vc, &cfg(4000, 1260, 2)).unwrap();
    let js: Vec<f64> = [0.25, 0.5, 1.0, 2.0]
        .iter()
        .map(|&t| mc_criterion(&b, t).unwrap().j)
        .collect();
    assert!(js.windows(2).all(|w| w[1] <= w[0]), "{js:?}");
}

#[test]
fn optimal_tilt_entropy_estimators_agree() {
    let (model, vc) = scalar();
    let conf = SimConfig {
        measure: Measure::TiltedGamma,
        densities: true,
        antithetic: true,
        ..cfg(100_000, 252, 3)
    };
    let kl = kl_estimate(&simulate_paths(&model, &vc, &conf).unwrap()).unwrap();
    assert!(kl.agrees(), "{kl:?}");
    assert!(kl.from_gamma_norm > 0.0);
}

#[test]
fn candidate_densities_have_unit_mass() {
    let (model, vc) = scalar();
    let conf = SimConfig {
        densities: true,
        antithetic: true,
        ..cfg(100_000, 252, 4)
    };
    let b = simulate_paths(&model, &vc, &conf).unwrap();
    for density in [Density::Gamma, Density::H] {
        let (mean, se) = martingale_check(&b, density).unwrap();
        assert!((mean - 1.0).abs() < 3.0 * se, "{density:?}: {mean} ± {se}");
    }
}
