//! The `verify` invariant suite.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::json;

use rsbench_core::game::{bellman_isaacs_residual, hamiltonian_minimax_gap, saddle_probe};
use rsbench_core::linalg::{asymmetry, max_abs, min_eigenvalue};
use rsbench_core::policy::{fractional_kelly, Route};
use rsbench_core::simulate::{
    factorization_errors, kl_estimate, martingale_check, simulate_paths, Density, Measure, SimConfig, Strategy,
};
use rsbench_core::valuefn::max_riccati_residual;
use rsbench_core::{value_function, ValueCoefficients};

use crate::config::{derive_seed, horizon_steps};
use crate::{residual_scale, solve, CliError, CliResult, Ctx, Fault};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub status: Status,
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

fn judged(name: &'static str, value: f64, tolerance: f64, detail: impl Into<String>) -> Check {
    Check {
        name,
        status: if value <= tolerance { Status::Pass } else { Status::Fail },
        value,
        tolerance,
        detail: detail.into(),
    }
}

fn skipped(name: &'static str, detail: &str) -> Check {
    Check {
        name,
        status: Status::Skip,
        value: f64::NAN,
        tolerance: f64::NAN,
        detail: detail.into(),
    }
}

/// Add an asymmetric bump to every stored Q.
fn corrupt(vc: &mut ValueCoefficients) {
    for q in &mut vc.q_mat {
        let n = q.nrows();
        let bump = 0.1 * max_abs(q).max(1.0);
        q[(0, n - 1)] += bump;
    }
}

/// 3-standard-error test of a unit mean; exact equality passes when se = 0.
fn unit_mean_distance(mean: f64, se: f64) -> f64 {
    if se > 0.0 {
        (mean - 1.0).abs() / se
    } else if mean == 1.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

pub(crate) fn cmd_verify(ctx: &Ctx, fault: Option<Fault>) -> CliResult<()> {
    let cfg = ctx.cfg()?;
    let model = cfg.model()?;
    let mut vc = solve(cfg, &model)?;
    if fault == Some(Fault::CorruptQ) {
        corrupt(&mut vc);
    }
    let theta = model.theta();
    let kelly_mode = theta == 0.0;
    let (n, horizon) = (model.n(), model.horizon());
    let vcfg = &cfg.verify;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "verify"));
    let points: Vec<(f64, DVector<f64>)> = (0..vcfg.points.max(1))
        .map(|_| {
            let t = rng.random_range(0.0..horizon);
            let x = model.x0() + DVector::from_fn(n, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
            (t, x)
        })
        .collect();
    let mut checks = Vec::new();

    // projection identity P⁻P⁺ = I
    let mut proj = 0.0_f64;
    for (t, _) in &points {
        let p = model.projection_matrices(*t, theta)?;
        let d = p.plus.nrows();
        proj = proj.max(max_abs(&(&p.minus * &p.plus - DMatrix::identity(d, d))));
    }
    checks.push(judged(
        "projection_identity",
        proj,
        1e-12,
        "max |P-P+ - I| over sample times",
    ));

    // Riccati residual and the structure of Q
    let scale = residual_scale(&vc);
    let res = max_riccati_residual(&vc, &model)?;
    checks.push(judged(
        "riccati_residual",
        res.max(),
        cfg.solver.residual_tolerance * scale,
        format!("worst node t = {:.6}", res.time),
    ));
    let asym = vc.q_mat.iter().map(asymmetry).fold(0.0, f64::max);
    checks.push(judged("q_symmetry", asym, 1e-12 * scale, "max |Q - Q'| over nodes"));
    let min_eig = vc.q_mat.iter().map(min_eigenvalue).fold(f64::INFINITY, f64::min);
    checks.push(judged(
        "q_psd",
        (-min_eig).max(0.0),
        1e-8 * scale,
        format!("min eigenvalue {min_eig:.3e}"),
    ));

    // pointwise policy identities (routes, decomposition, regularized Kelly)
    let mut identity_failure = None;
    for (t, x) in &points {
        if let Err(e) = fractional_kelly(&model, &vc, *t, x) {
            identity_failure = Some(e.to_string());
            break;
        }
    }
    checks.push(match identity_failure {
        None => judged("policy_identities", 0.0, 0.0, format!("{} points", points.len())),
        Some(msg) => Check {
            name: "policy_identities",
            status: Status::Fail,
            value: f64::INFINITY,
            tolerance: 0.0,
            detail: msg,
        },
    });

    // game checks
    const KELLY: &str = "Kelly mode (theta = 0): game-route checks do not apply";
    if kelly_mode {
        for name in ["hamiltonian_minimax", "saddle", "bellman_isaacs"] {
            checks.push(skipped(name, KELLY));
        }
    } else {
        let mut gap = 0.0_f64;
        let mut bi = 0.0_f64;
        for (t, x) in &points {
            let g = hamiltonian_minimax_gap(&model, &vc, *t, x)?;
            gap = gap.max(g.relative());
            bi = bi.max(bellman_isaacs_residual(&model, &vc, *t, x)?.abs() / (1.0 + g.h_plus.abs()));
        }
        checks.push(judged("hamiltonian_minimax", gap, 1e-9, "relative |H+ - H-|"));
        let (t0, x0) = &points[0];
        let sp = saddle_probe(
            &model,
            &vc,
            *t0,
            x0,
            vcfg.saddle_probes.max(100),
            None,
            derive_seed(cfg.seed, "saddle"),
        )?;
        checks.push(judged(
            "saddle",
            sp.max_violation_h.max(sp.max_violation_gamma),
            sp.tolerance(),
            format!("{} probes", sp.probe_count),
        ));
        checks.push(judged("bellman_isaacs", bi, 1e-6, "relative |du/dt + H|"));
    }

    // measure-change checks on simulated paths
    let steps = vcfg.steps.unwrap_or_else(|| horizon_steps(horizon, cfg.simulation.dt));
    let sim = SimConfig {
        n_paths: vcfg.paths.max(2),
        steps,
        dt: cfg.simulation.dt,
        seed: derive_seed(cfg.seed, "verify-sim"),
        measure: Measure::Physical,
        antithetic: true,
        strategy: Strategy::Optimal(Route::Feed),
        densities: true,
        record_paths: false,
        record_returns: false,
    };
    let phys = simulate_paths(&model, &vc, &sim)?;
    let (fact, route) = factorization_errors(&phys);
    checks.push(judged(
        "density_factorization",
        fact,
        1e-10,
        "max pathwise |ln chi_G - ln chi_H - ln chi_HG|",
    ));
    checks.push(judged(
        "measure_equality",
        route,
        1e-10,
        "third factor from Du vs from nu",
    ));
    let (mg, sg) = martingale_check(&phys, Density::Gamma)?;
    checks.push(judged(
        "martingale_gamma",
        unit_mean_distance(mg, sg),
        3.0,
        format!("mean {mg:.6} se {sg:.2e} (in standard errors)"),
    ));
    let (mh, sh) = martingale_check(&phys, Density::H)?;
    checks.push(judged(
        "martingale_h",
        unit_mean_distance(mh, sh),
        3.0,
        format!("mean {mh:.6} se {sh:.2e} (in standard errors)"),
    ));
    let tilted = simulate_paths(
        &model,
        &vc,
        &SimConfig {
            measure: Measure::TiltedGamma,
            seed: derive_seed(cfg.seed, "verify-tilted"),
            ..sim
        },
    )?;
    let kl = kl_estimate(&tilted)?;
    let se = kl.combined_se();
    let kl_dist = if se > 0.0 {
        (kl.from_logchi - kl.from_gamma_norm).abs() / se
    } else if kl.from_logchi == kl.from_gamma_norm {
        0.0
    } else {
        f64::INFINITY
    };
    checks.push(judged(
        "kl_duality",
        kl_dist,
        3.0,
        format!(
            "{:.6} vs {:.6} (in combined standard errors)",
            kl.from_logchi, kl.from_gamma_norm
        ),
    ));

    let failed: Vec<String> = checks
        .iter()
        .filter(|c| c.status == Status::Fail)
        .map(|c| c.name.to_string())
        .collect();
    let u0 = value_function(&vc, 0.0, model.x0())?.u;
    ctx.write_json(
        "verify.json",
        &json!({
            "theta": theta,
            "kelly_mode": kelly_mode,
            "fault": fault.map(|_| "corrupt-q"),
            "value_u0": u0,
            "checks": checks,
            "passed": failed.is_empty(),
        }),
    )?;
    for c in &checks {
        let tag = match c.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        };
        if c.status == Status::Skip {
            println!("{tag}  {:<22} {}", c.name, c.detail);
        } else {
            println!(
                "{tag}  {:<22} {:.3e} (tol {:.1e})  {}",
                c.name, c.value, c.tolerance, c.detail
            );
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification { failed })
    }
}
