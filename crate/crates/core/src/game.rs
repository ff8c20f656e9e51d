//! Running payoffs and Hamiltonians of the duality game, with numerical
//! saddle and Isaacs checks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Coefficients, GramBlocks, ValidatedModel};
use crate::policy::Point;
use crate::valuefn::{du_dt_fd, ValueCoefficients};

fn need_positive_theta(theta: f64) -> Result<()> {
    if theta > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "game payoffs need theta > 0 (got {theta}); theta = 0 is Kelly mode"
        )))
    }
}

/// g = ½h'ΣΣ'h − h'a − ½Ξ'Ξ + c − (h'Σ − Ξ')γ − (h'A − C)x − ‖γ‖²/(2θ)
pub fn running_payoff_g(
    model: &ValidatedModel,
    theta: f64,
    s: f64,
    x: &DVector<f64>,
    h: &DVector<f64>,
    gamma: &DVector<f64>,
) -> Result<f64> {
    need_positive_theta(theta)?;
    let c = model.coeffs(s)?;
    let gb = model.gram_blocks(s)?;
    let v = c.sigma.tr_mul(h) - &c.xi;
    Ok(
        0.5 * h.dot(&(&gb.ss * h)) - h.dot(&c.a) - 0.5 * gb.xi_xi + c.c - v.dot(gamma) - h.dot(&(&c.A * x))
            + c.C.dot(x)
            - gamma.norm_squared() / (2.0 * theta),
    )
}

/// g₁ = ((θ+1)/2)h'ΣΣ'h − h'(a+Ax) − θh'ΣΞ + (c + Cx) + ((θ−1)/2)Ξ'Ξ
pub fn running_payoff_g1(
    model: &ValidatedModel,
    theta: f64,
    s: f64,
    x: &DVector<f64>,
    h: &DVector<f64>,
) -> Result<f64> {
    need_positive_theta(theta)?;
    let c = model.coeffs(s)?;
    let gb = model.gram_blocks(s)?;
    Ok(g1(c, gb, theta, x, h))
}

fn g1(c: &Coefficients, gb: &GramBlocks, theta: f64, x: &DVector<f64>, h: &DVector<f64>) -> f64 {
    0.5 * (theta + 1.0) * h.dot(&(&gb.ss * h)) - h.dot(&(&c.a + &c.A * x)) - theta * h.dot(&gb.s_xi)
        + c.c
        + c.C.dot(x)
        + 0.5 * (theta - 1.0) * gb.xi_xi
}

fn f_value(
    c: &Coefficients,
    gb: &GramBlocks,
    theta: f64,
    x: &DVector<f64>,
    h: &DVector<f64>,
    gamma: &DVector<f64>,
    p: &DVector<f64>,
) -> f64 {
    let v = c.sigma.tr_mul(h) - &c.xi;
    0.5 * h.dot(&(&gb.ss * h)) - h.dot(&(&c.a + &c.A * x)) - gamma.norm_squared() / (2.0 * theta) - gamma.dot(&v)
        + gamma.dot(&c.lambda.tr_mul(p)) / theta
}

/// F(h, γ; p) = ½h'ΣΣ'h − h'(a+Ax) − γ'γ/(2θ) − γ'(Σ'h − Ξ) + γ'Λ'p/θ
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian_f(
    model: &ValidatedModel,
    theta: f64,
    s: f64,
    x: &DVector<f64>,
    h: &DVector<f64>,
    gamma: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<f64> {
    need_positive_theta(theta)?;
    Ok(f_value(model.coeffs(s)?, model.gram_blocks(s)?, theta, x, h, gamma, p))
}

/// Minimizer of F over h for fixed γ: (ΣΣ')⁻¹(a + Ax + Σγ).
pub fn argmin_h(model: &ValidatedModel, s: f64, x: &DVector<f64>, gamma: &DVector<f64>) -> Result<DVector<f64>> {
    let c = model.coeffs(s)?;
    Ok(model.gram_blocks(s)?.ss_solve(&(&c.a + &c.A * x + &c.sigma * gamma)))
}

/// Maximizer of F over γ for fixed h: Λ'p − θ(Σ'h − Ξ).
pub fn argmax_gamma(
    model: &ValidatedModel,
    theta: f64,
    s: f64,
    h: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<DVector<f64>> {
    let c = model.coeffs(s)?;
    Ok(c.lambda.tr_mul(p) - (c.sigma.tr_mul(h) - &c.xi) * theta)
}

/// The bracketed Bellman–Isaacs integrand in the u variables:
/// (b + Bx)'p + ½tr(ΛΛ'M) + θ(c + Cx) − (θ/2)Ξ'Ξ + θF(h, γ; p).
#[allow(clippy::too_many_arguments)]
fn isaacs_integrand(
    c: &Coefficients,
    gb: &GramBlocks,
    theta: f64,
    x: &DVector<f64>,
    h: &DVector<f64>,
    gamma: &DVector<f64>,
    p: &DVector<f64>,
    hess: &DMatrix<f64>,
) -> f64 {
    (&c.b + &c.B * x).dot(p) + 0.5 * gb.ll.component_mul(hess).sum() + theta * (c.c + c.C.dot(x))
        - 0.5 * theta * gb.xi_xi
        + theta * f_value(c, gb, theta, x, h, gamma, p)
}

fn theta_h_plus(c: &Coefficients, gb: &GramBlocks, theta: f64, x: &DVector<f64>, p: &DVector<f64>) -> f64 {
    // inf over h of sup over γ, times θ
    let y = &c.a + &c.A * x + &gb.s_xi * theta;
    let ss_y = gb.ss_solve(&y);
    let lp = c.lambda.tr_mul(p);
    let minus_lp = &lp - (&gb.pi * &lp) * (theta / (theta + 1.0));
    -theta * y.dot(&ss_y) / (2.0 * (theta + 1.0)) - theta / (theta + 1.0) * ss_y.dot(&(&gb.sl * p))
        + 0.5 * theta * theta * gb.xi_xi
        + theta * c.xi.dot(&lp)
        + 0.5 * lp.dot(&minus_lp)
}

fn theta_h_minus(c: &Coefficients, gb: &GramBlocks, theta: f64, x: &DVector<f64>, p: &DVector<f64>) -> f64 {
    // sup over γ of inf over h, times θ; (𝒫⁺)⁻¹r by a linear solve on 𝒫⁺
    let y0 = &c.a + &c.A * x;
    let z = gb.ss_solve(&y0);
    let r = c.sigma.tr_mul(&z) * (-theta) + &c.xi * theta + c.lambda.tr_mul(p);
    let d = c.xi.len();
    let plus = DMatrix::<f64>::identity(d, d) + &gb.pi * theta;
    let solved = plus.cholesky().expect("P+ is positive definite").solve(&r);
    0.5 * r.dot(&solved) - 0.5 * theta * y0.dot(&z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MinimaxGap {
    pub h_plus: f64,
    pub h_minus: f64,
    pub gap: f64,
}

impl MinimaxGap {
    pub fn relative(&self) -> f64 {
        self.gap / (1.0 + self.h_plus.abs())
    }
}

/// Full Hamiltonians with the inner optimizations done in both orders.
pub fn hamiltonian_minimax_gap(
    model: &ValidatedModel,
    vc: &ValueCoefficients,
    t: f64,
    x: &DVector<f64>,
) -> Result<MinimaxGap> {
    let pt = Point::new(model, vc, t, x)?;
    let (c, gb, theta) = (pt.c, pt.gb, pt.theta);
    let p = pt.Du();
    let (q_mat, _, _) = vc.coefficients_at(t)?;
    let hess = q_mat * (-theta);
    let common = (&c.b + &c.B * x).dot(&p) + 0.5 * gb.ll.component_mul(&hess).sum() + theta * (c.c + c.C.dot(x))
        - 0.5 * theta * gb.xi_xi;
    let h_plus = common + theta_h_plus(c, gb, theta, x, &p);
    let h_minus = common + theta_h_minus(c, gb, theta, x, &p);
    Ok(MinimaxGap {
        h_plus,
        h_minus,
        gap: (h_plus - h_minus).abs(),
    })
}

/// ∂u/∂t + ℋ at the grid node nearest t, with ∂u/∂t from finite differences
/// of the stored nodes; near zero when the coefficients solve the
/// Bellman–Isaacs equation.
pub fn bellman_isaacs_residual(
    model: &ValidatedModel,
    vc: &ValueCoefficients,
    t: f64,
    x: &DVector<f64>,
) -> Result<f64> {
    let (i, w) = vc.locate(t)?;
    let node = vc.grid[if w > 0.5 { i + 1 } else { i }];
    let h = hamiltonian_minimax_gap(model, vc, node, x)?.h_plus;
    Ok(du_dt_fd(vc, model, node, x)? + h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SaddleReport {
    pub center_value: f64,
    pub max_violation_h: f64,
    pub max_violation_gamma: f64,
    pub probe_count: usize,
}

impl SaddleReport {
    pub fn tolerance(&self) -> f64 {
        1e-9 * (1.0 + self.center_value.abs())
    }

    pub fn passed(&self) -> bool {
        self.max_violation_h <= self.tolerance() && self.max_violation_gamma <= self.tolerance()
    }
}

fn ball_point(rng: &mut ChaCha12Rng, dim: usize, radius: f64) -> DVector<f64> {
    let dir = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = dir.norm();
    if norm == 0.0 {
        return dir;
    }
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    dir * (r / norm)
}

/// Probe the saddle inequalities around (ĥ, γ̂): moving h alone must not lower
/// the integrand and moving γ alone must not raise it. Returns the report
/// without judging it; see [`saddle_check`].
#[allow(clippy::too_many_arguments)]
pub fn saddle_probe(
    model: &ValidatedModel,
    vc: &ValueCoefficients,
    t: f64,
    x: &DVector<f64>,
    probes: usize,
    radius: Option<f64>,
    seed: u64,
) -> Result<SaddleReport> {
    let pt = Point::new(model, vc, t, x)?;
    need_positive_theta(pt.theta)?;
    let (c, gb, theta) = (pt.c, pt.gb, pt.theta);
    let p = pt.Du();
    let (q_mat, _, _) = vc.coefficients_at(t)?;
    let hess = q_mat * (-theta);
    let h_hat = pt.h_feed();
    let g_hat = pt.gamma_form1(&h_hat);
    let radius = radius.unwrap_or(0.5 * (1.0 + h_hat.norm()));
    let center = isaacs_integrand(c, gb, theta, x, &h_hat, &g_hat, &p, &hess);
    let (m, d) = (h_hat.len(), g_hat.len());
    let (vh, vg) = (0..probes)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let dh = ball_point(&mut rng, m, radius);
            let dg = ball_point(&mut rng, d, radius);
            let at_h = isaacs_integrand(c, gb, theta, x, &(&h_hat + dh), &g_hat, &p, &hess);
            let at_g = isaacs_integrand(c, gb, theta, x, &h_hat, &(&g_hat + dg), &p, &hess);
            ((center - at_h).max(0.0), (at_g - center).max(0.0))
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)));
    Ok(SaddleReport {
        center_value: center,
        max_violation_h: vh,
        max_violation_gamma: vg,
        probe_count: probes,
    })
}

/// [`saddle_probe`] that fails with `SaddleViolation` beyond tolerance.
pub fn saddle_check(
    model: &ValidatedModel,
    vc: &ValueCoefficients,
    t: f64,
    x: &DVector<f64>,
    probes: usize,
    radius: Option<f64>,
    seed: u64,
) -> Result<SaddleReport> {
    if probes < 100 {
        return Err(Error::Config(format!(
            "saddle check needs at least 100 probes, got {probes}"
        )));
    }
    let report = saddle_probe(model, vc, t, x, probes, radius, seed)?;
    if report.passed() {
        Ok(report)
    } else {
        Err(Error::SaddleViolation {
            violation_h: report.max_violation_h,
            violation_gamma: report.max_violation_gamma,
            tolerance: report.tolerance(),
        })
    }
}

/// Smallest second difference along random lines through ĥ (should be > 0)
/// and largest through γ̂ (should be < 0).
pub fn saddle_curvature(
    model: &ValidatedModel,
    vc: &ValueCoefficients,
    t: f64,
    x: &DVector<f64>,
    lines: usize,
    step: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let pt = Point::new(model, vc, t, x)?;
    need_positive_theta(pt.theta)?;
    let (c, gb, theta) = (pt.c, pt.gb, pt.theta);
    let p = pt.Du();
    let (q_mat, _, _) = vc.coefficients_at(t)?;
    let hess = q_mat * (-theta);
    let h_hat = pt.h_feed();
    let g_hat = pt.gamma_form1(&h_hat);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut min_h = f64::INFINITY;
    let mut max_g = f64::NEG_INFINITY;
    let f = |h: &DVector<f64>, g: &DVector<f64>| isaacs_integrand(c, gb, theta, x, h, g, &p, &hess);
    for _ in 0..lines {
        let dh = ball_point(&mut rng, h_hat.len(), 1.0).normalize() * step;
        let dg = ball_point(&mut rng, g_hat.len(), 1.0).normalize() * step;
        let ch = f(&(&h_hat + &dh), &g_hat) - 2.0 * f(&h_hat, &g_hat) + f(&(&h_hat - &dh), &g_hat);
        let cg = f(&h_hat, &(&g_hat + &dg)) - 2.0 * f(&h_hat, &g_hat) + f(&h_hat, &(&g_hat - &dg));
        min_h = min_h.min(ch);
        max_g = max_g.max(cg);
    }
    Ok((min_h, max_g))
}

/// Two-step integrand in the U variables (p = DU, M = D²U):
/// {b + Bx − Λ[θ(Σ'h − Ξ) − ν]}'p + ½tr(ΛΛ'M) − g₁(h) + ‖ν‖²/(2θ).
#[allow(clippy::too_many_arguments)]
pub fn two_step_integrand(
    model: &ValidatedModel,
    theta: f64,
    s: f64,
    x: &DVector<f64>,
    h: &DVector<f64>,
    nu: &DVector<f64>,
    p: &DVector<f64>,
    hess: &DMatrix<f64>,
) -> Result<f64> {
    need_positive_theta(theta)?;
    let c = model.coeffs(s)?;
    let gb = model.gram_blocks(s)?;
    let tilt = (c.sigma.tr_mul(h) - &c.xi) * theta - nu;
    let drift = &c.b + &c.B * x - &c.lambda * tilt;
    Ok(
        drift.dot(p) + 0.5 * gb.ll.component_mul(hess).sum() - g1(c, gb, theta, x, h)
            + nu.norm_squared() / (2.0 * theta),
    )
}
