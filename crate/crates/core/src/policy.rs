//! Optimal feedback policies by both solution routes, and the fractional-Kelly
//! decomposition of the optimal allocation.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{max_abs_diff, max_abs_vec};
use crate::model::{Coefficients, GramBlocks, ValidatedModel};
use crate::valuefn::ValueCoefficients;

/// Runtime cross-check tolerance between two representations of one quantity,
/// relative to max(1, ‖value‖∞).
pub const REPRESENTATION_TOL: f64 = 1e-10;

/// How the optimal allocation is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Route {
    /// Free energy–entropy duality: gradient Du of u.
    Feed,
    /// Two-step change of measure: gradient DU of U.
    Kn,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyAction {
    pub h_star: Vec<f64>,
    pub gamma_star: Vec<f64>,
    pub nu_star: Vec<f64>,
    pub kelly: Vec<f64>,
    pub bench_track: Vec<f64>,
    pub ihp: Vec<f64>,
    pub f: f64,
}

/// Everything the pointwise formulas need at one (t, x).
#[allow(non_snake_case)]
pub struct Point<'a> {
    pub theta: f64,
    pub c: &'a Coefficients,
    pub gb: &'a GramBlocks,
    pub x: &'a DVector<f64>,
    /// DU = Q_t x + q_t
    pub DU: DVector<f64>,
}

impl<'a> Point<'a> {
    pub fn new(model: &'a ValidatedModel, vc: &ValueCoefficients, t: f64, x: &'a DVector<f64>) -> Result<Self> {
        if x.len() != model.n() {
            return Err(Error::dims("x", model.n(), x.len()));
        }
        let (q_mat, q, _) = vc.coefficients_at(t)?;
        Ok(Point {
            theta: vc.theta,
            c: model.coeffs(t)?,
            gb: model.gram_blocks(t)?,
            x,
            DU: q_mat * x + q,
        })
    }

    /// Du = −θ DU, exactly zero in Kelly mode.
    #[allow(non_snake_case)]
    pub fn Du(&self) -> DVector<f64> {
        if self.theta == 0.0 {
            DVector::zeros(self.DU.len())
        } else {
            &self.DU * (-self.theta)
        }
    }

    /// a + A x
    pub fn drift(&self) -> DVector<f64> {
        &self.c.a + &self.c.A * self.x
    }

    pub fn h_feed(&self) -> DVector<f64> {
        let f = 1.0 / (self.theta + 1.0);
        let rhs = self.drift() + &self.gb.s_xi * self.theta + &self.gb.sl * self.Du();
        self.gb.ss_solve(&rhs) * f
    }

    pub fn h_kn(&self) -> DVector<f64> {
        let f = 1.0 / (self.theta + 1.0);
        let rhs = self.drift() + &self.gb.s_xi * self.theta - (&self.gb.sl * &self.DU) * self.theta;
        self.gb.ss_solve(&rhs) * f
    }

    /// Λ'Du − θ(Σ'h − Ξ)
    pub fn gamma_form1(&self, h: &DVector<f64>) -> DVector<f64> {
        let v = self.c.sigma.tr_mul(h) - &self.c.xi;
        self.c.lambda.tr_mul(&self.Du()) - v * self.theta
    }

    /// 𝒫⁻Λ'Du − θ/(θ+1) Σ'(ΣΣ')⁻¹(a+Ax) + θ𝒫⁻Ξ
    pub fn gamma_form2(&self) -> DVector<f64> {
        let theta = self.theta;
        let r = theta / (theta + 1.0);
        let minus = |v: DVector<f64>| -> DVector<f64> { &v - (&self.gb.pi * &v) * r };
        let kelly_dir = self.c.sigma.tr_mul(&self.gb.ss_solve(&self.drift()));
        minus(self.c.lambda.tr_mul(&self.Du())) - kelly_dir * r + minus(self.c.xi.clone()) * theta
    }

    pub fn nu(&self) -> DVector<f64> {
        if self.theta == 0.0 {
            return DVector::zeros(self.c.xi.len());
        }
        self.c.lambda.tr_mul(&self.DU) * (-self.theta)
    }

    pub fn kelly(&self) -> DVector<f64> {
        self.gb.ss_solve(&self.drift())
    }

    pub fn bench_track(&self) -> DVector<f64> {
        self.gb.ss_solve(&self.gb.s_xi)
    }

    pub fn ihp(&self) -> DVector<f64> {
        self.gb.ss_solve(&(&self.gb.sl * &self.DU))
    }
}

fn check(what: &str, a: &DVector<f64>, b: &DVector<f64>) -> Result<()> {
    let diff = max_abs_diff(a, b);
    let scale = max_abs_vec(a).max(max_abs_vec(b)).max(1.0);
    if diff > REPRESENTATION_TOL * scale {
        Err(Error::RepresentationMismatch {
            what: what.into(),
            diff,
        })
    } else {
        Ok(())
    }
}

/// ĥ by the duality route.
pub fn optimal_h(model: &ValidatedModel, vc: &ValueCoefficients, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(Point::new(model, vc, t, x)?.h_feed())
}

/// ĥ by the two-step route.
pub fn optimal_h_kn(model: &ValidatedModel, vc: &ValueCoefficients, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(Point::new(model, vc, t, x)?.h_kn())
}

pub fn optimal_h_route(
    model: &ValidatedModel,
    vc: &ValueCoefficients,
    t: f64,
    x: &DVector<f64>,
    route: Route,
) -> Result<DVector<f64>> {
    let p = Point::new(model, vc, t, x)?;
    Ok(match route {
        Route::Feed => p.h_feed(),
        Route::Kn => p.h_kn(),
    })
}

/// γ̂ from its first representation, cross-checked against the second.
pub fn optimal_gamma(model: &ValidatedModel, vc: &ValueCoefficients, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    let p = Point::new(model, vc, t, x)?;
    let g1 = p.gamma_form1(&p.h_feed());
    check("gamma forms", &g1, &p.gamma_form2())?;
    Ok(g1)
}

/// ν̂ = −θΛ'DU.
pub fn optimal_nu(model: &ValidatedModel, vc: &ValueCoefficients, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(Point::new(model, vc, t, x)?.nu())
}

pub fn kelly_portfolio(model: &ValidatedModel, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    let c = model.coeffs(t)?;
    Ok(model.gram_blocks(t)?.ss_solve(&(&c.a + &c.A * x)))
}

/// All policy components at one point, with every representation identity asserted.
pub fn fractional_kelly(
    model: &ValidatedModel,
    vc: &ValueCoefficients,
    t: f64,
    x: &DVector<f64>,
) -> Result<PolicyAction> {
    let p = Point::new(model, vc, t, x)?;
    let theta = p.theta;
    let f = 1.0 / (theta + 1.0);
    let h = p.h_feed();
    let gamma = p.gamma_form1(&h);
    let nu = p.nu();
    let (kelly, bench, ihp) = (p.kelly(), p.bench_track(), p.ihp());

    check("gamma forms", &gamma, &p.gamma_form2())?;
    check("feed vs kn allocation", &h, &p.h_kn())?;
    let recomposed = &kelly * f + (&bench - &ihp) * (1.0 - f);
    check("fractional Kelly decomposition", &h, &recomposed)?;
    let regularized = &kelly + p.gb.ss_solve(&(&p.c.sigma * &gamma));
    check("regularized Kelly identity", &h, &regularized)?;
    let tilt = &nu - (p.c.sigma.tr_mul(&h) - &p.c.xi) * theta;
    check("tilt relation", &gamma, &tilt)?;

    let v = |d: DVector<f64>| d.iter().copied().collect::<Vec<_>>();
    Ok(PolicyAction {
        h_star: v(h),
        gamma_star: v(gamma),
        nu_star: v(nu),
        kelly: v(kelly),
        bench_track: v(bench),
        ihp: v(ihp),
        f,
    })
}

/// y = offset + slope · x.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub offset: DVector<f64>,
    pub slope: DMatrix<f64>,
}

impl AffineMap {
    pub fn apply_into(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        out.copy_from(&self.offset);
        out.gemv(1.0, &self.slope, x, 1.0);
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.offset + &self.slope * x
    }
}

/// The optimal allocation at time t as an explicit affine function of x,
/// built by the given route from the interpolated (Q_t, q_t).
pub fn optimal_h_affine(model: &ValidatedModel, vc: &ValueCoefficients, t: f64, route: Route) -> Result<AffineMap> {
    let (q_mat, q, _) = vc.coefficients_at(t)?;
    let c = model.coeffs(t)?;
    let gb = model.gram_blocks(t)?;
    let theta = vc.theta;
    let f = 1.0 / (theta + 1.0);
    let a_tilde = &c.a + &gb.s_xi * theta;
    let (offset_rhs, slope_rhs) = if theta == 0.0 {
        (c.a.clone(), c.A.clone())
    } else {
        match route {
            Route::Feed => {
                // Du = −θ(Qx + q)
                let du0 = &q * (-theta);
                let du1 = &q_mat * (-theta);
                (&a_tilde + &gb.sl * du0, &c.A + &gb.sl * du1)
            }
            Route::Kn => (&a_tilde - (&gb.sl * &q) * theta, &c.A - (&gb.sl * &q_mat) * theta),
        }
    };
    Ok(AffineMap {
        offset: gb.ss_solve(&offset_rhs) * f,
        slope: gb.ss_solve_mat(&slope_rhs) * f,
    })
}

/// Kelly allocation (ΣΣ')⁻¹(a + Ax) as an affine map.
pub fn kelly_affine(model: &ValidatedModel, t: f64) -> Result<AffineMap> {
    let c = model.coeffs(t)?;
    let gb = model.gram_blocks(t)?;
    Ok(AffineMap {
        offset: gb.ss_solve(&c.a),
        slope: gb.ss_solve_mat(&c.A),
    })
}

/// Tilt Λ'Du at time t as an affine map in x (the ν̂ route uses −θΛ'DU).
pub fn tilt_affine(model: &ValidatedModel, vc: &ValueCoefficients, t: f64, route: Route) -> Result<AffineMap> {
    let (q_mat, q, _) = vc.coefficients_at(t)?;
    let c = model.coeffs(t)?;
    let theta = vc.theta;
    let (d, n) = (model.d(), model.n());
    if theta == 0.0 {
        return Ok(AffineMap {
            offset: DVector::zeros(d),
            slope: DMatrix::zeros(d, n),
        });
    }
    Ok(match route {
        Route::Feed => AffineMap {
            offset: c.lambda.tr_mul(&(&q * (-theta))),
            slope: c.lambda.tr_mul(&(&q_mat * (-theta))),
        },
        Route::Kn => AffineMap {
            offset: c.lambda.tr_mul(&q) * (-theta),
            slope: c.lambda.tr_mul(&q_mat) * (-theta),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_model, Coefficients, ModelSpec};
    use crate::valuefn::solve_value_coefficients;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn scalar(theta: f64, a: f64, sigma: f64) -> (ValidatedModel, ValueCoefficients) {
        let mut c = Coefficients::zeros(1, 1, 1);
        c.a[0] = a;
        c.sigma[(0, 0)] = sigma;
        let model = ModelSpec::constant(theta, 1.0, DVector::zeros(1), c)
            .validate()
            .unwrap();
        let vc = solve_value_coefficients(&model, 52).unwrap();
        (model, vc)
    }

    fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        max_abs_diff(a, b) / max_abs_vec(a).max(max_abs_vec(b)).max(1.0)
    }

    #[test]
    fn scalar_hand_value() {
        let (model, vc) = scalar(1.0, 0.04, 0.2);
        let h = optimal_h(&model, &vc, 0.0, &DVector::zeros(1)).unwrap();
        assert!((h[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn kelly_mode_is_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let model = random_model(&mut rng, 2, 3, 6, 0.0, 1.0);
        let vc = solve_value_coefficients(&model, 52).unwrap();
        let x = DVector::from_vec(vec![0.2, -0.1]);
        let h = optimal_h(&model, &vc, 0.3, &x).unwrap();
        assert_eq!(h, kelly_portfolio(&model, 0.3, &x).unwrap());
        let gamma = optimal_gamma(&model, &vc, 0.3, &x).unwrap();
        assert!(gamma.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gamma_without_hedge_or_benchmark() {
        // Du = 0, Ξ = 0: γ = −θ/(θ+1) Σ'(ΣΣ')⁻¹(a+Ax)
        let mut c = Coefficients::zeros(1, 2, 3);
        c.a = DVector::from_vec(vec![0.05, 0.03]);
        c.sigma = DMatrix::from_row_slice(2, 3, &[0.2, 0.0, 0.05, 0.03, 0.15, 0.0]);
        let theta = 2.0;
        let model = ModelSpec::constant(theta, 1.0, DVector::zeros(1), c.clone())
            .validate()
            .unwrap();
        let vc = solve_value_coefficients(&model, 52).unwrap();
        let x = DVector::zeros(1);
        let gamma = optimal_gamma(&model, &vc, 0.0, &x).unwrap();
        let ss = &c.sigma * c.sigma.transpose();
        let expect = c.sigma.transpose() * ss.try_inverse().unwrap() * &c.a * (-theta / (theta + 1.0));
        assert!(max_abs_diff(&gamma, &expect) < 1e-13);
    }

    #[test]
    fn zero_numerator_gives_zero_allocation() {
        let mut c = Coefficients::zeros(1, 1, 1);
        c.a[0] = 0.04;
        c.A[(0, 0)] = 0.4;
        c.sigma[(0, 0)] = 0.2;
        let model = ModelSpec::constant(1.0, 1.0, DVector::zeros(1), c).validate().unwrap();
        let vc = solve_value_coefficients(&model, 52).unwrap();
        // Λ = 0 and Ξ = 0, so a + Ax = 0 suffices
        let h = optimal_h(&model, &vc, 0.5, &DVector::from_vec(vec![-0.1])).unwrap();
        assert!(h[0].abs() < 1e-15);
    }

    #[test]
    fn theta_one_midpoint_and_pure_fractional_kelly() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let model = random_model(&mut rng, 2, 2, 5, 1.0, 1.0);
        let vc = solve_value_coefficients(&model, 52).unwrap();
        let x = DVector::from_vec(vec![0.1, 0.3]);
        let act = fractional_kelly(&model, &vc, 0.2, &x).unwrap();
        assert_eq!(act.f, 0.5);
        for i in 0..2 {
            let mid = 0.5 * (act.kelly[i] + act.bench_track[i] - act.ihp[i]);
            assert!((act.h_star[i] - mid).abs() < 1e-12);
        }

        let mut c = model.segment_coeffs(0).clone();
        c.lambda.fill(0.0);
        c.xi.fill(0.0);
        let m2 = ModelSpec::constant(3.0, 1.0, x.clone(), c).validate().unwrap();
        let vc2 = solve_value_coefficients(&m2, 52).unwrap();
        let act = fractional_kelly(&m2, &vc2, 0.2, &x).unwrap();
        for i in 0..2 {
            assert!((act.h_star[i] - 0.25 * act.kelly[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn no_factor_noise_means_no_second_stage_tilt() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let model = random_model(&mut rng, 2, 2, 5, 1.0, 1.0);
        let mut c = model.segment_coeffs(0).clone();
        c.lambda.fill(0.0);
        let m2 = ModelSpec::constant(1.0, 1.0, DVector::zeros(2), c).validate().unwrap();
        let vc = solve_value_coefficients(&m2, 52).unwrap();
        let nu = optimal_nu(&m2, &vc, 0.1, &DVector::from_vec(vec![0.4, -0.2])).unwrap();
        assert!(nu.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn kelly_limit_small_theta() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let base = random_model(&mut rng, 2, 3, 6, 1e-8, 1.0);
        let mut c = base.segment_coeffs(0).clone();
        c.xi.fill(0.0);
        let model = ModelSpec::constant(1e-8, 1.0, DVector::zeros(2), c).validate().unwrap();
        let vc = solve_value_coefficients(&model, 252).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.4]);
        let h = optimal_h(&model, &vc, 0.0, &x).unwrap();
        let k = kelly_portfolio(&model, 0.0, &x).unwrap();
        assert!(max_abs_diff(&h, &k) < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn identities_hold(seed in any::<u64>(), n in 1usize..=3, m in 1usize..=4, ti in 0usize..4) {
            let theta = [0.0, 0.3, 1.0, 5.0][ti];
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let model = random_model(&mut rng, n, m, n + m + 1, theta, 1.0);
            let vc = solve_value_coefficients(&model, 52).unwrap();
            for _ in 0..10 {
                let t = rng.random_range(0.0..1.0);
                let x = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
                let p = Point::new(&model, &vc, t, &x).unwrap();
                let h = p.h_feed();
                prop_assert!(rel(&h, &p.h_kn()) < 1e-12);
                let gamma = p.gamma_form1(&h);
                prop_assert!(rel(&gamma, &p.gamma_form2()) < 1e-12);
                let tilt = p.nu() - (p.c.sigma.tr_mul(&h) - &p.c.xi) * theta;
                prop_assert!(rel(&gamma, &tilt) < 1e-12);
                let act = fractional_kelly(&model, &vc, t, &x).unwrap();
                let hk = DVector::from_vec(act.kelly.clone());
                let reg = &hk + p.gb.ss_solve(&(&p.c.sigma * &gamma));
                prop_assert!(rel(&h, &reg) < 1e-12);
            }
        }

        #[test]
        fn policies_are_affine(seed in any::<u64>(), t in 0.0f64..1.0) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let model = random_model(&mut rng, 3, 2, 6, 1.0, 1.0);
            let vc = solve_value_coefficients(&model, 52).unwrap();
            let x = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let y = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let mid = (&x + &y) * 0.5;
            let eval = |z: &DVector<f64>| {
                let p = Point::new(&model, &vc, t, z).unwrap();
                let h = p.h_feed();
                (p.gamma_form1(&h), p.nu(), h)
            };
            let (gx, nx, hx) = eval(&x);
            let (gy, ny, hy) = eval(&y);
            let (gm, nm, hm) = eval(&mid);
            prop_assert!(rel(&hm, &((hx + hy) * 0.5)) < 1e-12);
            prop_assert!(rel(&gm, &((gx + gy) * 0.5)) < 1e-12);
            prop_assert!(rel(&nm, &((nx + ny) * 0.5)) < 1e-12);
        }

        #[test]
        fn affine_tables_match_pointwise(seed in any::<u64>(), t in 0.0f64..1.0) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let model = random_model(&mut rng, 2, 3, 6, 0.7, 1.0);
            let vc = solve_value_coefficients(&model, 52).unwrap();
            let x = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let p = Point::new(&model, &vc, t, &x).unwrap();
            for route in [Route::Feed, Route::Kn] {
                let map = optimal_h_affine(&model, &vc, t, route).unwrap();
                prop_assert!(rel(&map.apply(&x), &p.h_feed()) < 1e-12);
                let tilt = tilt_affine(&model, &vc, t, route).unwrap();
                prop_assert!(rel(&tilt.apply(&x), &p.nu()) < 1e-12);
            }
        }
    }
}
