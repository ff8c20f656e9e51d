//! Euler–Maruyama simulation of the factor state, the log excess return and
//! the density processes under ℙ, ℙ^Γ or ℙ^H.
//!
//! Every path (or antithetic pair) draws its normals from its own ChaCha
//! stream keyed by (seed, unit index), so results do not depend on the
//! number of worker threads.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Coefficients, ValidatedModel};
use crate::policy::{kelly_affine, optimal_h_affine, tilt_affine, AffineMap, Route};
use crate::valuefn::ValueCoefficients;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Physical,
    TiltedGamma,
    TiltedH,
}

impl Measure {
    pub fn name(&self) -> &'static str {
        match self {
            Measure::Physical => "physical",
            Measure::TiltedGamma => "tilted_gamma",
            Measure::TiltedH => "tilted_h",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "physical" => Ok(Measure::Physical),
            "tilted_gamma" => Ok(Measure::TiltedGamma),
            "tilted_h" => Ok(Measure::TiltedH),
            other => Err(Error::Config(format!("unknown measure '{other}'"))),
        }
    }
}

/// Allocation schedule t ↦ (h = offset + slope·x).
#[derive(Clone)]
pub struct CustomPolicy(pub Arc<dyn Fn(f64) -> Result<AffineMap> + Send + Sync>);

impl fmt::Debug for CustomPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomPolicy")
    }
}

#[derive(Debug, Clone)]
pub enum Strategy {
    Optimal(Route),
    Kelly,
    /// A multiple of the Kelly allocation.
    ScaledKelly(f64),
    /// Fixed-weight benchmark replication; without explicit weights the
    /// tracking portfolio (ΣΣ')⁻¹ΣΞ is held.
    Benchmark(Option<DVector<f64>>),
    Fixed(DVector<f64>),
    Custom(CustomPolicy),
}

impl Strategy {
    pub fn name(&self) -> String {
        match self {
            Strategy::Optimal(Route::Feed) => "optimal_feed".into(),
            Strategy::Optimal(Route::Kn) => "optimal_kn".into(),
            Strategy::Kelly => "kelly".into(),
            Strategy::ScaledKelly(k) => format!("kelly_x{k}"),
            Strategy::Benchmark(_) => "benchmark".into(),
            Strategy::Fixed(_) => "fixed".into(),
            Strategy::Custom(_) => "custom".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "optimal" | "optimal_feed" | "feed" => Ok(Strategy::Optimal(Route::Feed)),
            "optimal_kn" | "kn" => Ok(Strategy::Optimal(Route::Kn)),
            "kelly" => Ok(Strategy::Kelly),
            "benchmark" => Ok(Strategy::Benchmark(None)),
            other => match other.strip_prefix("kelly_x").map(str::parse::<f64>) {
                Some(Ok(k)) => Ok(Strategy::ScaledKelly(k)),
                _ => Err(Error::Config(format!("unknown strategy '{other}'"))),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_paths: usize,
    pub steps: usize,
    pub dt: f64,
    pub seed: u64,
    pub measure: Measure,
    pub antithetic: bool,
    pub strategy: Strategy,
    /// Accumulate the density processes (off saves time when only returns matter).
    pub densities: bool,
    /// Keep X and R at every step.
    pub record_paths: bool,
    /// Keep the per-step log returns of V and L.
    pub record_returns: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_paths: 5000,
            steps: 1260,
            dt: 1.0 / 252.0,
            seed: 0,
            measure: Measure::Physical,
            antithetic: false,
            strategy: Strategy::Optimal(Route::Feed),
            densities: true,
            record_paths: false,
            record_returns: false,
        }
    }
}

/// Simulated trajectories. Per-path vectors are in path order; recorded
/// trajectories are flattened path-major.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub measure: Measure,
    pub strategy: String,
    pub seed: u64,
    pub antithetic: bool,
    pub n_paths: usize,
    pub steps: usize,
    pub dt: f64,
    pub n: usize,
    pub terminal_r: Vec<f64>,
    pub terminal_x: Vec<f64>,
    pub logchi_gamma: Vec<f64>,
    pub logchi_h: Vec<f64>,
    /// Third factor with the tilt computed from Du.
    pub logchi_h_to_gamma: Vec<f64>,
    /// Third factor with the tilt computed as ν̂ = −θΛ'DU.
    pub logchi_h_to_gamma_nu: Vec<f64>,
    /// ½∫‖γ‖² ds, left-point rule.
    pub gamma_energy: Vec<f64>,
    /// (steps+1)·n per path
    pub x_paths: Option<Vec<f64>>,
    /// steps+1 per path
    pub r_paths: Option<Vec<f64>>,
    /// m per step per path
    pub applied_h: Option<Vec<f64>>,
    /// d per step per path
    pub applied_gamma: Option<Vec<f64>>,
    /// steps per path
    pub log_v_returns: Option<Vec<f64>>,
    pub log_l_returns: Option<Vec<f64>>,
}

struct StepTable {
    seg: usize,
    h: AffineMap,
    /// Λ'Du
    tilt: AffineMap,
    /// −θΛ'DU
    tilt_nu: AffineMap,
}

#[derive(Default)]
struct PathOut {
    r: f64,
    x: Vec<f64>,
    lcg: f64,
    lch: f64,
    lchg: f64,
    lchg_nu: f64,
    energy: f64,
    x_path: Vec<f64>,
    r_path: Vec<f64>,
    h_path: Vec<f64>,
    g_path: Vec<f64>,
    lv: Vec<f64>,
    ll: Vec<f64>,
}

fn build_tables(model: &ValidatedModel, vc: &ValueCoefficients, cfg: &SimConfig) -> Result<Vec<StepTable>> {
    let (m, n) = (model.m(), model.n());
    (0..cfg.steps)
        .map(|i| {
            let t = (i as f64 * cfg.dt).min(model.horizon());
            let seg = model.segment_index(t)?;
            let gb = model.segment_blocks(seg);
            let h = match &cfg.strategy {
                Strategy::Optimal(route) => optimal_h_affine(model, vc, t, *route)?,
                Strategy::Kelly => kelly_affine(model, t)?,
                Strategy::ScaledKelly(k) => {
                    let map = kelly_affine(model, t)?;
                    AffineMap {
                        offset: map.offset * *k,
                        slope: map.slope * *k,
                    }
                }
                Strategy::Benchmark(Some(w)) | Strategy::Fixed(w) => {
                    if w.len() != m {
                        return Err(Error::dims("fixed allocation", m, w.len()));
                    }
                    AffineMap {
                        offset: w.clone(),
                        slope: DMatrix::zeros(m, n),
                    }
                }
                Strategy::Benchmark(None) => AffineMap {
                    offset: gb.ss_solve(&gb.s_xi),
                    slope: DMatrix::zeros(m, n),
                },
                Strategy::Custom(f) => {
                    let map = (f.0)(t)?;
                    if map.offset.len() != m || map.slope.shape() != (m, n) {
                        return Err(Error::dims("custom policy", format!("{m} + {m}x{n}"), map.offset.len()));
                    }
                    map
                }
            };
            Ok(StepTable {
                seg,
                h,
                tilt: tilt_affine(model, vc, t, Route::Feed)?,
                tilt_nu: tilt_affine(model, vc, t, Route::Kn)?,
            })
        })
        .collect()
}

struct Work {
    x: DVector<f64>,
    h: DVector<f64>,
    sh: DVector<f64>,
    v: DVector<f64>,
    nu: DVector<f64>,
    nu_kn: DVector<f64>,
    gamma: DVector<f64>,
    dw: DVector<f64>,
    ath: DVector<f64>,
    drift: DVector<f64>,
}

impl Work {
    fn new(x0: &DVector<f64>, m: usize, d: usize) -> Self {
        let n = x0.len();
        Work {
            x: x0.clone(),
            h: DVector::zeros(m),
            sh: DVector::zeros(d),
            v: DVector::zeros(d),
            nu: DVector::zeros(d),
            nu_kn: DVector::zeros(d),
            gamma: DVector::zeros(d),
            dw: DVector::zeros(d),
            ath: DVector::zeros(n),
            drift: DVector::zeros(n),
        }
    }
}

struct Ctx<'a> {
    model: &'a ValidatedModel,
    tables: Vec<StepTable>,
    cfg: &'a SimConfig,
    theta: f64,
}

impl Ctx<'_> {
    #[inline]
    fn step(&self, i: usize, z: &DVector<f64>, sign: f64, w: &mut Work, out: &mut PathOut) {
        let cfg = self.cfg;
        let dt = cfg.dt;
        let sq = dt.sqrt();
        let theta = self.theta;
        let tab = &self.tables[i];
        let c: &Coefficients = self.model.segment_coeffs(tab.seg);

        tab.h.apply_into(&w.x, &mut w.h);
        w.sh.gemv_tr(1.0, &c.sigma, &w.h, 0.0);
        w.v.copy_from(&w.sh);
        w.v -= &c.xi;
        let need_gamma = cfg.densities || cfg.measure == Measure::TiltedGamma || cfg.record_paths;
        if need_gamma {
            tab.tilt.apply_into(&w.x, &mut w.nu);
            w.gamma.copy_from(&w.nu);
            w.gamma.axpy(-theta, &w.v, 1.0);
        }

        // ℙ increment reconstructed from the driving noise of the chosen measure
        w.dw.copy_from(z);
        w.dw *= sign * sq;
        match cfg.measure {
            Measure::Physical => {}
            Measure::TiltedGamma => w.dw.axpy(dt, &w.gamma, 1.0),
            Measure::TiltedH => w.dw.axpy(-theta * dt, &w.v, 1.0),
        }

        // ℓ with the benchmark pieces arranged so that h = w gives exactly 0
        w.ath.gemv_tr(1.0, &c.A, &w.h, 0.0);
        w.ath -= &c.C;
        let v_plus = w.v.dot(&w.sh) + w.v.dot(&c.xi);
        let ell = -0.5 * v_plus + (w.h.dot(&c.a) - c.c) + w.ath.dot(&w.x);
        out.r += ell * dt + w.v.dot(&w.dw);

        if cfg.densities {
            let gg = w.gamma.norm_squared();
            out.lcg += -0.5 * gg * dt + w.gamma.dot(&w.dw);
            let vv = w.v.norm_squared();
            let v_dw = w.v.dot(&w.dw);
            out.lch += -theta * v_dw - 0.5 * theta * theta * vv * dt;
            // W^H increment = ΔW + θ v dt
            let nu_dwh = w.nu.dot(&w.dw) + theta * dt * w.nu.dot(&w.v);
            out.lchg += nu_dwh - 0.5 * w.nu.norm_squared() * dt;
            tab.tilt_nu.apply_into(&w.x, &mut w.nu_kn);
            let nu_kn_dwh = w.nu_kn.dot(&w.dw) + theta * dt * w.nu_kn.dot(&w.v);
            out.lchg_nu += nu_kn_dwh - 0.5 * w.nu_kn.norm_squared() * dt;
            out.energy += 0.5 * gg * dt;
        }

        if cfg.record_returns {
            let hax = w.ath.dot(&w.x) + c.C.dot(&w.x);
            let lv = (w.h.dot(&c.a) + hax - 0.5 * w.sh.norm_squared()) * dt + w.sh.dot(&w.dw);
            let ll = (c.c + c.C.dot(&w.x) - 0.5 * c.xi.norm_squared()) * dt + c.xi.dot(&w.dw);
            out.lv.push(lv);
            out.ll.push(ll);
        }
        if cfg.record_paths {
            out.h_path.extend(w.h.iter());
            out.g_path.extend(w.gamma.iter());
        }

        // X under ℙ with the reconstructed increment
        w.drift.copy_from(&c.b);
        w.drift.gemv(1.0, &c.B, &w.x, 1.0);
        w.x.axpy(dt, &w.drift, 1.0);
        w.x.gemv(1.0, &c.lambda, &w.dw, 1.0);

        if cfg.record_paths {
            out.x_path.extend(w.x.iter());
            out.r_path.push(out.r);
        }
    }

    fn run_unit(&self, unit: usize) -> Result<Vec<PathOut>> {
        let cfg = self.cfg;
        let (m, d) = (self.model.m(), self.model.d());
        let x0 = self.model.x0();
        let signs: &[f64] = if cfg.antithetic { &[1.0, -1.0] } else { &[1.0] };
        let first_path = unit * signs.len();
        let count = signs.len().min(cfg.n_paths - first_path);
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        rng.set_stream(unit as u64);
        let mut works: Vec<Work> = (0..count).map(|_| Work::new(x0, m, d)).collect();
        let mut outs: Vec<PathOut> = (0..count)
            .map(|_| {
                let mut o = PathOut::default();
                if cfg.record_paths {
                    o.x_path.extend(x0.iter());
                    o.r_path.push(0.0);
                }
                o
            })
            .collect();
        let mut z = DVector::zeros(d);
        for i in 0..cfg.steps {
            for zj in z.iter_mut() {
                *zj = rng.sample(StandardNormal);
            }
            for k in 0..count {
                self.step(i, &z, signs[k], &mut works[k], &mut outs[k]);
                if !(outs[k].r.is_finite() && works[k].x.iter().all(|v| v.is_finite())) {
                    return Err(Error::NonfiniteState {
                        path: first_path + k,
                        step: i + 1,
                    });
                }
            }
        }
        for (o, w) in outs.iter_mut().zip(works) {
            o.x = w.x.iter().copied().collect();
        }
        Ok(outs)
    }
}

/// Simulate `cfg.n_paths` paths of (X, R) and the density processes.
pub fn simulate_paths(model: &ValidatedModel, vc: &ValueCoefficients, cfg: &SimConfig) -> Result<PathBundle> {
    if cfg.n_paths == 0 {
        return Err(Error::Config("n_paths must be at least 1".into()));
    }
    if cfg.steps == 0 || !(cfg.dt > 0.0) {
        return Err(Error::Config("steps and dt must be positive".into()));
    }
    let span = cfg.steps as f64 * cfg.dt;
    if span > model.horizon() * (1.0 + 1e-9) {
        return Err(Error::Config(format!(
            "steps*dt = {span} exceeds the horizon {}",
            model.horizon()
        )));
    }
    if vc.n != model.n() || (vc.horizon() - model.horizon()).abs() > 1e-12 * model.horizon().max(1.0) {
        return Err(Error::Config(
            "value coefficients were solved for a different model".into(),
        ));
    }
    if matches!(cfg.strategy, Strategy::Optimal(_)) && vc.theta != model.theta() {
        return Err(Error::Config(format!(
            "value coefficients use theta {} but the model has {}",
            vc.theta,
            model.theta()
        )));
    }
    let ctx = Ctx {
        model,
        tables: build_tables(model, vc, cfg)?,
        cfg,
        theta: vc.theta,
    };
    let per_unit = if cfg.antithetic { 2 } else { 1 };
    let units = cfg.n_paths.div_ceil(per_unit);
    let results: Vec<Vec<PathOut>> = (0..units)
        .into_par_iter()
        .map(|u| ctx.run_unit(u))
        .collect::<Result<Vec<_>>>()?;
    let paths: Vec<PathOut> = results.into_iter().flatten().collect();

    let pick = |f: fn(&PathOut) -> f64| paths.iter().map(f).collect::<Vec<_>>();
    let concat = |f: fn(&PathOut) -> &Vec<f64>| paths.iter().flat_map(|p| f(p).iter().copied()).collect::<Vec<_>>();
    Ok(PathBundle {
        measure: cfg.measure,
        strategy: cfg.strategy.name(),
        seed: cfg.seed,
        antithetic: cfg.antithetic,
        n_paths: cfg.n_paths,
        steps: cfg.steps,
        dt: cfg.dt,
        n: model.n(),
        terminal_r: pick(|p| p.r),
        terminal_x: concat(|p| &p.x),
        logchi_gamma: pick(|p| p.lcg),
        logchi_h: pick(|p| p.lch),
        logchi_h_to_gamma: pick(|p| p.lchg),
        logchi_h_to_gamma_nu: pick(|p| p.lchg_nu),
        gamma_energy: pick(|p| p.energy),
        x_paths: cfg.record_paths.then(|| concat(|p| &p.x_path)),
        r_paths: cfg.record_paths.then(|| concat(|p| &p.r_path)),
        applied_h: cfg.record_paths.then(|| concat(|p| &p.h_path)),
        applied_gamma: cfg.record_paths.then(|| concat(|p| &p.g_path)),
        log_v_returns: cfg.record_returns.then(|| concat(|p| &p.lv)),
        log_l_returns: cfg.record_returns.then(|| concat(|p| &p.ll)),
    })
}

/// Sample mean and standard error; antithetic pairs are averaged first.
pub fn mean_and_se(values: &[f64], antithetic: bool) -> (f64, f64) {
    let samples: Vec<f64> = if antithetic {
        values
            .chunks(2)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    } else {
        values.to_vec()
    };
    let k = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / k;
    if samples.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CriterionEstimate {
    /// mean of exp(−θR_T)
    pub estimate: f64,
    pub std_error: f64,
    /// ln of the estimate; comparable with u(0, x₀)
    pub log_estimate: f64,
    pub log_std_error: f64,
    /// −(1/θ) ln estimate, the certainty equivalent (mean R_T at θ = 0)
    pub j: f64,
}

fn require(bundle: &PathBundle, expected: Measure) -> Result<()> {
    if bundle.measure != expected {
        return Err(Error::MeasureMismatch {
            expected: expected.name().into(),
            got: bundle.measure.name().into(),
        });
    }
    Ok(())
}

/// Monte Carlo estimate of E[exp(−θR_T)] under ℙ.
pub fn mc_criterion(bundle: &PathBundle, theta: f64) -> Result<CriterionEstimate> {
    require(bundle, Measure::Physical)?;
    if theta == 0.0 {
        let (mean, _) = mean_and_se(&bundle.terminal_r, bundle.antithetic);
        return Ok(CriterionEstimate {
            estimate: 1.0,
            std_error: 0.0,
            log_estimate: 0.0,
            log_std_error: 0.0,
            j: mean,
        });
    }
    // expm1 keeps precision when θR is tiny
    let shifted: Vec<f64> = bundle.terminal_r.iter().map(|r| (-theta * r).exp_m1()).collect();
    let (m1, se) = mean_and_se(&shifted, bundle.antithetic);
    let estimate = 1.0 + m1;
    let log_estimate = m1.ln_1p();
    Ok(CriterionEstimate {
        estimate,
        std_error: se,
        log_estimate,
        log_std_error: se / estimate,
        j: -log_estimate / theta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KlEstimate {
    pub from_logchi: f64,
    pub from_logchi_se: f64,
    pub from_gamma_norm: f64,
    pub from_gamma_norm_se: f64,
}

impl KlEstimate {
    pub fn combined_se(&self) -> f64 {
        self.from_logchi_se.hypot(self.from_gamma_norm_se)
    }

    pub fn agrees(&self) -> bool {
        (self.from_logchi - self.from_gamma_norm).abs() <= 3.0 * self.combined_se()
    }
}

/// Relative entropy of ℙ^Γ w.r.t. ℙ estimated two ways on a tilted bundle.
pub fn kl_estimate(bundle: &PathBundle) -> Result<KlEstimate> {
    require(bundle, Measure::TiltedGamma)?;
    let (a, sa) = mean_and_se(&bundle.logchi_gamma, bundle.antithetic);
    let (b, sb) = mean_and_se(&bundle.gamma_energy, bundle.antithetic);
    Ok(KlEstimate {
        from_logchi: a,
        from_logchi_se: sa,
        from_gamma_norm: b,
        from_gamma_norm_se: sb,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Density {
    Gamma,
    H,
}

/// Sample mean and standard error of χ at the horizon; unit mean expected.
pub fn martingale_check(bundle: &PathBundle, density: Density) -> Result<(f64, f64)> {
    require(bundle, Measure::Physical)?;
    let logs = match density {
        Density::Gamma => &bundle.logchi_gamma,
        Density::H => &bundle.logchi_h,
    };
    let chi: Vec<f64> = logs.iter().map(|l| l.exp()).collect();
    Ok(mean_and_se(&chi, bundle.antithetic))
}

/// Largest |ln χ^Γ − ln χ^H − ln χ^{H→Γ}| and largest difference between the
/// two routes for the third factor, over all paths.
pub fn factorization_errors(bundle: &PathBundle) -> (f64, f64) {
    let mut fact = 0.0_f64;
    let mut route = 0.0_f64;
    for i in 0..bundle.n_paths {
        fact = fact.max((bundle.logchi_gamma[i] - bundle.logchi_h[i] - bundle.logchi_h_to_gamma[i]).abs());
        route = route.max((bundle.logchi_h_to_gamma[i] - bundle.logchi_h_to_gamma_nu[i]).abs());
    }
    (fact, route)
}

impl PathBundle {
    /// One row per path: terminal R, terminal log-densities and ½∫‖γ‖².
    pub fn write_terminal_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "path",
            "r_terminal",
            "logchi_gamma",
            "logchi_h",
            "logchi_h_to_gamma",
            "gamma_energy",
        ])?;
        for i in 0..self.n_paths {
            w.write_record(&[
                i.to_string(),
                self.terminal_r[i].to_string(),
                self.logchi_gamma[i].to_string(),
                self.logchi_h[i].to_string(),
                self.logchi_h_to_gamma[i].to_string(),
                self.gamma_energy[i].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// One row per (path, step): log return of the strategy and of the benchmark.
    pub fn write_returns_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (Some(lv), Some(ll)) = (&self.log_v_returns, &self.log_l_returns) else {
            return Err(Error::Config("bundle was simulated without return recording".into()));
        };
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["path", "step", "log_return", "benchmark_log_return"])?;
        for p in 0..self.n_paths {
            for s in 0..self.steps {
                let k = p * self.steps + s;
                w.write_record(&[p.to_string(), s.to_string(), lv[k].to_string(), ll[k].to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Binary dump of full paths.
    ///
    /// Layout, all little-endian: 8-byte magic `RSBPATH1`; u64 path count;
    /// u64 step count; u64 factor dimension n; then per path (steps+1)·n f64
    /// values of X followed by (steps+1) f64 values of R.
    pub fn write_path_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (Some(xs), Some(rs)) = (&self.x_paths, &self.r_paths) else {
            return Err(Error::Config("bundle was simulated without path recording".into()));
        };
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        out.write_all(PATH_DUMP_MAGIC).map_err(io)?;
        for v in [self.n_paths as u64, self.steps as u64, self.n as u64] {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        let xs_per = (self.steps + 1) * self.n;
        let rs_per = self.steps + 1;
        for p in 0..self.n_paths {
            for v in &xs[p * xs_per..(p + 1) * xs_per] {
                out.write_all(&v.to_le_bytes()).map_err(io)?;
            }
            for v in &rs[p * rs_per..(p + 1) * rs_per] {
                out.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        out.flush().map_err(io)
    }
}

pub const PATH_DUMP_MAGIC: &[u8; 8] = b"RSBPATH1";

/// (n_paths, steps, n, X, R) as stored in a path dump.
pub type PathDump = (usize, usize, usize, Vec<f64>, Vec<f64>);

/// Read a dump written by [`PathBundle::write_path_dump`].
pub fn read_path_dump(path: impl AsRef<Path>) -> Result<PathDump> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 32 || &bytes[..8] != PATH_DUMP_MAGIC {
        return Err(Error::Schema("not a path dump".into()));
    }
    let u = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes")) as usize;
    let (paths, steps, n) = (u(0), u(1), u(2));
    let per = (steps + 1) * (n + 1);
    if bytes.len() != 32 + 8 * paths * per {
        return Err(Error::Schema("path dump has the wrong length".into()));
    }
    let mut xs = Vec::with_capacity(paths * (steps + 1) * n);
    let mut rs = Vec::with_capacity(paths * (steps + 1));
    let f = |k: usize| f64::from_le_bytes(bytes[32 + 8 * k..40 + 8 * k].try_into().expect("8 bytes"));
    for p in 0..paths {
        let base = p * per;
        xs.extend((0..(steps + 1) * n).map(|k| f(base + k)));
        rs.extend((0..steps + 1).map(|k| f(base + (steps + 1) * n + k)));
    }
    Ok((paths, steps, n, xs, rs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_model, Coefficients, ModelSpec};
    use crate::valuefn::{solve_value_coefficients, value_function};

    fn small_model(theta: f64) -> (ValidatedModel, ValueCoefficients) {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let model = random_model(&mut rng, 1, 2, 4, theta, 1.0);
        let vc = solve_value_coefficients(&model, 252).unwrap();
        (model, vc)
    }

    fn cfg(paths: usize, strategy: Strategy, measure: Measure) -> SimConfig {
        SimConfig {
            n_paths: paths,
            steps: 252,
            seed: 42,
            measure,
            strategy,
            ..SimConfig::default()
        }
    }

    #[test]
    fn benchmark_replication_is_exactly_zero() {
        let mut c = Coefficients::zeros(1, 2, 4);
        c.a = DVector::from_vec(vec![0.05, 0.07]);
        c.A = DMatrix::from_row_slice(2, 1, &[0.3, -0.2]);
        c.sigma = DMatrix::from_row_slice(2, 4, &[0.2, 0.0, 0.03, 0.0, 0.05, 0.25, 0.0, 0.0]);
        c.B[(0, 0)] = -1.0;
        c.lambda = DMatrix::from_row_slice(1, 4, &[0.0, 0.0, 0.1, 0.05]);
        let w = DVector::from_vec(vec![0.9, 0.1]);
        c.set_benchmark_weights(&w);
        let model = ModelSpec::constant(1.0, 1.0, DVector::from_vec(vec![0.2]), c)
            .validate()
            .unwrap();
        let vc = solve_value_coefficients(&model, 252).unwrap();
        let mut conf = cfg(50, Strategy::Benchmark(Some(w)), Measure::Physical);
        conf.record_paths = true;
        let b = simulate_paths(&model, &vc, &conf).unwrap();
        assert!(b.r_paths.unwrap().iter().all(|r| *r == 0.0));
    }

    #[test]
    fn zero_tilt_leaves_dynamics_unchanged() {
        // Kelly mode has γ ≡ 0 for the best-response tilt only when v = 0 too;
        // use θ = 0 so that γ = Λ'Du − 0 = 0.
        let (model, vc) = small_model(0.0);
        let phys = simulate_paths(&model, &vc, &cfg(20, Strategy::Kelly, Measure::Physical)).unwrap();
        let tilt = simulate_paths(&model, &vc, &cfg(20, Strategy::Kelly, Measure::TiltedGamma)).unwrap();
        assert!(phys.logchi_gamma.iter().all(|v| *v == 0.0));
        assert_eq!(phys.terminal_r, tilt.terminal_r);
        assert_eq!(phys.terminal_x, tilt.terminal_x);
        let kl = kl_estimate(&tilt).unwrap();
        assert_eq!(kl.from_logchi, 0.0);
        assert_eq!(kl.from_gamma_norm, 0.0);
        let (mean, _) = martingale_check(&phys, Density::Gamma).unwrap();
        assert_eq!(mean, 1.0);
    }

    #[test]
    fn reproducible_across_thread_counts() {
        let (model, vc) = small_model(1.0);
        let mut conf = cfg(37, Strategy::Optimal(Route::Feed), Measure::TiltedGamma);
        conf.antithetic = true;
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| simulate_paths(&model, &vc, &conf).unwrap());
        let b = four.install(|| simulate_paths(&model, &vc, &conf).unwrap());
        assert_eq!(a.terminal_r, b.terminal_r);
        assert_eq!(a.logchi_gamma, b.logchi_gamma);
        assert_eq!(a.n_paths, 37);
    }

    #[test]
    fn pathwise_factorization_and_measure_equality() {
        let (model, vc) = small_model(1.0);
        let b = simulate_paths(
            &model,
            &vc,
            &cfg(200, Strategy::Optimal(Route::Feed), Measure::Physical),
        )
        .unwrap();
        let (fact, route) = factorization_errors(&b);
        assert!(fact < 1e-10 && route < 1e-10, "{fact} {route}");
    }

    #[test]
    fn measure_mismatch_errors() {
        let (model, vc) = small_model(1.0);
        let b = simulate_paths(&model, &vc, &cfg(4, Strategy::Kelly, Measure::TiltedH)).unwrap();
        assert!(matches!(mc_criterion(&b, 1.0), Err(Error::MeasureMismatch { .. })));
        assert!(matches!(kl_estimate(&b), Err(Error::MeasureMismatch { .. })));
    }

    #[test]
    fn criterion_of_zero_returns() {
        let b = PathBundle {
            measure: Measure::Physical,
            strategy: "x".into(),
            seed: 0,
            antithetic: false,
            n_paths: 3,
            steps: 1,
            dt: 1.0,
            n: 1,
            terminal_r: vec![0.0; 3],
            terminal_x: vec![0.0; 3],
            logchi_gamma: vec![0.0; 3],
            logchi_h: vec![0.0; 3],
            logchi_h_to_gamma: vec![0.0; 3],
            logchi_h_to_gamma_nu: vec![0.0; 3],
            gamma_energy: vec![0.0; 3],
            x_paths: None,
            r_paths: None,
            applied_h: None,
            applied_gamma: None,
            log_v_returns: None,
            log_l_returns: None,
        };
        let c = mc_criterion(&b, 2.0).unwrap();
        assert_eq!(c.estimate, 1.0);
        assert_eq!(c.j, 0.0);
    }

    #[test]
    fn small_theta_criterion_is_mean_return() {
        let (model, vc) = small_model(1.0);
        let b = simulate_paths(&model, &vc, &cfg(500, Strategy::Kelly, Measure::Physical)).unwrap();
        let (mean, _) = mean_and_se(&b.terminal_r, false);
        let c = mc_criterion(&b, 1e-8).unwrap();
        assert!((c.j - mean).abs() < 1e-6 * mean.abs().max(1.0));
    }

    #[test]
    fn deterministic_tilt_entropy() {
        // Λ = 0, A = 0, Ξ = 0 and a fixed allocation give γ = −θΣ'h, constant
        let mut c = Coefficients::zeros(1, 1, 2);
        c.a[0] = 0.05;
        c.sigma = DMatrix::from_row_slice(1, 2, &[0.2, 0.1]);
        let model = ModelSpec::constant(2.0, 1.0, DVector::zeros(1), c).validate().unwrap();
        let vc = solve_value_coefficients(&model, 252).unwrap();
        let h = DVector::from_vec(vec![1.5]);
        let b = simulate_paths(&model, &vc, &cfg(4000, Strategy::Fixed(h), Measure::TiltedGamma)).unwrap();
        let kl = kl_estimate(&b).unwrap();
        let g0_sq = 4.0 * 1.5 * 1.5 * 0.05;
        assert!((kl.from_gamma_norm - 0.5 * g0_sq).abs() < 1e-12);
        assert!(kl.agrees(), "{kl:?}");
    }

    #[test]
    fn path_dump_round_trip() {
        let (model, vc) = small_model(1.0);
        let mut conf = cfg(3, Strategy::Kelly, Measure::Physical);
        conf.steps = 10;
        conf.record_paths = true;
        let b = simulate_paths(&model, &vc, &conf).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("paths.bin");
        b.write_path_dump(&file).unwrap();
        let (p, s, n, xs, rs) = read_path_dump(&file).unwrap();
        assert_eq!((p, s, n), (3, 10, 1));
        assert_eq!(&xs, b.x_paths.as_ref().unwrap());
        assert_eq!(&rs, b.r_paths.as_ref().unwrap());
    }

    #[test]
    fn horizon_is_enforced() {
        let (model, vc) = small_model(1.0);
        let mut conf = cfg(1, Strategy::Kelly, Measure::Physical);
        conf.steps = 300;
        assert!(matches!(simulate_paths(&model, &vc, &conf), Err(Error::Config(_))));
    }

    #[test]
    fn value_oracle_on_small_run() {
        let (model, vc) = small_model(1.0);
        let mut conf = cfg(4000, Strategy::Optimal(Route::Feed), Measure::Physical);
        conf.antithetic = true;
        conf.densities = false;
        let b = simulate_paths(&model, &vc, &conf).unwrap();
        let est = mc_criterion(&b, 1.0).unwrap();
        let u0 = value_function(&vc, 0.0, model.x0()).unwrap().u;
        assert!(
            (est.log_estimate - u0).abs() < 4.0 * est.log_std_error,
            "{est:?} vs {u0}"
        );
    }
}
