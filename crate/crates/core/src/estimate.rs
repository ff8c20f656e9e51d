//! Fit constant coefficients from a panel of daily excess log returns and
//! factor levels: OLS on the Euler-discretized SDEs for the drifts, a joint
//! realized covariance and its Cholesky factor for the loadings.

use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::semidefinite_cholesky;
use crate::model::{Coefficients, ModelFile, ModelSpec, ValidatedModel};

/// Relative pivot threshold for the joint factorization.
pub const PIVOT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    pub dates: Vec<NaiveDate>,
    pub asset_names: Vec<String>,
    pub factor_names: Vec<String>,
    /// Row t holds the log excess return earned from row t−1 to row t; row 0 is unused
    /// by the drift regression.
    pub asset_logret: DMatrix<f64>,
    pub factor_levels: DMatrix<f64>,
    pub bench_weights: DVector<f64>,
    pub dt: f64,
}

impl ReturnPanel {
    pub fn rows(&self) -> usize {
        self.asset_logret.nrows()
    }

    pub fn m(&self) -> usize {
        self.asset_logret.ncols()
    }

    pub fn n(&self) -> usize {
        self.factor_levels.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.rows();
        if self.factor_levels.nrows() != t || self.dates.len() != t {
            return Err(Error::dims("panel rows", t, self.factor_levels.nrows()));
        }
        if self.bench_weights.len() != self.m() {
            return Err(Error::dims("benchmark weights", self.m(), self.bench_weights.len()));
        }
        check_weights(&self.bench_weights)?;
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }

    /// Increments k = 1..T−1 as rows [asset returns, factor increments, benchmark return].
    fn joint_increments(&self) -> DMatrix<f64> {
        let (t, m, n) = (self.rows(), self.m(), self.n());
        DMatrix::from_fn(t - 1, m + n + 1, |k, j| {
            if j < m {
                self.asset_logret[(k + 1, j)]
            } else if j < m + n {
                self.factor_levels[(k + 1, j - m)] - self.factor_levels[(k, j - m)]
            } else {
                (0..m)
                    .map(|i| self.bench_weights[i] * self.asset_logret[(k + 1, i)])
                    .sum()
            }
        })
    }
}

fn check_weights(w: &DVector<f64>) -> Result<()> {
    let sum = w.sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::WeightSum(sum));
    }
    Ok(())
}

/// Column roles in the panel CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanelSchema {
    pub date_column: String,
    pub asset_prefix: String,
    pub factor_prefix: String,
}

impl Default for PanelSchema {
    fn default() -> Self {
        PanelSchema {
            date_column: "date".into(),
            asset_prefix: "asset:".into(),
            factor_prefix: "factor:".into(),
        }
    }
}

/// Parse a panel CSV. Columns without a recognized role are ignored.
pub fn load_panel(path: impl AsRef<Path>, schema: &PanelSchema, weights: &[f64], dt: f64) -> Result<ReturnPanel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_panel(&text, schema, weights, dt)
}

pub fn parse_panel(text: &str, schema: &PanelSchema, weights: &[f64], dt: f64) -> Result<ReturnPanel> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let date_col = headers
        .iter()
        .position(|h| h == schema.date_column)
        .ok_or_else(|| Error::Schema(format!("no '{}' column", schema.date_column)))?;
    let role = |prefix: &str| -> Vec<(usize, String)> {
        headers
            .iter()
            .enumerate()
            .filter_map(|(i, h)| h.strip_prefix(prefix).map(|name| (i, name.to_string())))
            .collect()
    };
    let assets = role(&schema.asset_prefix);
    let factors = role(&schema.factor_prefix);
    if assets.is_empty() {
        return Err(Error::Schema(format!("no columns prefixed '{}'", schema.asset_prefix)));
    }
    if factors.is_empty() {
        return Err(Error::Schema(format!("no columns prefixed '{}'", schema.factor_prefix)));
    }
    if weights.len() != assets.len() {
        return Err(Error::dims("benchmark weights", assets.len(), weights.len()));
    }

    let mut dates = Vec::new();
    let mut a_vals = Vec::new();
    let mut f_vals = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |i: usize| -> Result<&str> {
            match record.get(i) {
                Some(s) if !s.is_empty() => Ok(s),
                _ => Err(Error::Parse {
                    line,
                    message: format!("missing value in column '{}'", &headers[i]),
                }),
            }
        };
        let date = NaiveDate::parse_from_str(field(date_col)?, "%Y-%m-%d").map_err(|e| Error::Parse {
            line,
            message: format!("bad date: {e}"),
        })?;
        if let Some(prev) = dates.last() {
            if date <= *prev {
                return Err(Error::NonMonotoneDates { line });
            }
        }
        dates.push(date);
        let number = |i: usize| -> Result<f64> {
            let s = field(i)?;
            let v: f64 = s.parse().map_err(|_| Error::Parse {
                line,
                message: format!("'{s}' in column '{}' is not a number", &headers[i]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("non-finite value in column '{}'", &headers[i]),
                });
            }
            Ok(v)
        };
        for (i, _) in &assets {
            a_vals.push(number(*i)?);
        }
        for (i, _) in &factors {
            f_vals.push(number(*i)?);
        }
    }
    let t = dates.len();
    let panel = ReturnPanel {
        dates,
        asset_names: assets.into_iter().map(|a| a.1).collect(),
        factor_names: factors.into_iter().map(|f| f.1).collect(),
        asset_logret: DMatrix::from_row_slice(t, weights.len(), &a_vals),
        factor_levels: DMatrix::from_row_slice(t, f_vals.len() / t.max(1), &f_vals),
        bench_weights: DVector::from_column_slice(weights),
        dt,
    };
    panel.validate()?;
    Ok(panel)
}

pub fn write_panel(panel: &ReturnPanel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["date".to_string()];
    header.extend(panel.asset_names.iter().map(|n| format!("asset:{n}")));
    header.extend(panel.factor_names.iter().map(|n| format!("factor:{n}")));
    w.write_record(&header)?;
    for t in 0..panel.rows() {
        let mut row = vec![panel.dates[t].format("%Y-%m-%d").to_string()];
        row.extend(panel.asset_logret.row(t).iter().map(|v| v.to_string()));
        row.extend(panel.factor_levels.row(t).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Regression {
    pub equation: String,
    /// intercept first, then one slope per factor
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub residual_variance: f64,
}

struct Design {
    z: DMatrix<f64>,
    pinv: DMatrix<f64>,
    /// (Z'Z)⁻¹ diagonal
    xtx_inv_diag: DVector<f64>,
    condition: f64,
}

fn design(panel: &ReturnPanel) -> Result<Design> {
    let (t, n) = (panel.rows(), panel.n());
    let p = n + 1;
    let needed = 10 * p;
    if t < needed {
        return Err(Error::InsufficientData { needed, got: t });
    }
    let z = DMatrix::from_fn(
        t - 1,
        p,
        |k, j| if j == 0 { 1.0 } else { panel.factor_levels[(k, j - 1)] },
    );
    let svd = z.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = (t.max(p) as f64) * f64::EPSILON * smax;
    let rank = svd.rank(tol);
    if rank < p {
        return Err(Error::RankDeficient { rank, required: p });
    }
    let smin = svd.singular_values.min();
    let v_t = svd.v_t.as_ref().expect("requested V");
    let xtx_inv_diag = DVector::from_fn(p, |j, _| {
        (0..p).map(|k| (v_t[(k, j)] / svd.singular_values[k]).powi(2)).sum()
    });
    let pinv = svd.pseudo_inverse(tol).map_err(|e| Error::Config(e.to_string()))?;
    Ok(Design {
        z,
        pinv,
        xtx_inv_diag,
        condition: smax / smin,
    })
}

fn ols(design: &Design, y: &DVector<f64>, equation: String) -> Regression {
    let beta = &design.pinv * y;
    let resid = y - &design.z * &beta;
    let dof = (design.z.nrows() - design.z.ncols()).max(1) as f64;
    let s2 = resid.norm_squared() / dof;
    Regression {
        equation,
        coefficients: beta.iter().copied().collect(),
        std_errors: design.xtx_inv_diag.iter().map(|v| (s2 * v).sqrt()).collect(),
        residual_variance: s2,
    }
}

/// Demeaned covariance of the joint increments, per unit time.
fn joint_covariance_of(rows: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    let k = rows.nrows() as f64;
    let mean = rows.row_mean();
    let mut centered = rows.clone();
    for mut r in centered.row_iter_mut() {
        r -= &mean;
    }
    let mut cov = centered.tr_mul(&centered) / (k * dt);
    crate::linalg::symmetrize(&mut cov);
    cov
}

pub fn joint_covariance(panel: &ReturnPanel) -> Result<DMatrix<f64>> {
    panel.validate()?;
    if panel.rows() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            got: panel.rows(),
        });
    }
    Ok(joint_covariance_of(&panel.joint_increments(), panel.dt))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loadings {
    pub sigma: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub xi: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub factor: DMatrix<f64>,
}

/// Σ, Λ from the rows of the lower-triangular factor of the joint covariance
/// (d = m + n + 1); Ξ = Σ'w.
pub fn estimate_loadings(panel: &ReturnPanel) -> Result<Loadings> {
    let cov = joint_covariance(panel)?;
    let (m, n) = (panel.m(), panel.n());
    let (l, pivots) = semidefinite_cholesky(&cov, PIVOT_TOL);
    let max_diag = cov.diagonal().max();
    for (i, p) in pivots.iter().take(m).enumerate() {
        if *p <= PIVOT_TOL * max_diag {
            return Err(Error::SingularCovariance {
                time: 0.0,
                pivot: pivots[i],
                threshold: PIVOT_TOL * max_diag,
            });
        }
    }
    let sigma = l.rows(0, m).into_owned();
    let lambda = l.rows(m, n).into_owned();
    let xi = sigma.tr_mul(&panel.bench_weights);
    Ok(Loadings {
        sigma,
        lambda,
        xi,
        covariance: cov,
        factor: l,
    })
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq)]
pub struct Drift {
    pub a: DVector<f64>,
    pub A: DMatrix<f64>,
    pub b: DVector<f64>,
    pub B: DMatrix<f64>,
    pub regressions: Vec<Regression>,
    pub condition_number: f64,
}

/// Per-equation OLS on (1, X_{t−1}). Asset equations use log return / dt plus
/// ½(ΣΣ')_ii from the covariance estimate.
pub fn estimate_drift(panel: &ReturnPanel) -> Result<Drift> {
    panel.validate()?;
    let design = design(panel)?;
    let cov = joint_covariance(panel)?;
    let (t, m, n, dt) = (panel.rows(), panel.m(), panel.n(), panel.dt);
    let mut a = DVector::zeros(m);
    let mut big_a = DMatrix::zeros(m, n);
    let mut b = DVector::zeros(n);
    let mut big_b = DMatrix::zeros(n, n);
    let mut regressions = Vec::with_capacity(m + n);
    for i in 0..m {
        let y = DVector::from_fn(t - 1, |k, _| panel.asset_logret[(k + 1, i)] / dt + 0.5 * cov[(i, i)]);
        let reg = ols(
            &design,
            &y,
            format!("asset:{}", panel.asset_names.get(i).cloned().unwrap_or_default()),
        );
        a[i] = reg.coefficients[0];
        for j in 0..n {
            big_a[(i, j)] = reg.coefficients[j + 1];
        }
        regressions.push(reg);
    }
    for i in 0..n {
        let y = DVector::from_fn(t - 1, |k, _| {
            (panel.factor_levels[(k + 1, i)] - panel.factor_levels[(k, i)]) / dt
        });
        let reg = ols(
            &design,
            &y,
            format!("factor:{}", panel.factor_names.get(i).cloned().unwrap_or_default()),
        );
        b[i] = reg.coefficients[0];
        for j in 0..n {
            big_b[(i, j)] = reg.coefficients[j + 1];
        }
        regressions.push(reg);
    }
    Ok(Drift {
        a,
        A: big_a,
        b,
        B: big_b,
        regressions,
        condition_number: design.condition,
    })
}

/// (c, C, Ξ) = (w'a, A'w, Σ'w) for a fixed-weight benchmark.
#[allow(non_snake_case)]
pub fn build_benchmark(
    weights: &DVector<f64>,
    a: &DVector<f64>,
    A: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
) -> Result<(f64, DVector<f64>, DVector<f64>)> {
    if weights.len() != a.len() {
        return Err(Error::dims("benchmark weights", a.len(), weights.len()));
    }
    check_weights(weights)?;
    // same operations as Coefficients::set_benchmark_weights
    Ok((weights.dot(a), A.tr_mul(weights), sigma.tr_mul(weights)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapReport {
    pub resamples: usize,
    pub mean_block_length: f64,
    pub seed: u64,
    /// Standard error of every entry of the joint covariance.
    pub covariance_se: Vec<Vec<f64>>,
}

impl BootstrapReport {
    pub fn se_matrix(&self) -> DMatrix<f64> {
        mat_from_rows(&self.covariance_se)
    }
}

/// Stationary block bootstrap of the joint covariance. Resample r draws from
/// its own stream, so the result does not depend on the thread count.
pub fn bootstrap_covariance(
    panel: &ReturnPanel,
    resamples: usize,
    mean_block_length: f64,
    seed: u64,
) -> Result<BootstrapReport> {
    panel.validate()?;
    if resamples < 2 || !(mean_block_length >= 1.0) {
        return Err(Error::Config(
            "bootstrap needs ≥ 2 resamples and mean block length ≥ 1".into(),
        ));
    }
    let rows = panel.joint_increments();
    let k = rows.nrows();
    let p = 1.0 / mean_block_length;
    let covs: Vec<DMatrix<f64>> = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut idx = rng.random_range(0..k);
            let mut sample = DMatrix::zeros(k, rows.ncols());
            for i in 0..k {
                if i > 0 {
                    idx = if rng.random::<f64>() < p {
                        rng.random_range(0..k)
                    } else {
                        (idx + 1) % k
                    };
                }
                sample.set_row(i, &rows.row(idx));
            }
            joint_covariance_of(&sample, panel.dt)
        })
        .collect();
    let dim = rows.ncols();
    let rf = resamples as f64;
    let mean = covs.iter().fold(DMatrix::zeros(dim, dim), |acc, c| acc + c) / rf;
    let var = covs
        .iter()
        .fold(DMatrix::zeros(dim, dim), |acc, c| acc + (c - &mean).map(|v| v * v))
        / (rf - 1.0);
    Ok(BootstrapReport {
        resamples,
        mean_block_length,
        seed,
        covariance_se: mat_to_rows(&var.map(f64::sqrt)),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimationReport {
    pub model: ModelFile,
    pub regressions: Vec<Regression>,
    pub joint_covariance: Vec<Vec<f64>>,
    pub joint_factor: Vec<Vec<f64>>,
    pub regressor_condition: f64,
    pub asset_covariance_condition: f64,
    pub observations: usize,
    pub bootstrap: Option<BootstrapReport>,
    #[serde(skip)]
    pub spec: ModelSpec,
}

impl EstimationReport {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationOptions {
    pub theta: f64,
    pub horizon: f64,
    /// Defaults to the last observed factor level.
    pub x0: Option<DVector<f64>>,
    pub bootstrap_resamples: usize,
    pub block_length: f64,
    pub seed: u64,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        EstimationOptions {
            theta: 1.0,
            horizon: 5.0,
            x0: None,
            bootstrap_resamples: 500,
            block_length: 21.0,
            seed: 0,
        }
    }
}

/// Full pipeline: drifts, loadings, benchmark, fitted model. A bootstrap with
/// zero resamples is skipped.
pub fn estimate_model(panel: &ReturnPanel, opts: &EstimationOptions) -> Result<EstimationReport> {
    let drift = estimate_drift(panel)?;
    let load = estimate_loadings(panel)?;
    let (m, n) = (panel.m(), panel.n());
    let d = m + n + 1;
    let mut coeffs = Coefficients::zeros(n, m, d);
    coeffs.a = drift.a.clone();
    coeffs.A = drift.A.clone();
    coeffs.b = drift.b.clone();
    coeffs.B = drift.B.clone();
    coeffs.sigma = load.sigma.clone();
    coeffs.lambda = load.lambda.clone();
    let (c, big_c, xi) = build_benchmark(&panel.bench_weights, &drift.a, &drift.A, &load.sigma)?;
    coeffs.c = c;
    coeffs.C = big_c;
    coeffs.xi = xi;
    let x0 = match &opts.x0 {
        Some(x) if x.len() != n => return Err(Error::dims("x0", n, x.len())),
        Some(x) => x.clone(),
        None => panel.factor_levels.row(panel.rows() - 1).transpose(),
    };
    let spec = ModelSpec::constant(opts.theta, opts.horizon, x0, coeffs);
    let model: ValidatedModel = spec.clone().validate()?;
    let ss = &model.segment_blocks(0).ss;
    let eig = ss.clone().symmetric_eigen().eigenvalues;
    let bootstrap = if opts.bootstrap_resamples > 0 {
        Some(bootstrap_covariance(
            panel,
            opts.bootstrap_resamples,
            opts.block_length,
            opts.seed,
        )?)
    } else {
        None
    };
    Ok(EstimationReport {
        model: ModelFile::from_spec(&spec),
        regressions: drift.regressions,
        joint_covariance: mat_to_rows(&load.covariance),
        joint_factor: mat_to_rows(&load.factor),
        regressor_condition: drift.condition_number,
        asset_covariance_condition: eig.max() / eig.min(),
        observations: panel.rows(),
        bootstrap,
        spec,
    })
}

fn mat_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn mat_from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let c = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j])
}

/// The Gram matrix [Σ; Λ; Ξ'][Σ; Λ; Ξ']' of a coefficient set, in the same
/// layout as the joint covariance.
pub fn gram_matrix(c: &Coefficients) -> DMatrix<f64> {
    let (m, n, d) = (c.a.len(), c.b.len(), c.xi.len());
    let mut stacked = DMatrix::zeros(m + n + 1, d);
    stacked.rows_mut(0, m).copy_from(&c.sigma);
    stacked.rows_mut(m, n).copy_from(&c.lambda);
    stacked.row_mut(m + n).copy_from(&c.xi.transpose());
    &stacked * stacked.transpose()
}

/// Daily panel from a constant-coefficient model by Euler stepping, with
/// weekday dates from 2000-01-03. Asset returns are log returns.
pub fn synthetic_panel(
    model: &ValidatedModel,
    rows: usize,
    dt: f64,
    weights: &DVector<f64>,
    seed: u64,
) -> Result<ReturnPanel> {
    if model.segments().len() != 1 {
        return Err(Error::Config(
            "synthetic panels need a constant-coefficient model".into(),
        ));
    }
    let c = model.segment_coeffs(0);
    let gb = model.segment_blocks(0);
    let (m, n, d) = (model.m(), model.n(), model.d());
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut x = model.x0().clone();
    let mut asset = DMatrix::zeros(rows, m);
    let mut factor = DMatrix::zeros(rows, n);
    factor.row_mut(0).copy_from(&x.transpose());
    let sq = dt.sqrt();
    let mut dw = DVector::zeros(d);
    for t in 1..rows {
        for v in dw.iter_mut() {
            *v = sq * rng.sample::<f64, _>(StandardNormal);
        }
        let mu = &c.a + &c.A * &x;
        let r = (mu - gb.ss.diagonal() * 0.5) * dt + &c.sigma * &dw;
        asset.row_mut(t).copy_from(&r.transpose());
        x += (&c.b + &c.B * &x) * dt + &c.lambda * &dw;
        factor.row_mut(t).copy_from(&x.transpose());
    }
    let mut dates = Vec::with_capacity(rows);
    let mut day = NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date");
    while dates.len() < rows {
        if !matches!(day.weekday(), Weekday::Sat | Weekday::Sun) {
            dates.push(day);
        }
        day += Duration::days(1);
    }
    let panel = ReturnPanel {
        dates,
        asset_names: (1..=m).map(|i| format!("a{i}")).collect(),
        factor_names: (1..=n).map(|i| format!("f{i}")).collect(),
        asset_logret: asset,
        factor_levels: factor,
        bench_weights: weights.clone(),
        dt,
    };
    panel.validate()?;
    Ok(panel)
}
