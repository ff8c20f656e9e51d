//! Affine factor-market model: specification, validation, cached Gram blocks
//! and the projection pair used by the game formulas.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, SpdFactor};

/// Relative pivot threshold for the positive-definiteness test on ΣΣ'.
pub const PD_PIVOT_TOL: f64 = 1e-12;

/// Coefficients on one segment. Shapes: a (m), A (m×n), Σ (m×d), b (n),
/// B (n×n), Λ (n×d), c scalar, C (n, the row stored as a vector), Ξ (d).
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub a: DVector<f64>,
    pub A: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub b: DVector<f64>,
    pub B: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub c: f64,
    pub C: DVector<f64>,
    pub xi: DVector<f64>,
}

impl Coefficients {
    pub fn zeros(n: usize, m: usize, d: usize) -> Self {
        Coefficients {
            a: DVector::zeros(m),
            A: DMatrix::zeros(m, n),
            sigma: DMatrix::zeros(m, d),
            b: DVector::zeros(n),
            B: DMatrix::zeros(n, n),
            lambda: DMatrix::zeros(n, d),
            c: 0.0,
            C: DVector::zeros(n),
            xi: DVector::zeros(d),
        }
    }

    /// Overwrite the benchmark block with the fixed-weight portfolio `w`:
    /// c = w'a, C = A'w, Ξ = Σ'w.
    pub fn set_benchmark_weights(&mut self, w: &DVector<f64>) {
        self.c = w.dot(&self.a);
        self.C = self.A.tr_mul(w);
        self.xi = self.sigma.tr_mul(w);
    }

    fn check_dims(&self, n: usize, m: usize, d: usize, at: f64) -> Result<()> {
        let shape = |what: &str, r: usize, c: usize, er: usize, ec: usize| -> Result<()> {
            if r != er || c != ec {
                Err(Error::dims(
                    format!("{what} at t={at}"),
                    format!("{er}x{ec}"),
                    format!("{r}x{c}"),
                ))
            } else {
                Ok(())
            }
        };
        shape("a", self.a.len(), 1, m, 1)?;
        shape("A", self.A.nrows(), self.A.ncols(), m, n)?;
        shape("Sigma", self.sigma.nrows(), self.sigma.ncols(), m, d)?;
        shape("b", self.b.len(), 1, n, 1)?;
        shape("B", self.B.nrows(), self.B.ncols(), n, n)?;
        shape("Lambda", self.lambda.nrows(), self.lambda.ncols(), n, d)?;
        shape("C", self.C.len(), 1, n, 1)?;
        shape("Xi", self.xi.len(), 1, d, 1)?;
        Ok(())
    }

    fn all_finite(&self) -> bool {
        self.a.iter().all(|v| v.is_finite())
            && self.A.iter().all(|v| v.is_finite())
            && self.sigma.iter().all(|v| v.is_finite())
            && self.b.iter().all(|v| v.is_finite())
            && self.B.iter().all(|v| v.is_finite())
            && self.lambda.iter().all(|v| v.is_finite())
            && self.c.is_finite()
            && self.C.iter().all(|v| v.is_finite())
            && self.xi.iter().all(|v| v.is_finite())
    }
}

/// Coefficients in force from `start` up to the next segment (or the horizon).
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub coeffs: Coefficients,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub theta: f64,
    pub horizon: f64,
    pub x0: DVector<f64>,
    /// Ascending segment starts, the first at 0. A constant model has one.
    pub segments: Vec<Segment>,
}

impl ModelSpec {
    pub fn constant(theta: f64, horizon: f64, x0: DVector<f64>, coeffs: Coefficients) -> Self {
        ModelSpec {
            n: coeffs.b.len(),
            m: coeffs.a.len(),
            d: coeffs.xi.len(),
            theta,
            horizon,
            x0,
            segments: vec![Segment { start: 0.0, coeffs }],
        }
    }

    pub fn validate(self) -> Result<ValidatedModel> {
        validate_model(self)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.into_spec()
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&ModelFile::from_spec(self)).expect("model serializes")
    }
}

/// Check every invariant and pre-compute the per-segment Gram blocks.
pub fn validate_model(spec: ModelSpec) -> Result<ValidatedModel> {
    if !(spec.horizon > 0.0) || !spec.horizon.is_finite() {
        return Err(Error::NonpositiveHorizon(spec.horizon));
    }
    if !(spec.theta >= 0.0) || !spec.theta.is_finite() {
        return Err(Error::NegativeTheta(spec.theta));
    }
    let (n, m, d) = (spec.n, spec.m, spec.d);
    if m == 0 {
        return Err(Error::dims("asset count m", ">= 1", m));
    }
    if d < m {
        return Err(Error::dims("Brownian dimension d", format!(">= m = {m}"), d));
    }
    if spec.x0.len() != n {
        return Err(Error::dims("x0", n, spec.x0.len()));
    }
    if !spec.x0.iter().all(|v| v.is_finite()) {
        return Err(Error::Config("x0 has non-finite entries".into()));
    }
    if spec.segments.is_empty() {
        return Err(Error::Config("model has no coefficient segments".into()));
    }
    if spec.segments[0].start != 0.0 {
        return Err(Error::Config(format!(
            "first coefficient segment must start at 0, got {}",
            spec.segments[0].start
        )));
    }
    for w in spec.segments.windows(2) {
        if !(w[1].start > w[0].start) {
            return Err(Error::Config(format!(
                "segment starts must be strictly increasing ({} then {})",
                w[0].start, w[1].start
            )));
        }
    }
    if let Some(last) = spec.segments.last() {
        if !(last.start < spec.horizon) {
            return Err(Error::Config(format!(
                "segment start {} is not before the horizon {}",
                last.start, spec.horizon
            )));
        }
    }
    let mut blocks = Vec::with_capacity(spec.segments.len());
    for seg in &spec.segments {
        seg.coeffs.check_dims(n, m, d, seg.start)?;
        if !seg.coeffs.all_finite() {
            return Err(Error::Config(format!("non-finite coefficient at t={}", seg.start)));
        }
        blocks.push(GramBlocks::new(&seg.coeffs, seg.start)?);
    }
    Ok(ValidatedModel { spec, blocks })
}

/// The contractions of (Σ, Λ, Ξ) used by every formula, for one segment.
#[derive(Debug, Clone)]
pub struct GramBlocks {
    /// ΣΣ' (m×m)
    pub ss: DMatrix<f64>,
    pub ss_inv: DMatrix<f64>,
    /// ΣΛ' (m×n)
    pub sl: DMatrix<f64>,
    /// ΛΛ' (n×n)
    pub ll: DMatrix<f64>,
    /// ΣΞ (m)
    pub s_xi: DVector<f64>,
    /// ΛΞ (n)
    pub l_xi: DVector<f64>,
    /// Ξ'Ξ
    pub xi_xi: f64,
    /// Π = Σ'(ΣΣ')⁻¹Σ (d×d)
    pub pi: DMatrix<f64>,
    factor: SpdFactor,
}

impl GramBlocks {
    pub fn new(c: &Coefficients, time: f64) -> Result<Self> {
        let ss = &c.sigma * c.sigma.transpose();
        let factor = SpdFactor::new(&ss, PD_PIVOT_TOL).map_err(|f| Error::SingularCovariance {
            time,
            pivot: f.pivot,
            threshold: f.threshold,
        })?;
        let ss_inv = factor.inverse();
        let mut pi = c.sigma.transpose() * factor.solve_mat(&c.sigma);
        symmetrize(&mut pi);
        Ok(GramBlocks {
            sl: &c.sigma * c.lambda.transpose(),
            ll: &c.lambda * c.lambda.transpose(),
            s_xi: &c.sigma * &c.xi,
            l_xi: &c.lambda * &c.xi,
            xi_xi: c.xi.dot(&c.xi),
            ss,
            ss_inv,
            pi,
            factor,
        })
    }

    /// (ΣΣ')⁻¹ v by a Cholesky solve.
    pub fn ss_solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(v)
    }

    pub fn ss_solve_mut(&self, v: &mut DVector<f64>) {
        self.factor.solve_mut(v)
    }

    pub fn ss_solve_mat(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve_mat(rhs)
    }
}

/// 𝒫⁺ = I + θΠ and 𝒫⁻ = I − θ/(θ+1) Π.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    pub plus: DMatrix<f64>,
    pub minus: DMatrix<f64>,
}

impl ProjectionPair {
    pub fn from_pi(pi: &DMatrix<f64>, theta: f64) -> Self {
        let d = pi.nrows();
        let eye = DMatrix::<f64>::identity(d, d);
        ProjectionPair {
            plus: &eye + pi * theta,
            minus: &eye - pi * (theta / (theta + 1.0)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ValidatedModel {
    spec: ModelSpec,
    blocks: Vec<GramBlocks>,
}

impl ValidatedModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn n(&self) -> usize {
        self.spec.n
    }

    pub fn m(&self) -> usize {
        self.spec.m
    }

    pub fn d(&self) -> usize {
        self.spec.d
    }

    pub fn theta(&self) -> f64 {
        self.spec.theta
    }

    pub fn horizon(&self) -> f64 {
        self.spec.horizon
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.spec.x0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.spec.segments
    }

    /// Same coefficients under another risk sensitivity.
    pub fn with_theta(&self, theta: f64) -> Result<ValidatedModel> {
        if !(theta >= 0.0) || !theta.is_finite() {
            return Err(Error::NegativeTheta(theta));
        }
        let mut out = self.clone();
        out.spec.theta = theta;
        Ok(out)
    }

    /// End of segment `k`.
    pub fn segment_end(&self, k: usize) -> f64 {
        self.spec
            .segments
            .get(k + 1)
            .map(|s| s.start)
            .unwrap_or(self.spec.horizon)
    }

    pub fn segment_index(&self, s: f64) -> Result<usize> {
        let horizon = self.spec.horizon;
        let slack = 1e-12 * horizon.max(1.0);
        if !(s >= -slack && s <= horizon + slack) {
            return Err(Error::TimeOutOfRange { t: s, horizon });
        }
        let segs = &self.spec.segments;
        Ok(segs.partition_point(|seg| seg.start <= s).saturating_sub(1))
    }

    pub fn coeffs(&self, s: f64) -> Result<&Coefficients> {
        Ok(&self.spec.segments[self.segment_index(s)?].coeffs)
    }

    pub fn segment_coeffs(&self, k: usize) -> &Coefficients {
        &self.spec.segments[k].coeffs
    }

    pub fn gram_blocks(&self, s: f64) -> Result<&GramBlocks> {
        Ok(&self.blocks[self.segment_index(s)?])
    }

    pub fn segment_blocks(&self, k: usize) -> &GramBlocks {
        &self.blocks[k]
    }

    pub fn projection_matrices(&self, s: f64, theta: f64) -> Result<ProjectionPair> {
        if !(theta >= 0.0) {
            return Err(Error::NegativeTheta(theta));
        }
        Ok(ProjectionPair::from_pi(&self.gram_blocks(s)?.pi, theta))
    }
}

pub fn gram_blocks(model: &ValidatedModel, s: f64) -> Result<&GramBlocks> {
    model.gram_blocks(s)
}

pub fn projection_matrices(model: &ValidatedModel, s: f64, theta: f64) -> Result<ProjectionPair> {
    model.projection_matrices(s, theta)
}

/// Random well-conditioned model for property tests and benchmarks: stable
/// factor dynamics, modest drifts and loadings, ΣΣ' comfortably PD.
pub fn random_model<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    m: usize,
    d: usize,
    theta: f64,
    horizon: f64,
) -> ValidatedModel {
    let mut normal = |scale: f64| -> f64 { scale * rng.sample::<f64, _>(StandardNormal) };
    let mut c = Coefficients::zeros(n, m, d);
    c.a = DVector::from_fn(m, |_, _| 0.05 + normal(0.03));
    c.A = DMatrix::from_fn(m, n, |_, _| normal(0.2));
    c.sigma = DMatrix::from_fn(m, d, |_, _| normal(0.08));
    for i in 0..m {
        c.sigma[(i, i)] += 0.15;
    }
    c.b = DVector::from_fn(n, |_, _| normal(0.05));
    c.B = DMatrix::from_fn(n, n, |_, _| normal(0.1));
    for i in 0..n {
        c.B[(i, i)] -= 0.8;
    }
    c.lambda = DMatrix::from_fn(n, d, |_, _| normal(0.1));
    c.c = 0.03 + normal(0.01);
    c.C = DVector::from_fn(n, |_, _| normal(0.1));
    c.xi = DVector::from_fn(d, |_, _| normal(0.08));
    let x0 = DVector::from_fn(n, |_, _| normal(0.1));
    ModelSpec::constant(theta, horizon, x0, c)
        .validate()
        .expect("random model is well posed")
}

// ---------------------------------------------------------------------------
// File format

#[allow(non_snake_case)]
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoeffFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub A: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub Sigma: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub B: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub Lambda: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub C: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub Xi: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PieceFile {
    pub start: f64,
    #[serde(flatten)]
    pub coeffs: CoeffFile,
}

/// On-disk model description. Omitted coefficients default to zero; `d`
/// defaults to n + m + 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub n: usize,
    pub m: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    pub theta: f64,
    pub horizon_years: f64,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant: Option<CoeffFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub piecewise: Option<Vec<PieceFile>>,
    /// Fixed benchmark weights; when present c, C and Ξ are derived from them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark_weights: Option<Vec<f64>>,
}

fn vec_or_zero(v: &Option<Vec<f64>>, len: usize, what: &str) -> Result<DVector<f64>> {
    match v {
        None => Ok(DVector::zeros(len)),
        Some(v) if v.len() == len => Ok(DVector::from_column_slice(v)),
        Some(v) => Err(Error::dims(what, len, v.len())),
    }
}

fn mat_or_zero(v: &Option<Vec<Vec<f64>>>, rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>> {
    match v {
        None => Ok(DMatrix::zeros(rows, cols)),
        Some(v) => {
            let got_cols = v.first().map(|r| r.len()).unwrap_or(0);
            if v.len() != rows || v.iter().any(|r| r.len() != cols) {
                return Err(Error::dims(
                    what,
                    format!("{rows}x{cols}"),
                    format!("{}x{}", v.len(), got_cols),
                ));
            }
            Ok(DMatrix::from_fn(rows, cols, |i, j| v[i][j]))
        }
    }
}

fn mat_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl CoeffFile {
    fn build(&self, n: usize, m: usize, d: usize, weights: Option<&DVector<f64>>) -> Result<Coefficients> {
        let mut c = Coefficients {
            a: vec_or_zero(&self.a, m, "a")?,
            A: mat_or_zero(&self.A, m, n, "A")?,
            sigma: mat_or_zero(&self.Sigma, m, d, "Sigma")?,
            b: vec_or_zero(&self.b, n, "b")?,
            B: mat_or_zero(&self.B, n, n, "B")?,
            lambda: mat_or_zero(&self.Lambda, n, d, "Lambda")?,
            c: self.c.unwrap_or(0.0),
            C: vec_or_zero(&self.C, n, "C")?,
            xi: vec_or_zero(&self.Xi, d, "Xi")?,
        };
        if let Some(w) = weights {
            if self.c.is_some() || self.C.is_some() || self.Xi.is_some() {
                return Err(Error::Config(
                    "benchmark_weights conflicts with explicit c, C or Xi".into(),
                ));
            }
            c.set_benchmark_weights(w);
        }
        Ok(c)
    }

    fn from_coeffs(c: &Coefficients) -> Self {
        CoeffFile {
            a: Some(c.a.iter().copied().collect()),
            A: Some(mat_rows(&c.A)),
            Sigma: Some(mat_rows(&c.sigma)),
            b: Some(c.b.iter().copied().collect()),
            B: Some(mat_rows(&c.B)),
            Lambda: Some(mat_rows(&c.lambda)),
            c: Some(c.c),
            C: Some(c.C.iter().copied().collect()),
            Xi: Some(c.xi.iter().copied().collect()),
        }
    }
}

impl ModelFile {
    pub fn into_spec(self) -> Result<ModelSpec> {
        let (n, m) = (self.n, self.m);
        let d = self.d.unwrap_or(n + m + 1);
        let weights = match &self.benchmark_weights {
            None => None,
            Some(w) => {
                if w.len() != m {
                    return Err(Error::dims("benchmark_weights", m, w.len()));
                }
                let sum: f64 = w.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::WeightSum(sum));
                }
                Some(DVector::from_column_slice(w))
            }
        };
        let segments = match (&self.constant, &self.piecewise) {
            (Some(c), None) => vec![Segment {
                start: 0.0,
                coeffs: c.build(n, m, d, weights.as_ref())?,
            }],
            (None, Some(pieces)) => pieces
                .iter()
                .map(|p| {
                    Ok(Segment {
                        start: p.start,
                        coeffs: p.coeffs.build(n, m, d, weights.as_ref())?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            _ => {
                return Err(Error::Config(
                    "model file needs exactly one of \"constant\" or \"piecewise\"".into(),
                ))
            }
        };
        Ok(ModelSpec {
            n,
            m,
            d,
            theta: self.theta,
            horizon: self.horizon_years,
            x0: vec_or_zero(&self.x0, n, "x0")?,
            segments,
        })
    }

    pub fn from_spec(spec: &ModelSpec) -> Self {
        let (constant, piecewise) = if spec.segments.len() == 1 {
            (Some(CoeffFile::from_coeffs(&spec.segments[0].coeffs)), None)
        } else {
            let pieces = spec
                .segments
                .iter()
                .map(|s| PieceFile {
                    start: s.start,
                    coeffs: CoeffFile::from_coeffs(&s.coeffs),
                })
                .collect();
            (None, Some(pieces))
        };
        ModelFile {
            n: spec.n,
            m: spec.m,
            d: Some(spec.d),
            theta: spec.theta,
            horizon_years: spec.horizon,
            x0: Some(spec.x0.iter().copied().collect()),
            constant,
            piecewise,
            benchmark_weights: None,
        }
    }
}
