//! Backward integration of the Riccati / linear / scalar system for the
//! quadratic value function u(t,x) = −θ(½x'Qx + q'x + k).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, max_abs, min_eigenvalue, symmetrize};
use crate::model::ValidatedModel;

pub const BLOWUP_NORM: f64 = 1e12;
pub const PSD_TOL: f64 = -1e-8;

/// Right-hand side of the system on one coefficient segment, in forward time:
///
/// Q̇ = θQMQ − B̃'Q − QB̃ − S₀
/// q̇ = −B̃'q + θQMq − Qg + C − Aᵀ(ΣΣ')⁻¹ã/(θ+1)
/// k̇ = (θ/2)q'Mq − g'q − ½tr(ΛΛ'Q) + k₀
#[derive(Debug, Clone)]
pub struct RiccatiRhs {
    theta: f64,
    /// ΛΛ' − θ/(θ+1) ΛΠΛ'
    pub m: DMatrix<f64>,
    pub b_tilde: DMatrix<f64>,
    pub s0: DMatrix<f64>,
    pub g: DVector<f64>,
    pub q_source: DVector<f64>,
    pub k_source: f64,
    ll: DMatrix<f64>,
}

impl RiccatiRhs {
    pub fn new(model: &ValidatedModel, segment: usize, theta: f64) -> Self {
        let c = model.segment_coeffs(segment);
        let gb = model.segment_blocks(segment);
        let f = 1.0 / (theta + 1.0);
        let r = theta * f;
        // (ΣΣ')⁻¹ applied to A, ã and ΣΛ'
        let a_tilde = &c.a + &gb.s_xi * theta;
        let ss_a = gb.ss_solve_mat(&c.A);
        let ss_at = gb.ss_solve(&a_tilde);
        let ss_sl = gb.ss_solve_mat(&gb.sl);
        let m = &gb.ll - gb.sl.tr_mul(&ss_sl) * r;
        let b_tilde = &c.B - gb.sl.tr_mul(&ss_a) * r;
        let mut s0 = c.A.tr_mul(&ss_a) * f;
        symmetrize(&mut s0);
        let g = &c.b - gb.sl.tr_mul(&ss_at) * r + &gb.l_xi * theta;
        let q_source = &c.C - c.A.tr_mul(&ss_at) * f;
        let k_source = -a_tilde.dot(&ss_at) * 0.5 * f + c.c + 0.5 * (theta - 1.0) * gb.xi_xi;
        RiccatiRhs {
            theta,
            m,
            b_tilde,
            s0,
            g,
            q_source,
            k_source,
            ll: gb.ll.clone(),
        }
    }

    pub fn q_mat_dot(&self, q: &DMatrix<f64>) -> DMatrix<f64> {
        let bq = self.b_tilde.tr_mul(q);
        q * &self.m * q * self.theta - &bq - bq.transpose() - &self.s0
    }

    pub fn q_vec_dot(&self, q_mat: &DMatrix<f64>, q: &DVector<f64>) -> DVector<f64> {
        let mq = &self.m * q;
        -self.b_tilde.tr_mul(q) + q_mat * (mq * self.theta - &self.g) + &self.q_source
    }

    pub fn k_dot(&self, q_mat: &DMatrix<f64>, q: &DVector<f64>) -> f64 {
        let trace = self.ll.component_mul(q_mat).sum();
        0.5 * self.theta * q.dot(&(&self.m * q)) - self.g.dot(q) - 0.5 * trace + self.k_source
    }

    fn eval(&self, s: &State) -> State {
        State {
            q_mat: self.q_mat_dot(&s.q_mat),
            q: self.q_vec_dot(&s.q_mat, &s.q),
            k: self.k_dot(&s.q_mat, &s.q),
        }
    }
}

#[derive(Debug, Clone)]
struct State {
    q_mat: DMatrix<f64>,
    q: DVector<f64>,
    k: f64,
}

impl State {
    fn axpy(&self, h: f64, d: &State) -> State {
        State {
            q_mat: &self.q_mat + &d.q_mat * h,
            q: &self.q + &d.q * h,
            k: self.k + h * d.k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverMeta {
    pub steps_per_year: usize,
    /// (segment start, segment end, step count) per coefficient segment.
    pub segment_steps: Vec<(f64, f64, usize)>,
    pub max_asymmetry: f64,
    pub min_eigenvalue: f64,
}

/// Q, q, k on the forward-ordered grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueCoefficients {
    pub theta: f64,
    pub n: usize,
    pub grid: Vec<f64>,
    pub q_mat: Vec<DMatrix<f64>>,
    pub q_vec: Vec<DVector<f64>>,
    pub k: Vec<f64>,
    pub meta: SolverMeta,
}

/// Value and gradients at one (t, x). `U` is the quadratic form itself, so it
/// is defined also at θ = 0; for θ > 0, u = −θU.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq)]
pub struct ValueEval {
    pub u: f64,
    pub U: f64,
    pub Du: DVector<f64>,
    pub DU: DVector<f64>,
}

/// Integrate backward from the zero terminal condition with fixed-step RK4.
/// Each coefficient segment gets its own uniform grid with
/// `ceil(length * steps_per_year)` steps.
pub fn solve_value_coefficients(model: &ValidatedModel, steps_per_year: usize) -> Result<ValueCoefficients> {
    if steps_per_year == 0 {
        return Err(Error::Config("steps_per_year must be positive".into()));
    }
    let theta = model.theta();
    let n = model.n();
    let nseg = model.segments().len();

    let mut segment_steps = Vec::with_capacity(nseg);
    let mut grid = vec![0.0];
    for k in 0..nseg {
        let (s, e) = (model.segments()[k].start, model.segment_end(k));
        let steps = (((e - s) * steps_per_year as f64) - 1e-9).ceil().max(1.0) as usize;
        segment_steps.push((s, e, steps));
        for i in 1..=steps {
            grid.push(if i == steps {
                e
            } else {
                s + (e - s) * i as f64 / steps as f64
            });
        }
    }
    let nodes = grid.len();
    let mut q_mat = vec![DMatrix::zeros(n, n); nodes];
    let mut q_vec = vec![DVector::zeros(n); nodes];
    let mut k_val = vec![0.0; nodes];

    let mut state = State {
        q_mat: DMatrix::zeros(n, n),
        q: DVector::zeros(n),
        k: 0.0,
    };
    let mut node = nodes - 1;
    let mut max_asym = 0.0_f64;
    let mut min_eig = f64::INFINITY;
    for seg in (0..nseg).rev() {
        let rhs = RiccatiRhs::new(model, seg, theta);
        let (_, _, steps) = segment_steps[seg];
        for _ in 0..steps {
            let h = grid[node] - grid[node - 1];
            let k1 = rhs.eval(&state);
            let k2 = rhs.eval(&state.axpy(-0.5 * h, &k1));
            let k3 = rhs.eval(&state.axpy(-0.5 * h, &k2));
            let k4 = rhs.eval(&state.axpy(-h, &k3));
            let mut next = state.axpy(-h / 6.0, &k1);
            next = next.axpy(-h / 3.0, &k2);
            next = next.axpy(-h / 3.0, &k3);
            next = next.axpy(-h / 6.0, &k4);
            max_asym = max_asym.max(asymmetry(&next.q_mat));
            symmetrize(&mut next.q_mat);
            node -= 1;
            let t = grid[node];
            let norm = max_abs(&next.q_mat).max(next.q.amax()).max(next.k.abs());
            if !(norm <= BLOWUP_NORM) {
                return Err(Error::BlowUp { time: t, norm });
            }
            let eig = min_eigenvalue(&next.q_mat);
            if eig < PSD_TOL {
                return Err(Error::EigenvalueViolation { time: t, min_eig: eig });
            }
            min_eig = min_eig.min(eig);
            q_mat[node] = next.q_mat.clone();
            q_vec[node] = next.q.clone();
            k_val[node] = next.k;
            state = next;
        }
    }
    if min_eig == f64::INFINITY {
        min_eig = 0.0;
    }
    Ok(ValueCoefficients {
        theta,
        n,
        grid,
        q_mat,
        q_vec,
        k: k_val,
        meta: SolverMeta {
            steps_per_year,
            segment_steps,
            max_asymmetry: max_asym,
            min_eigenvalue: min_eig,
        },
    })
}

impl ValueCoefficients {
    pub fn horizon(&self) -> f64 {
        *self.grid.last().expect("grid is never empty")
    }

    /// Left node index and linear weight on the right node.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let horizon = self.horizon();
        let slack = 1e-12 * horizon.max(1.0);
        if !(t >= -slack && t <= horizon + slack) {
            return Err(Error::TimeOutOfRange { t, horizon });
        }
        let last = self.grid.len() - 1;
        if last == 0 {
            return Ok((0, 0.0));
        }
        let i = self.grid.partition_point(|&g| g <= t).saturating_sub(1).min(last - 1);
        let (t0, t1) = (self.grid[i], self.grid[i + 1]);
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        Ok((i, w))
    }

    /// Linearly interpolated (Q_t, q_t, k_t).
    pub fn coefficients_at(&self, t: f64) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
        let (i, w) = self.locate(t)?;
        if w == 0.0 {
            return Ok((self.q_mat[i].clone(), self.q_vec[i].clone(), self.k[i]));
        }
        let j = i + 1;
        Ok((
            &self.q_mat[i] * (1.0 - w) + &self.q_mat[j] * w,
            &self.q_vec[i] * (1.0 - w) + &self.q_vec[j] * w,
            self.k[i] * (1.0 - w) + self.k[j] * w,
        ))
    }

    /// DU = Q_t x + q_t.
    pub fn grad_u_big(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let (q_mat, q, _) = self.coefficients_at(t)?;
        Ok(q_mat * x + q)
    }

    pub fn dump_json(&self) -> String {
        serde_json::to_string_pretty(&ValueFile::from(self)).expect("coefficients serialize")
    }

    pub fn load_json(text: &str) -> Result<Self> {
        let file: ValueFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.dump_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::load_json(&text)
    }
}

pub fn value_function(vc: &ValueCoefficients, t: f64, x: &DVector<f64>) -> Result<ValueEval> {
    if x.len() != vc.n {
        return Err(Error::dims("x", vc.n, x.len()));
    }
    let (q_mat, q, k) = vc.coefficients_at(t)?;
    let grad = &q_mat * x + &q;
    #[allow(non_snake_case)]
    let U = 0.5 * x.dot(&(&q_mat * x)) + q.dot(x) + k;
    Ok(ValueEval {
        u: -vc.theta * U,
        U,
        Du: &grad * (-vc.theta),
        DU: grad,
    })
}

/// ∂u/∂t at the grid node nearest t, from a polynomial fit through the
/// neighbouring stored nodes of the same segment. Independent of the
/// right-hand side used to produce the nodes.
pub fn du_dt_fd(vc: &ValueCoefficients, model: &ValidatedModel, t: f64, x: &DVector<f64>) -> Result<f64> {
    let (i, w) = vc.locate(t)?;
    let node = if w > 0.5 { i + 1 } else { i };
    let (window, wts) = derivative_stencil(vc, model, node)?;
    let val = |j: usize| -vc.theta * (0.5 * x.dot(&(&vc.q_mat[j] * x)) + vc.q_vec[j].dot(x) + vc.k[j]);
    Ok(window.iter().zip(&wts).map(|(&j, &c)| c * val(j)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub time: f64,
    pub q_mat: f64,
    pub q_vec: f64,
    pub k: f64,
}

impl ResidualReport {
    pub fn max(&self) -> f64 {
        self.q_mat.max(self.q_vec).max(self.k)
    }
}

/// Weights of the first derivative at `x0` of the interpolating polynomial
/// through `nodes`.
fn derivative_weights(nodes: &[f64], x0: f64) -> Vec<f64> {
    let n = nodes.len();
    (0..n)
        .map(|j| {
            (0..n)
                .filter(|&k| k != j)
                .map(|k| {
                    let prod: f64 = (0..n)
                        .filter(|&l| l != j && l != k)
                        .map(|l| (x0 - nodes[l]) / (nodes[j] - nodes[l]))
                        .product();
                    prod / (nodes[j] - nodes[k])
                })
                .sum()
        })
        .collect()
}

/// Up to five consecutive nodes around `node` inside its (closed) segment and
/// the weights giving the time derivative at `node`.
fn derivative_stencil(vc: &ValueCoefficients, model: &ValidatedModel, node: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let g = &vc.grid;
    let last = g.len() - 1;
    let seg = model.segment_index(g[node])?;
    let (lo_t, hi_t) = (model.segments()[seg].start, model.segment_end(seg));
    let slack = 1e-12 * model.horizon().max(1.0);
    let lo = (0..=node)
        .rev()
        .take_while(|&j| g[j] >= lo_t - slack)
        .last()
        .unwrap_or(node);
    let hi = (node..=last)
        .take_while(|&j| g[j] <= hi_t + slack)
        .last()
        .unwrap_or(node);
    let width = (hi - lo + 1).min(5);
    if width < 2 {
        return Err(Error::Config("segment too short for a time derivative".into()));
    }
    let first = node.saturating_sub(width / 2).max(lo).min(hi + 1 - width);
    let window: Vec<usize> = (first..first + width).collect();
    let times: Vec<f64> = window.iter().map(|&j| g[j]).collect();
    let wts = derivative_weights(&times, g[node]);
    Ok((window, wts))
}

/// Max-norm of each equation's residual at the interior node nearest `t`, with
/// the time derivative taken from a five-node polynomial fit of neighbouring
/// nodes inside the node's segment (fewer nodes if the segment is short).
pub fn riccati_residual(vc: &ValueCoefficients, model: &ValidatedModel, t: f64) -> Result<ResidualReport> {
    let last = vc.grid.len() - 1;
    if last < 2 {
        return Err(Error::Config("grid too coarse for a centered residual".into()));
    }
    let (i, w) = vc.locate(t)?;
    let node = (if w > 0.5 { i + 1 } else { i }).clamp(1, last - 1);
    let time = vc.grid[node];
    let seg = model.segment_index(time)?;
    let rhs = RiccatiRhs::new(model, seg, vc.theta);
    let (window, wts) = derivative_stencil(vc, model, node)?;
    let n = vc.n;
    let mut qd = DMatrix::zeros(n, n);
    let mut vd = DVector::zeros(n);
    let mut kd = 0.0;
    for (&j, &c) in window.iter().zip(&wts) {
        qd += &vc.q_mat[j] * c;
        vd += &vc.q_vec[j] * c;
        kd += vc.k[j] * c;
    }
    let (qm, qv) = (&vc.q_mat[node], &vc.q_vec[node]);
    Ok(ResidualReport {
        time,
        q_mat: max_abs(&(qd - rhs.q_mat_dot(qm))),
        q_vec: (vd - rhs.q_vec_dot(qm, qv)).amax(),
        k: (kd - rhs.k_dot(qm, qv)).abs(),
    })
}

/// Largest residual over all interior nodes, skipping the nodes on either
/// side of a segment knot where the coefficients jump.
pub fn max_riccati_residual(vc: &ValueCoefficients, model: &ValidatedModel) -> Result<ResidualReport> {
    let mut worst = ResidualReport {
        time: 0.0,
        q_mat: 0.0,
        q_vec: 0.0,
        k: 0.0,
    };
    for node in 1..vc.grid.len().saturating_sub(1) {
        if model.segment_index(vc.grid[node - 1])? != model.segment_index(vc.grid[node + 1])? {
            continue;
        }
        let r = riccati_residual(vc, model, vc.grid[node])?;
        if r.max() > worst.max() {
            worst = r;
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ValueFile {
    theta: f64,
    n: usize,
    grid: Vec<f64>,
    /// Q per node, flattened row-major
    #[serde(rename = "Q")]
    q_mat: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<f64>,
    solver_meta: SolverMeta,
}

impl From<&ValueCoefficients> for ValueFile {
    fn from(vc: &ValueCoefficients) -> Self {
        ValueFile {
            theta: vc.theta,
            n: vc.n,
            grid: vc.grid.clone(),
            q_mat: vc
                .q_mat
                .iter()
                .map(|m| m.transpose().iter().copied().collect())
                .collect(),
            q: vc.q_vec.iter().map(|v| v.iter().copied().collect()).collect(),
            k: vc.k.clone(),
            solver_meta: vc.meta.clone(),
        }
    }
}

impl TryFrom<ValueFile> for ValueCoefficients {
    type Error = Error;

    fn try_from(f: ValueFile) -> Result<Self> {
        let nodes = f.grid.len();
        if nodes == 0 || f.q_mat.len() != nodes || f.q.len() != nodes || f.k.len() != nodes {
            return Err(Error::Schema(
                "coefficient arrays must all match the grid length".into(),
            ));
        }
        let n = f.n;
        if f.q_mat.iter().any(|r| r.len() != n * n) || f.q.iter().any(|r| r.len() != n) {
            return Err(Error::Schema(format!(
                "per-node Q needs {} and q needs {} entries",
                n * n,
                n
            )));
        }
        if f.grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Schema("grid must be strictly increasing".into()));
        }
        Ok(ValueCoefficients {
            theta: f.theta,
            n,
            q_mat: f.q_mat.iter().map(|r| DMatrix::from_row_slice(n, n, r)).collect(),
            q_vec: f.q.iter().map(|r| DVector::from_column_slice(r)).collect(),
            grid: f.grid,
            k: f.k,
            meta: f.solver_meta,
        })
    }
}
