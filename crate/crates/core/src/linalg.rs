//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

/// Cholesky factor of a symmetric positive definite matrix, accepted only when
/// every pivot clears `rel_threshold * max_diagonal`.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

/// Reason a factorization attempt was rejected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PivotFailure {
    pub index: usize,
    pub pivot: f64,
    pub threshold: f64,
}

impl SpdFactor {
    pub fn new(mat: &DMatrix<f64>, rel_threshold: f64) -> Result<Self, PivotFailure> {
        let max_diag = mat.diagonal().iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        let threshold = rel_threshold * max_diag;
        let fail = |index, pivot| PivotFailure {
            index,
            pivot,
            threshold,
        };
        if mat.nrows() == 0 || max_diag == 0.0 || !max_diag.is_finite() {
            return Err(fail(0, max_diag));
        }
        let chol = Cholesky::new(mat.clone()).ok_or_else(|| {
            // nalgebra gives no pivot on failure; locate it with a plain LDL' pass.
            let (index, pivot) = first_bad_pivot(mat, threshold);
            fail(index, pivot)
        })?;
        let l = chol.l_dirty();
        for k in 0..mat.nrows() {
            let pivot = l[(k, k)] * l[(k, k)];
            if !(pivot > threshold) {
                return Err(fail(k, pivot));
            }
        }
        Ok(SpdFactor { chol })
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    pub fn solve_mut(&self, rhs: &mut DVector<f64>) {
        self.chol.solve_mut(rhs)
    }

    pub fn solve_mat(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

fn first_bad_pivot(mat: &DMatrix<f64>, threshold: f64) -> (usize, f64) {
    let n = mat.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = mat[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > threshold) {
            return (j, d);
        }
        let root = d.sqrt();
        l[(j, j)] = root;
        for i in (j + 1)..n {
            let mut s = mat[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / root;
        }
    }
    (n.saturating_sub(1), f64::NAN)
}

/// Lower-triangular factor `L` with `L L' = mat` for a positive *semi*definite
/// matrix. Columns whose pivot falls below `rel_tol * max_diagonal` are zeroed;
/// the returned vector holds every pivot for diagnostics.
pub fn semidefinite_cholesky(mat: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, Vec<f64>) {
    let n = mat.nrows();
    let max_diag = mat.diagonal().iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let tol = rel_tol * max_diag;
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut pivots = Vec::with_capacity(n);
    for j in 0..n {
        let mut d = mat[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        pivots.push(d);
        if d <= tol {
            continue;
        }
        let root = d.sqrt();
        l[(j, j)] = root;
        for i in (j + 1)..n {
            let mut s = mat[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / root;
        }
    }
    (l, pivots)
}

/// Max-abs entry (the `‖·‖∞` used throughout the tolerance checks).
pub fn max_abs(mat: &DMatrix<f64>) -> f64 {
    mat.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn max_abs_vec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
}

pub fn symmetrize(mat: &mut DMatrix<f64>) {
    let n = mat.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (mat[(i, j)] + mat[(j, i)]);
            mat[(i, j)] = avg;
            mat[(j, i)] = avg;
        }
    }
}

pub fn asymmetry(mat: &DMatrix<f64>) -> f64 {
    max_abs(&(mat - mat.transpose()))
}

pub fn min_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    if sym.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(sym.clone())
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |acc, v| acc.min(*v))
}
