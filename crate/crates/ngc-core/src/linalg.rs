//! Dense linear-algebra kernel: SVD, truncation, pseudo-inverse, spectral
//! norm, least squares.
//!
//! The SVD is a one-sided Jacobi with a fixed cyclic sweep order, which is
//! deterministic and accurate at desk scale (≤ 512×512). Everything else is
//! derived from it.

use crate::error::{NgcError, Result};
use crate::matrix::{dot, norm2, Matrix};

/// Relative cutoff under which singular values are treated as zero when
/// inverting (`pinv`, minimum-norm least squares).
pub const PINV_CUTOFF: f64 = 1e-10;

/// Default Tikhonov ridge for projection fitting; activation traces are
/// often rank-deficient.
pub const DEFAULT_RIDGE: f64 = 1e-8;

/// Thin SVD `m = u · diag(s) · vt` with `k = min(rows, cols)`.
///
/// `u` is rows×k with orthonormal columns, `s` is non-increasing and
/// non-negative, `vt` is k×cols with orthonormal rows.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
}

impl SvdResult {
    /// `u · diag(s) · vt`, the reconstruction of the decomposed matrix.
    pub fn reconstruct(&self) -> Matrix {
        let k = self.s.len();
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for j in 0..k {
                us[(i, j)] *= self.s[j];
            }
        }
        us.matmul(&self.vt)
    }

    /// Number of singular values above `rel_tol * s[0]`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let cutoff = rel_tol * self.s.first().copied().unwrap_or(0.0);
        self.s.iter().filter(|&&v| v > cutoff).count()
    }
}

pub fn svd(m: &Matrix) -> Result<SvdResult> {
    m.check_finite("svd input")?;
    if m.rows() >= m.cols() {
        Ok(jacobi_svd_tall(m))
    } else {
        let t = jacobi_svd_tall(&m.transpose());
        Ok(SvdResult {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        })
    }
}

/// One-sided Jacobi on a tall (rows ≥ cols) matrix: columns of a working
/// copy are orthogonalized by plane rotations accumulated into V; column
/// norms become the singular values.
fn jacobi_svd_tall(a: &Matrix) -> SvdResult {
    let (m, n) = a.shape();
    debug_assert!(m >= n);
    let mut u = a.clone();
    let mut v = Matrix::eye(n);
    let tol = 1e-15;
    let max_sweeps = 60;

    for _ in 0..max_sweeps {
        let mut changed = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..m {
                    let up = u[(i, p)];
                    let uq = u[(i, q)];
                    app += up * up;
                    aqq += uq * uq;
                    apq += up * uq;
                }
                if apq.abs() <= tol * (app * aqq).sqrt() {
                    continue;
                }
                changed = true;
                // Jacobi rotation diagonalizing [[app, apq], [apq, aqq]].
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let up = u[(i, p)];
                    let uq = u[(i, q)];
                    u[(i, p)] = c * up - s * uq;
                    u[(i, q)] = s * up + c * uq;
                }
                for i in 0..n {
                    let vp = v[(i, p)];
                    let vq = v[(i, q)];
                    v[(i, p)] = c * vp - s * vq;
                    v[(i, q)] = s * vp + c * vq;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let mut sigma: Vec<f64> = (0..n).map(|j| norm2(&u.col(j))).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap().then(i.cmp(&j)));

    let mut u_sorted = Matrix::zeros(m, n);
    let mut vt_sorted = Matrix::zeros(n, n);
    let mut s_sorted = Vec::with_capacity(n);
    for (new_j, &old_j) in order.iter().enumerate() {
        s_sorted.push(sigma[old_j]);
        for i in 0..m {
            u_sorted[(i, new_j)] = u[(i, old_j)];
        }
        for i in 0..n {
            vt_sorted[(new_j, i)] = v[(i, old_j)];
        }
    }
    sigma = s_sorted;

    // Normalize columns; zero columns get a deterministic orthonormal fill
    // so uᵀu = I also holds for rank-deficient inputs.
    for j in 0..n {
        if sigma[j] > 0.0 {
            for i in 0..m {
                u_sorted[(i, j)] /= sigma[j];
            }
        } else {
            fill_orthonormal_column(&mut u_sorted, j);
        }
    }

    SvdResult {
        u: u_sorted,
        s: sigma,
        vt: vt_sorted,
    }
}

/// Replace column `j` with a unit vector orthogonal to columns 0..j via
/// Gram-Schmidt over the canonical basis, trying e_0, e_1, … in order.
fn fill_orthonormal_column(u: &mut Matrix, j: usize) {
    let m = u.rows();
    for basis in 0..m {
        let mut cand = vec![0.0; m];
        cand[basis] = 1.0;
        for prev in 0..j {
            let col = u.col(prev);
            let proj = dot(&cand, &col);
            for i in 0..m {
                cand[i] -= proj * col[i];
            }
        }
        let norm = norm2(&cand);
        if norm > 1e-6 {
            for i in 0..m {
                u[(i, j)] = cand[i] / norm;
            }
            return;
        }
    }
    unreachable!("orthonormal completion always succeeds for j < m");
}

/// Split a thin SVD into factors `(a, b)` with `a · bᵀ` the best rank-`r`
/// approximation: `a = U_r Σ_r^{1/2}`, `b = V_r Σ_r^{1/2}`.
pub fn truncate_factor(sv: &SvdResult, r: usize) -> Result<(Matrix, Matrix)> {
    if r < 1 || r > sv.s.len() {
        return Err(NgcError::RankError(format!(
            "r = {r} not in [1, {}]",
            sv.s.len()
        )));
    }
    let m = sv.u.rows();
    let n = sv.vt.cols();
    let mut a = Matrix::zeros(m, r);
    let mut b = Matrix::zeros(n, r);
    for j in 0..r {
        let root = sv.s[j].sqrt();
        for i in 0..m {
            a[(i, j)] = sv.u[(i, j)] * root;
        }
        for i in 0..n {
            b[(i, j)] = sv.vt[(j, i)] * root;
        }
    }
    Ok((a, b))
}

/// Moore-Penrose pseudo-inverse. Singular values below
/// `PINV_CUTOFF * σ_max` are treated as zero.
pub fn pinv(m: &Matrix) -> Result<Matrix> {
    let sv = svd(m)?;
    let smax = sv.s.first().copied().unwrap_or(0.0);
    let cutoff = PINV_CUTOFF * smax;
    let k = sv.s.len();
    // pinv = V · diag(1/σ) · Uᵀ
    let mut vs = sv.vt.transpose();
    for j in 0..k {
        let f = if sv.s[j] > cutoff { 1.0 / sv.s[j] } else { 0.0 };
        for i in 0..vs.rows() {
            vs[(i, j)] *= f;
        }
    }
    Ok(vs.matmul_nt(&sv.u))
}

/// Largest singular value.
pub fn sigma_max(m: &Matrix) -> Result<f64> {
    Ok(svd(m)?.s[0])
}

/// Minimize `‖x·P − y‖_F² + ridge·‖P‖_F²` over P. With `ridge = 0` this is
/// the minimum-norm solution.
pub fn least_squares(x: &Matrix, y: &Matrix, ridge: f64) -> Result<Matrix> {
    if x.rows() != y.rows() {
        return Err(NgcError::ShapeError(format!(
            "x has {} rows, y has {}",
            x.rows(),
            y.rows()
        )));
    }
    if !(ridge >= 0.0) {
        return Err(NgcError::InvalidInput(format!("negative ridge {ridge}")));
    }
    x.check_finite("least_squares x")?;
    y.check_finite("least_squares y")?;
    let sv = svd(x)?;
    let smax = sv.s.first().copied().unwrap_or(0.0);
    let cutoff = PINV_CUTOFF * smax;
    let k = sv.s.len();
    // P = V · diag(f) · Uᵀ · y with f = σ/(σ²+ridge), or 1/σ when ridge = 0.
    let uty = sv.u.matmul_tn(y);
    let mut scaled = uty;
    for j in 0..k {
        let s = sv.s[j];
        let f = if ridge > 0.0 {
            s / (s * s + ridge)
        } else if s > cutoff {
            1.0 / s
        } else {
            0.0
        };
        for c in 0..scaled.cols() {
            scaled[(j, c)] *= f;
        }
    }
    Ok(sv.vt.matmul_tn(&scaled))
}

/// Eigenvalues of a symmetric matrix (cyclic Jacobi), sorted descending.
/// Used for positive-semidefiniteness checks on small metric matrices.
pub fn sym_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    if m.rows() != m.cols() {
        return Err(NgcError::ShapeError("sym_eigenvalues needs a square matrix".into()));
    }
    m.check_finite("sym_eigenvalues input")?;
    let n = m.rows();
    let mut a = m.clone();
    let tol = 1e-14 * m.max_abs().max(1e-300);
    for _ in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a[(p, q)].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= tol {
                    continue;
                }
                let tau = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let aip = a[(i, p)];
                    let aiq = a[(i, q)];
                    a[(i, p)] = c * aip - s * aiq;
                    a[(i, q)] = s * aip + c * aiq;
                }
                for i in 0..n {
                    let api = a[(p, i)];
                    let aqi = a[(q, i)];
                    a[(p, i)] = c * api - s * aqi;
                    a[(q, i)] = s * api + c * aqi;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(eig)
}

/// Cholesky factor R (upper triangular) with `RᵀR = g` for symmetric
/// positive-definite `g`.
pub fn cholesky_upper(g: &Matrix) -> Result<Matrix> {
    let n = g.rows();
    if g.cols() != n {
        return Err(NgcError::ShapeError("cholesky needs a square matrix".into()));
    }
    let sym_tol = 1e-10 * g.max_abs().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (g[(i, j)] - g[(j, i)]).abs() > sym_tol {
                return Err(NgcError::NotPositiveDefinite(format!(
                    "asymmetry at ({i},{j}): {} vs {}",
                    g[(i, j)],
                    g[(j, i)]
                )));
            }
        }
    }
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = g[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(NgcError::NotPositiveDefinite(format!(
                        "pivot {i} is {sum}"
                    )));
                }
                l[(i, j)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Ok(l.transpose())
}
