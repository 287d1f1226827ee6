//! Nuclear-norm penalized least squares.
//!
//! The objective is `Q(D) = (1/2nT) ‖𝒴 − 𝒳D‖_F² + λ ‖D‖_*` with `D = Mᵀ`.
//! Under this scaling the smooth gradient is `(1/nT) 𝒳ᵀ(𝒳D − 𝒴)`, its
//! Lipschitz constant is `λ_max(𝒳ᵀ𝒳) / nT`, and the proximal gradient step
//! size is `δ = nT / λ_max(𝒳ᵀ𝒳)` with singular-value threshold `λδ`.

use nalgebra::{DMatrix, DMatrixView};
use serde::{Deserialize, Serialize};

use crate::design::{NormalEquations, StackedSystem};
use crate::error::{Error, Result};

/// Stacked coefficients `M = (M_1, .., M_s) ∈ ℝ^{p×sc}`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefMatrix {
    m: DMatrix<f64>,
    s: usize,
    c: usize,
}

impl CoefMatrix {
    pub fn new(m: DMatrix<f64>, s: usize, c: usize) -> Result<Self> {
        if s == 0 || c == 0 {
            return Err(Error::Validation("coefficient matrix needs s, c >= 1".into()));
        }
        if m.ncols() != s * c {
            return Err(Error::DimensionMismatch(format!(
                "coefficient matrix has {} columns, expected s*c = {}",
                m.ncols(),
                s * c
            )));
        }
        Ok(Self { m, s, c })
    }

    pub fn zeros(p: usize, s: usize, c: usize) -> Self {
        Self {
            m: DMatrix::zeros(p, s * c),
            s,
            c,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    pub fn p(&self) -> usize {
        self.m.nrows()
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn c(&self) -> usize {
        self.c
    }

    /// `M_j ∈ ℝ^{p×c}`, `j` counted from 1. Panics when `j` is out of range.
    pub fn block(&self, j: usize) -> DMatrixView<'_, f64> {
        assert!(j >= 1 && j <= self.s, "block index {j} outside 1..={}", self.s);
        self.m.columns((j - 1) * self.c, self.c)
    }

    pub fn singular_values(&self) -> Vec<f64> {
        singular_values(&self.m)
    }

    pub fn nuclear_norm(&self) -> f64 {
        self.singular_values().iter().sum()
    }
}

/// Singular values sorted in descending order.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    if a.is_empty() {
        return Vec::new();
    }
    let mut sv: Vec<f64> = a.singular_values().iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Stop once `|ΔQ| / max(1, |Q|)` falls below this.
    pub rel_tol: f64,
    pub min_iters: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 10_000,
            rel_tol: 1e-8,
            min_iters: 10,
        }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Validation("max_iters must be positive".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::Validation("rel_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub m_hat: CoefMatrix,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    /// Singular values of `m_hat`, descending.
    pub singular_values: Vec<f64>,
    pub lambda_used: f64,
    pub converged: bool,
}

impl FitResult {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Domain(format!(
            "penalty must be finite and non-negative, got {lambda}"
        )));
    }
    Ok(())
}

/// Exact objective on the dense stacked system.
pub fn objective(m: &CoefMatrix, sys: &StackedSystem, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if m.matrix().ncols() != sys.x.ncols() || m.p() != sys.y.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "M is {}x{}, system expects {}x{}",
            m.p(),
            m.matrix().ncols(),
            sys.y.ncols(),
            sys.x.ncols()
        )));
    }
    let resid = &sys.y - &sys.x * m.matrix().transpose();
    let n_obs = sys.x.nrows() as f64;
    let penalty = if lambda > 0.0 { lambda * m.nuclear_norm() } else { 0.0 };
    Ok(resid.norm_squared() / (2.0 * n_obs) + penalty)
}

/// `(1/nT) 𝒳ᵀ(𝒳D − 𝒴)` on the dense stacked system, `D` of shape `sc × p`.
pub fn smooth_gradient(d: &DMatrix<f64>, sys: &StackedSystem) -> Result<DMatrix<f64>> {
    if d.nrows() != sys.x.ncols() || d.ncols() != sys.y.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "D is {}x{}, system expects {}x{}",
            d.nrows(),
            d.ncols(),
            sys.x.ncols(),
            sys.y.ncols()
        )));
    }
    let resid = &sys.x * d - &sys.y;
    Ok(sys.x.transpose() * resid / sys.x.nrows() as f64)
}

struct Shrunk {
    matrix: DMatrix<f64>,
    /// Sum of the shrunk singular values; `None` when `tau == 0` and no SVD ran.
    nuclear: Option<f64>,
}

fn shrink(a: &DMatrix<f64>, tau: f64) -> Result<Shrunk> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite entry before SVD".into()));
    }
    if tau == 0.0 {
        return Ok(Shrunk {
            matrix: a.clone(),
            nuclear: None,
        });
    }
    // Only the singular vectors of the smaller side are computed; the other
    // side is recovered as `A v_k / σ_k` (or `Aᵀ u_k / σ_k`) for kept terms.
    let tall = a.nrows() >= a.ncols();
    let svd = a.clone().svd(!tall, tall);
    let mut out = DMatrix::zeros(a.nrows(), a.ncols());
    let mut nuclear = 0.0;
    for (k, &sv) in svd.singular_values.iter().enumerate() {
        if sv <= tau {
            continue;
        }
        let d = sv - tau;
        if tall {
            let v = svd.v_t.as_ref().expect("requested Vᵀ").row(k).transpose();
            let u = a * &v / sv;
            out.ger(d, &u, &v, 1.0);
        } else {
            let u = svd.u.as_ref().expect("requested U").column(k).into_owned();
            let v = a.tr_mul(&u) / sv;
            out.ger(d, &u, &v, 1.0);
        }
        nuclear += d;
    }
    Ok(Shrunk {
        matrix: out,
        nuclear: Some(nuclear),
    })
}

/// Proximal operator of `τ‖·‖_*`: `U diag((a − τ)_+) Vᵀ` for `A = U diag(a) Vᵀ`.
pub fn svd_soft_threshold(a: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    if !(tau >= 0.0) {
        return Err(Error::Domain(format!("threshold must be >= 0, got {tau}")));
    }
    Ok(shrink(a, tau)?.matrix)
}

/// Largest eigenvalue of a symmetric positive semi-definite matrix by power
/// iteration, stopping at relative change `rel_tol`.
pub fn power_iteration(gram: &DMatrix<f64>, rel_tol: f64, max_iters: usize) -> f64 {
    let k = gram.nrows();
    let mut v = nalgebra::DVector::from_fn(k, |i, _| 1.0 + 0.1 * ((i + 1) as f64).sin());
    v /= v.norm();
    let mut estimate = 0.0;
    for it in 0..max_iters {
        let w = gram * &v;
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        if it > 0 && (next - estimate).abs() <= rel_tol * next.abs() {
            return next;
        }
        estimate = next;
    }
    estimate
}

/// `nT / λ_max(𝒳ᵀ𝒳)`.
pub fn step_size(ne: &NormalEquations) -> Result<f64> {
    if ne.gram.amax() == 0.0 {
        return Err(Error::Numerical("design matrix is identically zero".into()));
    }
    let lmax = power_iteration(&ne.gram, 1e-8, 100_000);
    if !(lmax > 0.0) || !lmax.is_finite() {
        return Err(Error::Numerical(format!("invalid Gram spectrum bound {lmax}")));
    }
    Ok(ne.n_obs as f64 / lmax)
}

/// Smallest penalty at which the zero matrix is optimal:
/// `(1/nT) σ_max(𝒳ᵀ𝒴)`.
pub fn lambda_dead(ne: &NormalEquations) -> f64 {
    singular_values(&ne.cross).first().copied().unwrap_or(0.0) / ne.n_obs as f64
}

/// Accelerated proximal gradient with Nesterov momentum and fixed step.
pub fn fit_fista(
    ne: &NormalEquations,
    lambda: f64,
    opts: &SolverOptions,
    warm_start: Option<&CoefMatrix>,
) -> Result<FitResult> {
    check_lambda(lambda)?;
    opts.validate()?;
    let (sc, p) = (ne.sc(), ne.p());
    let delta = step_size(ne)?;
    let tau = lambda * delta;

    let start = match warm_start {
        Some(m) => {
            if m.p() != p || m.s() != ne.s || m.c() != ne.c {
                return Err(Error::DimensionMismatch(format!(
                    "warm start is {}x{} (s={}, c={}), problem needs {p}x{sc} (s={}, c={})",
                    m.p(),
                    m.matrix().ncols(),
                    m.s(),
                    m.c(),
                    ne.s,
                    ne.c
                )));
            }
            m.matrix().transpose()
        }
        None => DMatrix::zeros(sc, p),
    };

    // Zero satisfies the optimality condition whenever λ ≥ σ_max(C)/nT.
    if lambda > 0.0 && lambda >= lambda_dead(ne) {
        let zero = DMatrix::zeros(sc, p);
        let q = ne.loss(&zero);
        return Ok(FitResult {
            m_hat: CoefMatrix::zeros(p, ne.s, ne.c),
            objective_trace: vec![q],
            iterations: 0,
            singular_values: vec![0.0; p.min(sc)],
            lambda_used: lambda,
            converged: true,
        });
    }

    let penalty_of = |d: &DMatrix<f64>| -> f64 {
        if lambda > 0.0 {
            lambda * singular_values(d).iter().sum::<f64>()
        } else {
            0.0
        }
    };

    let mut d_prev = start.clone();
    let mut d_cur = start;
    let mut alpha_prev = 0.0_f64;
    let mut alpha_cur = 1.0_f64;
    let mut q_cur = ne.loss(&d_cur) + penalty_of(&d_cur);
    if !q_cur.is_finite() {
        return Err(Error::Numerical("objective is not finite at the start".into()));
    }
    let mut trace = vec![q_cur];
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=opts.max_iters {
        let momentum = (alpha_prev - 1.0) / alpha_cur;
        let search = &d_cur + (&d_cur - &d_prev) * momentum;
        let a = &search - ne.gradient(&search) * delta;
        let shrunk = shrink(&a, tau)?;
        let penalty = match shrunk.nuclear {
            Some(nuc) if lambda > 0.0 => lambda * nuc,
            _ => 0.0,
        };
        let d_next = shrunk.matrix;
        let q_next = ne.loss(&d_next) + penalty;
        if !q_next.is_finite() {
            return Err(Error::Numerical(format!(
                "objective became non-finite at iteration {it}"
            )));
        }
        trace.push(q_next);
        let alpha_next = (1.0 + (1.0 + 4.0 * alpha_cur * alpha_cur).sqrt()) / 2.0;
        alpha_prev = alpha_cur;
        alpha_cur = alpha_next;
        d_prev = std::mem::replace(&mut d_cur, d_next);
        let change = (q_next - q_cur).abs() / q_cur.abs().max(1.0);
        q_cur = q_next;
        iterations = it;
        if it >= opts.min_iters && change < opts.rel_tol {
            converged = true;
            break;
        }
    }

    let m_hat = CoefMatrix::new(d_cur.transpose(), ne.s, ne.c)?;
    let singular_values = m_hat.singular_values();
    Ok(FitResult {
        m_hat,
        objective_trace: trace,
        iterations,
        singular_values,
        lambda_used: lambda,
        converged,
    })
}

/// Condition number above which the Gram matrix is treated as singular.
pub const OLS_MAX_CONDITION: f64 = 1e12;

/// Unpenalized least squares from the normal equations.
pub fn fit_ols(ne: &NormalEquations) -> Result<FitResult> {
    solve_normal(ne, 0.0)
}

/// Ridge-stabilized least squares, minimizing
/// `(1/2nT) ‖𝒴 − 𝒳D‖² + (ridge/2) ‖D‖_F²`.
pub fn fit_ridge(ne: &NormalEquations, ridge: f64) -> Result<FitResult> {
    if !(ridge > 0.0) || !ridge.is_finite() {
        return Err(Error::Domain(format!("ridge must be positive, got {ridge}")));
    }
    solve_normal(ne, ridge)
}

fn solve_normal(ne: &NormalEquations, ridge: f64) -> Result<FitResult> {
    let mut gram = ne.gram.clone();
    if ridge > 0.0 {
        let shift = ridge * ne.n_obs as f64;
        for k in 0..gram.nrows() {
            gram[(k, k)] += shift;
        }
    } else {
        let eig = gram.clone().symmetric_eigen();
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(min > 0.0) || max / min > OLS_MAX_CONDITION {
            return Err(Error::Numerical(format!(
                "Gram matrix is rank-deficient (eigenvalues in [{min:e}, {max:e}]); \
                 refit with a ridge penalty (--ridge)"
            )));
        }
    }
    let chol = gram.cholesky().ok_or_else(|| {
        Error::Numerical("Cholesky factorization of the Gram matrix failed".into())
    })?;
    let d = chol.solve(&ne.cross);
    let objective = ne.loss(&d)
        + if ridge > 0.0 {
            0.5 * ridge * d.norm_squared()
        } else {
            0.0
        };
    if !objective.is_finite() {
        return Err(Error::Numerical("least-squares objective is not finite".into()));
    }
    let m_hat = CoefMatrix::new(d.transpose(), ne.s, ne.c)?;
    let singular_values = m_hat.singular_values();
    Ok(FitResult {
        m_hat,
        objective_trace: vec![objective],
        iterations: 1,
        singular_values,
        lambda_used: 0.0,
        converged: true,
    })
}
