//! Kronecker design matrices and the stacked least-squares system.
//!
//! Subject `i` contributes `X_i = x_i ⊗ B ∈ ℝ^{sc×T}` and `Y_i ∈ ℝ^{p×T}`.
//! Stacking the transposes gives `𝒳 ∈ ℝ^{nT×sc}` and `𝒴 ∈ ℝ^{nT×p}`. The
//! solver only ever touches the sufficient statistics `𝒳ᵀ𝒳`, `𝒳ᵀ𝒴` and
//! `‖𝒴‖²`, collected in [`NormalEquations`].

use nalgebra::DMatrix;

use crate::basis::{BasisMatrix, TimeGrid};
use crate::error::{Error, Result};
use crate::solver::CoefMatrix;

/// Covariates (`n × s`), responses (`n` matrices of shape `p × T`) and the
/// shared time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    covariates: DMatrix<f64>,
    responses: Vec<DMatrix<f64>>,
    grid: TimeGrid,
}

impl Dataset {
    pub fn new(
        covariates: DMatrix<f64>,
        responses: Vec<DMatrix<f64>>,
        grid: TimeGrid,
    ) -> Result<Self> {
        let n = covariates.nrows();
        if n == 0 || covariates.ncols() == 0 {
            return Err(Error::Validation("dataset needs n >= 1 and s >= 1".into()));
        }
        if responses.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} covariate rows but {} response matrices",
                responses.len()
            )));
        }
        let p = responses[0].nrows();
        if p == 0 {
            return Err(Error::Validation("responses need p >= 1".into()));
        }
        for (i, y) in responses.iter().enumerate() {
            if y.nrows() != p || y.ncols() != grid.len() {
                return Err(Error::DimensionMismatch(format!(
                    "subject {i}: response is {}x{}, expected {p}x{}",
                    y.nrows(),
                    y.ncols(),
                    grid.len()
                )));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "subject {i}: non-finite response value"
                )));
            }
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite covariate value".into()));
        }
        Ok(Self {
            covariates,
            responses,
            grid,
        })
    }

    pub fn n(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn s(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn p(&self) -> usize {
        self.responses[0].nrows()
    }

    pub fn t_len(&self) -> usize {
        self.grid.len()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn responses(&self) -> &[DMatrix<f64>] {
        &self.responses
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn covariate_row(&self, i: usize) -> Vec<f64> {
        self.covariates.row(i).iter().copied().collect()
    }

    /// Subset of subjects, in the given order.
    pub fn select(&self, subjects: &[usize]) -> Dataset {
        let cov = DMatrix::from_fn(subjects.len(), self.s(), |r, c| {
            self.covariates[(subjects[r], c)]
        });
        Dataset {
            covariates: cov,
            responses: subjects.iter().map(|&i| self.responses[i].clone()).collect(),
            grid: self.grid.clone(),
        }
    }

    /// Centers each covariate and standardizes each response coordinate `l`
    /// to mean zero and unit variance over all subjects and time points.
    pub fn standardized(&self) -> Dataset {
        let n = self.n() as f64;
        let mut cov = self.covariates.clone();
        for j in 0..self.s() {
            let mean = cov.column(j).sum() / n;
            cov.column_mut(j).add_scalar_mut(-mean);
        }
        let mut responses = self.responses.clone();
        let count = n * self.t_len() as f64;
        for l in 0..self.p() {
            let mean = responses.iter().map(|y| y.row(l).sum()).sum::<f64>() / count;
            let var = responses
                .iter()
                .map(|y| y.row(l).iter().map(|v| (v - mean).powi(2)).sum::<f64>())
                .sum::<f64>()
                / count;
            let sd = var.sqrt();
            let scale = if sd > 0.0 { 1.0 / sd } else { 1.0 };
            for y in responses.iter_mut() {
                for v in y.row_mut(l).iter_mut() {
                    *v = (*v - mean) * scale;
                }
            }
        }
        Dataset {
            covariates: cov,
            responses,
            grid: self.grid.clone(),
        }
    }
}

/// `X_i = x_i ⊗ B`, an `sc × T` matrix whose block `j` is `x_ij · B`.
pub fn subject_design(x: &[f64], basis: &BasisMatrix) -> Result<DMatrix<f64>> {
    if x.is_empty() {
        return Err(Error::DimensionMismatch("covariate vector is empty".into()));
    }
    let b = basis.values();
    let c = b.nrows();
    let mut out = DMatrix::zeros(x.len() * c, b.ncols());
    for (j, &xj) in x.iter().enumerate() {
        out.rows_mut(j * c, c).copy_from(&(b * xj));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub s: usize,
    pub p: usize,
    pub t: usize,
    pub c: usize,
}

/// Dense `𝒳` (`nT × sc`) and `𝒴` (`nT × p`).
#[derive(Clone, Debug)]
pub struct StackedSystem {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub dims: Dims,
}

pub fn stack_system(data: &Dataset, basis: &BasisMatrix) -> Result<StackedSystem> {
    if basis.grid() != data.grid() {
        return Err(Error::DimensionMismatch(
            "basis and dataset are evaluated on different grids".into(),
        ));
    }
    let dims = Dims {
        n: data.n(),
        s: data.s(),
        p: data.p(),
        t: data.t_len(),
        c: basis.c(),
    };
    let t_len = dims.t;
    let mut x = DMatrix::zeros(dims.n * t_len, dims.s * dims.c);
    let mut y = DMatrix::zeros(dims.n * t_len, dims.p);
    for i in 0..dims.n {
        let xi = subject_design(&data.covariate_row(i), basis)?;
        x.rows_mut(i * t_len, t_len).copy_from(&xi.transpose());
        y.rows_mut(i * t_len, t_len)
            .copy_from(&data.responses()[i].transpose());
    }
    Ok(StackedSystem { x, y, dims })
}

impl StackedSystem {
    /// `(X_i, Y_i)` for subject `i`, read back from the stacked blocks.
    pub fn unstack(&self, i: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let t_len = self.dims.t;
        (
            self.x.rows(i * t_len, t_len).transpose(),
            self.y.rows(i * t_len, t_len).transpose(),
        )
    }

    pub fn normal_equations(&self) -> NormalEquations {
        let xt = self.x.transpose();
        NormalEquations {
            gram: &xt * &self.x,
            cross: &xt * &self.y,
            y_sq: self.y.norm_squared(),
            n_obs: self.x.nrows(),
            s: self.dims.s,
            c: self.dims.c,
        }
    }
}

/// `M · X_i`, the noiseless response of subject `i`.
pub fn model_product(m: &CoefMatrix, x_i: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.matrix().ncols() != x_i.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "coefficient matrix has {} columns but design has {} rows",
            m.matrix().ncols(),
            x_i.nrows()
        )));
    }
    Ok(m.matrix() * x_i)
}

/// Sufficient statistics of the stacked least-squares problem.
#[derive(Clone, Debug)]
pub struct NormalEquations {
    /// `𝒳ᵀ𝒳`, `sc × sc`.
    pub gram: DMatrix<f64>,
    /// `𝒳ᵀ𝒴`, `sc × p`.
    pub cross: DMatrix<f64>,
    /// `‖𝒴‖_F²`.
    pub y_sq: f64,
    /// Number of stacked rows `nT`.
    pub n_obs: usize,
    pub s: usize,
    pub c: usize,
}

impl NormalEquations {
    pub fn p(&self) -> usize {
        self.cross.ncols()
    }

    pub fn sc(&self) -> usize {
        self.gram.nrows()
    }

    /// `‖𝒴 − 𝒳D‖_F²` expanded through the Gram matrix.
    pub fn residual_sq(&self, d: &DMatrix<f64>) -> f64 {
        let gd = &self.gram * d;
        self.y_sq - 2.0 * d.dot(&self.cross) + d.dot(&gd)
    }

    /// `(1/2nT) ‖𝒴 − 𝒳D‖_F²`.
    pub fn loss(&self, d: &DMatrix<f64>) -> f64 {
        self.residual_sq(d) / (2.0 * self.n_obs as f64)
    }

    /// `(1/nT) 𝒳ᵀ(𝒳D − 𝒴)`.
    pub fn gradient(&self, d: &DMatrix<f64>) -> DMatrix<f64> {
        (&self.gram * d - &self.cross) / self.n_obs as f64
    }
}

/// Per-subject statistics that let any subject subset and any truncation
/// `c <= c_max` be assembled without re-touching the raw responses.
#[derive(Clone, Debug)]
pub struct SubjectMoments {
    covariates: DMatrix<f64>,
    /// `B Y_iᵀ`, `c_max × p` per subject.
    basis_response: Vec<DMatrix<f64>>,
    /// `B Bᵀ`, `c_max × c_max`.
    basis_gram: DMatrix<f64>,
    response_sq: Vec<f64>,
    t_len: usize,
    c_max: usize,
}

impl SubjectMoments {
    pub fn new(data: &Dataset, basis: &BasisMatrix) -> Result<Self> {
        if basis.grid() != data.grid() {
            return Err(Error::DimensionMismatch(
                "basis and dataset are evaluated on different grids".into(),
            ));
        }
        let b = basis.values();
        Ok(Self {
            covariates: data.covariates().clone(),
            basis_response: data.responses().iter().map(|y| b * y.transpose()).collect(),
            basis_gram: b * b.transpose(),
            response_sq: data.responses().iter().map(|y| y.norm_squared()).collect(),
            t_len: data.t_len(),
            c_max: basis.c(),
        })
    }

    pub fn n(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn c_max(&self) -> usize {
        self.c_max
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    /// Normal equations restricted to `subjects`, with truncation `c`.
    pub fn normal_equations(&self, c: usize, subjects: &[usize]) -> Result<NormalEquations> {
        if c == 0 || c > self.c_max {
            return Err(Error::Validation(format!(
                "truncation c = {c} outside 1..={}",
                self.c_max
            )));
        }
        let s = self.covariates.ncols();
        let p = self.basis_response[0].ncols();
        let mut xtx = DMatrix::<f64>::zeros(s, s);
        let mut cross = DMatrix::<f64>::zeros(s * c, p);
        let mut y_sq = 0.0;
        for &i in subjects {
            let x = self.covariates.row(i);
            xtx += x.transpose() * x;
            let by = self.basis_response[i].rows(0, c);
            for j in 0..s {
                let xj = x[j];
                cross
                    .rows_mut(j * c, c)
                    .zip_apply(&by, |acc, v| *acc += xj * v);
            }
            y_sq += self.response_sq[i];
        }
        let bb = self.basis_gram.view((0, 0), (c, c));
        let gram = xtx.kronecker(&bb);
        Ok(NormalEquations {
            gram,
            cross,
            y_sq,
            n_obs: subjects.len() * self.t_len,
            s,
            c,
        })
    }
}
