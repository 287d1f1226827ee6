//! Coefficient curves `β̂_{jl}(t) = Σ_h M̂_{jl,h} b_h(t)`, prediction and
//! rank diagnostics.

use nalgebra::{DMatrix, DVector};

use crate::basis::{basis_matrix, BasisFamily, BasisSpec, TimeGrid};
use crate::design::subject_design;
use crate::error::{Error, Result};
use crate::eval::quadrature_integral;
use crate::io::fmt_f64;
use crate::solver::{singular_values, CoefMatrix};

/// Default relative threshold for [`effective_rank`].
pub const DEFAULT_RANK_TOL: f64 = 1e-7;

/// A coefficient matrix paired with the basis family it was fitted in.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientFunctions {
    pub m_hat: CoefMatrix,
    pub family: BasisFamily,
}

impl CoefficientFunctions {
    pub fn new(m_hat: CoefMatrix, family: BasisFamily) -> Self {
        Self { m_hat, family }
    }

    pub fn s(&self) -> usize {
        self.m_hat.s()
    }

    pub fn p(&self) -> usize {
        self.m_hat.p()
    }

    pub fn c(&self) -> usize {
        self.m_hat.c()
    }

    fn check_j(&self, j: usize) -> Result<()> {
        if j == 0 || j > self.s() {
            return Err(Error::Domain(format!(
                "covariate index {j} outside 1..={}",
                self.s()
            )));
        }
        Ok(())
    }

    /// `β̂_j(t) = M̂_j b(t)`, a vector of length `p`.
    pub fn eval_beta(&self, j: usize, t: f64) -> Result<DVector<f64>> {
        self.check_j(j)?;
        let b = DVector::from_vec(self.family.eval_all(self.c(), t)?);
        Ok(self.m_hat.block(j) * b)
    }

    /// `β̂_j` on every grid point, a `p × T` matrix.
    pub fn eval_beta_grid(&self, j: usize, grid: &TimeGrid) -> Result<DMatrix<f64>> {
        self.check_j(j)?;
        let basis = basis_matrix(BasisSpec::new(self.family, self.c())?, grid);
        Ok(self.m_hat.block(j) * basis.values())
    }

    /// Noiseless response `M̂ (x_new ⊗ B)` on `grid`.
    pub fn predict(&self, x_new: &[f64], grid: &TimeGrid) -> Result<DMatrix<f64>> {
        if x_new.len() != self.s() {
            return Err(Error::DimensionMismatch(format!(
                "covariate vector has length {}, expected {}",
                x_new.len(),
                self.s()
            )));
        }
        let basis = basis_matrix(BasisSpec::new(self.family, self.c())?, grid);
        Ok(self.m_hat.matrix() * subject_design(x_new, &basis)?)
    }

    /// Curves centered by their integral and scaled to unit `L²` norm, one
    /// `p × T` matrix per covariate. Integrals use the trapezoid rule on a
    /// uniform grid of `grid_len` points spanning `[0, 1]`.
    pub fn standardized_curves(&self, grid_len: usize) -> Result<(Vec<f64>, Vec<DMatrix<f64>>)> {
        if grid_len < 2 {
            return Err(Error::Validation("standardized curves need >= 2 points".into()));
        }
        let points: Vec<f64> = (0..grid_len)
            .map(|k| k as f64 / (grid_len - 1) as f64)
            .collect();
        let grid = TimeGrid::new(points.clone())?;
        let mut out = Vec::with_capacity(self.s());
        for j in 1..=self.s() {
            let mut curves = self.eval_beta_grid(j, &grid)?;
            for l in 0..self.p() {
                let row: Vec<f64> = curves.row(l).iter().copied().collect();
                let mean = quadrature_integral(&row)?;
                let centered: Vec<f64> = row.iter().map(|v| v - mean).collect();
                let sq: Vec<f64> = centered.iter().map(|v| v * v).collect();
                let norm = quadrature_integral(&sq)?.sqrt();
                let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
                for (k, v) in centered.iter().enumerate() {
                    curves[(l, k)] = v * scale;
                }
            }
            out.push(curves);
        }
        Ok((points, out))
    }

    /// CSV with header `t,j,l,beta_hat`, one row per grid point, covariate and
    /// response coordinate (`j`, `l` counted from 1).
    pub fn curves_csv(&self, grid: &TimeGrid) -> Result<String> {
        let curves = (1..=self.s())
            .map(|j| self.eval_beta_grid(j, grid))
            .collect::<Result<Vec<_>>>()?;
        Ok(curves_to_csv(grid.points(), &curves))
    }

    pub fn standardized_curves_csv(&self, grid_len: usize) -> Result<String> {
        let (points, curves) = self.standardized_curves(grid_len)?;
        Ok(curves_to_csv(&points, &curves))
    }
}

fn curves_to_csv(points: &[f64], curves: &[DMatrix<f64>]) -> String {
    let mut out = String::from("t,j,l,beta_hat\n");
    for (k, &t) in points.iter().enumerate() {
        for (j, curve) in curves.iter().enumerate() {
            for l in 0..curve.nrows() {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    fmt_f64(t),
                    j + 1,
                    l + 1,
                    fmt_f64(curve[(l, k)])
                ));
            }
        }
    }
    out
}

/// Number of singular values above `rel_tol · σ_max`; 0 for the zero matrix.
pub fn effective_rank(m_hat: &CoefMatrix, rel_tol: f64) -> usize {
    rank_of_values(&m_hat.singular_values(), rel_tol)
}

pub fn rank_of_values(sv: &[f64], rel_tol: f64) -> usize {
    match sv.first() {
        Some(&top) if top > 0.0 => sv.iter().filter(|&&v| v > rel_tol * top).count(),
        _ => 0,
    }
}

/// Leading `k` singular values, zero-padded past `min(p, sc)`.
pub fn scree(m_hat: &CoefMatrix, k: usize) -> Vec<f64> {
    let mut sv = singular_values(m_hat.matrix());
    sv.resize(k, 0.0);
    sv
}

pub fn scree_csv(values: &[f64]) -> String {
    let mut out = String::from("k,singular_value\n");
    for (k, v) in values.iter().enumerate() {
        out.push_str(&format!("{},{}\n", k + 1, fmt_f64(*v)));
    }
    out
}
