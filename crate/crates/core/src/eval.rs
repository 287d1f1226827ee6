//! Integrated squared error of estimated coefficient curves.

use serde::{Deserialize, Serialize};

use crate::basis::TimeGrid;
use crate::error::{Error, Result};
use crate::model::CoefficientFunctions;

pub const DEFAULT_QUAD_POINTS: usize = 1024;

/// Composite trapezoid rule for samples on a uniform grid spanning `[0, 1]`
/// (first and last samples at the endpoints).
pub fn quadrature_integral(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Validation(
            "trapezoid rule needs at least 2 samples".into(),
        ));
    }
    let h = 1.0 / (n - 1) as f64;
    let interior: f64 = values[1..n - 1].iter().sum();
    Ok(h * (interior + 0.5 * (values[0] + values[n - 1])))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiseReport {
    /// `MISE_j = (1/p) Σ_l ∫ (β_{jl} − β̂_{jl})²`, one entry per covariate.
    pub per_j: Vec<f64>,
    pub quadrature_points: usize,
}

fn quadrature_grid(n_quad: usize) -> Result<TimeGrid> {
    if n_quad < 2 {
        return Err(Error::Validation("n_quad must be >= 2".into()));
    }
    TimeGrid::new(
        (0..n_quad)
            .map(|k| k as f64 / (n_quad - 1) as f64)
            .collect(),
    )
}

fn check_shapes(a: &CoefficientFunctions, b: &CoefficientFunctions) -> Result<()> {
    if a.s() != b.s() || a.p() != b.p() {
        return Err(Error::DimensionMismatch(format!(
            "true curves have (s, p) = ({}, {}), estimate has ({}, {})",
            a.s(),
            a.p(),
            b.s(),
            b.p()
        )));
    }
    Ok(())
}

/// Both expansions are evaluated pointwise on the quadrature grid, so the two
/// sides may use different basis families or truncations.
pub fn mise(
    beta_true: &CoefficientFunctions,
    beta_hat: &CoefficientFunctions,
    n_quad: usize,
) -> Result<MiseReport> {
    check_shapes(beta_true, beta_hat)?;
    let grid = quadrature_grid(n_quad)?;
    let p = beta_true.p() as f64;
    let mut per_j = Vec::with_capacity(beta_true.s());
    for j in 1..=beta_true.s() {
        let diff = beta_true.eval_beta_grid(j, &grid)? - beta_hat.eval_beta_grid(j, &grid)?;
        let mut total = 0.0;
        for l in 0..diff.nrows() {
            let sq: Vec<f64> = diff.row(l).iter().map(|v| v * v).collect();
            total += quadrature_integral(&sq)?;
        }
        per_j.push(total / p);
    }
    Ok(MiseReport {
        per_j,
        quadrature_points: n_quad,
    })
}

/// Largest pointwise deviation `max_{j,l,t} |β_{jl}(t) − β̂_{jl}(t)|` on the
/// quadrature grid. Diagnostic only.
pub fn sup_error(
    beta_true: &CoefficientFunctions,
    beta_hat: &CoefficientFunctions,
    n_quad: usize,
) -> Result<f64> {
    check_shapes(beta_true, beta_hat)?;
    let grid = quadrature_grid(n_quad)?;
    let mut worst: f64 = 0.0;
    for j in 1..=beta_true.s() {
        let diff = beta_true.eval_beta_grid(j, &grid)? - beta_hat.eval_beta_grid(j, &grid)?;
        worst = worst.max(diff.amax());
    }
    Ok(worst)
}

impl MiseReport {
    /// Markdown table in units of `10⁻²`, three decimals.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| | MISE (10^-2) |\n|---|---|\n");
        for (j, v) in self.per_j.iter().enumerate() {
            out.push_str(&format!("| beta_{} | {:.3} |\n", j + 1, v * 100.0));
        }
        out
    }
}
