//! Multivariate functional-response regression with low-rank coefficient
//! functions.
//!
//! Coefficient curves are expanded in a sieve basis (Fourier or Chebyshev of
//! the second kind), which turns the functional model into a matrix
//! regression `Y_i = M X_i + E_i` with `X_i = x_i ⊗ B`. The coefficient matrix
//! is estimated by nuclear-norm penalized least squares solved with an
//! accelerated proximal gradient method, with the truncation `c` and penalty
//! `λ` chosen by K-fold cross-validation.

pub mod basis;
pub mod cli;
pub mod design;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod simulation;
pub mod solver;
pub mod tuning;

pub use basis::{basis_matrix, BasisFamily, BasisMatrix, BasisSpec, TimeGrid};
pub use design::{Dataset, NormalEquations, StackedSystem, SubjectMoments};
pub use error::{Error, Result};
pub use eval::{mise, MiseReport};
pub use model::{effective_rank, CoefficientFunctions};
pub use simulation::{gen_dataset, run_monte_carlo, FitPlan, MCReport, Shape, SievePlan, SimConfig};
pub use solver::{fit_fista, fit_ols, svd_soft_threshold, CoefMatrix, FitResult, SolverOptions};
pub use tuning::{grid_search, CVGrid, CVResult};
