//! Subject-level k-fold cross-validation over the `(c, λ)` grid.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{basis_matrix, BasisFamily, BasisSpec};
use crate::design::{stack_system, Dataset, SubjectMoments};
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::solver::{fit_fista, lambda_dead, CoefMatrix, SolverOptions};

pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_LADDER_LEN: usize = 20;
pub const DEFAULT_LADDER_RATIO: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CVGrid {
    /// Strictly increasing truncation counts.
    pub c_values: Vec<usize>,
    /// Strictly decreasing penalties.
    pub lambda_values: Vec<f64>,
    pub k_folds: usize,
    pub seed: u64,
}

impl CVGrid {
    pub fn new(c_values: Vec<usize>, lambda_values: Vec<f64>, k_folds: usize, seed: u64) -> Result<Self> {
        let grid = Self {
            c_values,
            lambda_values,
            k_folds,
            seed,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_folds < 2 {
            return Err(Error::Validation("k_folds must be >= 2".into()));
        }
        if self.c_values.is_empty() || self.lambda_values.is_empty() {
            return Err(Error::Validation("CV grid must be non-empty".into()));
        }
        if self.c_values[0] == 0 || self.c_values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation(
                "c values must be positive and strictly increasing".into(),
            ));
        }
        if self.lambda_values.iter().any(|l| !(*l >= 0.0) || !l.is_finite())
            || self.lambda_values.windows(2).any(|w| w[1] >= w[0])
        {
            return Err(Error::Validation(
                "lambda values must be finite, non-negative and strictly decreasing".into(),
            ));
        }
        Ok(())
    }
}

/// `count` log-spaced penalties from `lambda_max` down to `ratio · lambda_max`.
pub fn lambda_ladder(lambda_max: f64, count: usize, ratio: f64) -> Result<Vec<f64>> {
    if !(lambda_max > 0.0) || !lambda_max.is_finite() {
        return Err(Error::Validation(format!(
            "ladder top must be positive, got {lambda_max}"
        )));
    }
    if count == 0 || !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Validation(
            "ladder needs count >= 1 and ratio in (0, 1)".into(),
        ));
    }
    if count == 1 {
        return Ok(vec![lambda_max]);
    }
    let step = ratio.ln() / (count - 1) as f64;
    Ok((0..count)
        .map(|k| lambda_max * (step * k as f64).exp())
        .collect())
}

/// Dead-zone penalty of the full data at truncation `c`.
pub fn full_data_lambda_dead(data: &Dataset, c: usize, family: BasisFamily) -> Result<f64> {
    let basis = basis_matrix(BasisSpec::new(family, c)?, data.grid());
    let moments = SubjectMoments::new(data, &basis)?;
    let all: Vec<usize> = (0..data.n()).collect();
    Ok(lambda_dead(&moments.normal_equations(c, &all)?))
}

/// Default ladder: 20 values from the full-data dead zone (at the largest
/// `c`) down to `1e-4` times it.
pub fn default_lambda_ladder(data: &Dataset, c_max: usize, family: BasisFamily) -> Result<Vec<f64>> {
    let top = full_data_lambda_dead(data, c_max, family)?;
    lambda_ladder(top, DEFAULT_LADDER_LEN, DEFAULT_LADDER_RATIO)
}

/// Seeded shuffle, then fold `r mod k` for shuffled position `r`.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::Validation(format!(
            "cannot split {n} subjects into {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labels = vec![0; n];
    for (rank, &subject) in order.iter().enumerate() {
        labels[subject] = rank % k;
    }
    Ok(labels)
}

fn split(folds: &[usize], fold: usize) -> (Vec<usize>, Vec<usize>) {
    let (hold, train): (Vec<usize>, Vec<usize>) = (0..folds.len()).partition(|&i| folds[i] == fold);
    (train, hold)
}

fn fold_count(folds: &[usize]) -> Result<usize> {
    let k = folds.iter().copied().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(Error::Validation("need at least 2 folds".into()));
    }
    for f in 0..k {
        if !folds.contains(&f) {
            return Err(Error::Validation(format!("fold {f} is empty")));
        }
    }
    Ok(k)
}

/// Mean over folds of the held-out `(1/(n_hold T)) Σ ‖Y_i − M̂ X_i‖_F²`,
/// with `M̂` fitted on the remaining subjects from a zero start.
pub fn cv_score(
    data: &Dataset,
    c: usize,
    lambda: f64,
    folds: &[usize],
    family: BasisFamily,
    opts: &SolverOptions,
) -> Result<f64> {
    if folds.len() != data.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} fold labels for {} subjects",
            folds.len(),
            data.n()
        )));
    }
    let k = fold_count(folds)?;
    let basis = basis_matrix(BasisSpec::new(family, c)?, data.grid());
    let mut total = 0.0;
    for fold in 0..k {
        let (train, hold) = split(folds, fold);
        let score = (|| -> Result<f64> {
            let ne = stack_system(&data.select(&train), &basis)?.normal_equations();
            let fit = fit_fista(&ne, lambda, opts, None)?;
            let held = stack_system(&data.select(&hold), &basis)?;
            let resid = &held.y - &held.x * fit.m_hat.matrix().transpose();
            Ok(resid.norm_squared() / held.y.nrows() as f64)
        })()
        .map_err(|e| Error::Fold {
            fold,
            source: Box::new(e),
        })?;
        total += score;
    }
    Ok(total / k as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CVResult {
    pub best_c: usize,
    pub best_lambda: f64,
    pub c_values: Vec<usize>,
    pub lambda_values: Vec<f64>,
    /// `score_table[a][b]` is the score of `(c_values[a], lambda_values[b])`.
    pub score_table: Vec<Vec<f64>>,
    pub fold_assignment: Vec<usize>,
}

/// Scores every cell of the grid. Within each `c` the penalties run from
/// largest to smallest and each fold warm-starts from its previous solution.
pub fn grid_search(
    data: &Dataset,
    grid: &CVGrid,
    family: BasisFamily,
    opts: &SolverOptions,
) -> Result<CVResult> {
    grid.validate()?;
    let folds = make_folds(data.n(), grid.k_folds, grid.seed)?;
    let c_max = *grid.c_values.last().expect("validated non-empty");
    let basis = basis_matrix(BasisSpec::new(family, c_max)?, data.grid());
    let moments = SubjectMoments::new(data, &basis)?;

    let rows: Vec<Vec<f64>> = grid
        .c_values
        .par_iter()
        .map(|&c| score_row(&moments, c, &grid.lambda_values, &folds, grid.k_folds, opts))
        .collect::<Result<_>>()?;

    let mut best: Option<(usize, usize, f64)> = None;
    for (a, row) in rows.iter().enumerate() {
        for (b, &score) in row.iter().enumerate() {
            if !score.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite CV score at c = {}, lambda = {}",
                    grid.c_values[a], grid.lambda_values[b]
                )));
            }
            // Strict comparison keeps the smallest c, then the largest λ.
            if best.map_or(true, |(_, _, s)| score < s) {
                best = Some((a, b, score));
            }
        }
    }
    let (a, b, _) = best.expect("grid is non-empty");
    Ok(CVResult {
        best_c: grid.c_values[a],
        best_lambda: grid.lambda_values[b],
        c_values: grid.c_values.clone(),
        lambda_values: grid.lambda_values.clone(),
        score_table: rows,
        fold_assignment: folds,
    })
}

fn score_row(
    moments: &SubjectMoments,
    c: usize,
    lambdas: &[f64],
    folds: &[usize],
    k: usize,
    opts: &SolverOptions,
) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; lambdas.len()];
    for fold in 0..k {
        let (train, hold) = split(folds, fold);
        let wrap = |e| Error::Fold {
            fold,
            source: Box::new(e),
        };
        let ne_train = moments.normal_equations(c, &train).map_err(wrap)?;
        let ne_hold = moments.normal_equations(c, &hold).map_err(wrap)?;
        let mut warm: Option<CoefMatrix> = None;
        for (b, &lambda) in lambdas.iter().enumerate() {
            let fit = fit_fista(&ne_train, lambda, opts, warm.as_ref()).map_err(wrap)?;
            let d = fit.m_hat.matrix().transpose();
            sums[b] += (ne_hold.residual_sq(&d) / ne_hold.n_obs as f64).max(0.0);
            warm = Some(fit.m_hat);
        }
    }
    Ok(sums.into_iter().map(|s| s / k as f64).collect())
}

impl CVResult {
    pub fn best_score(&self) -> f64 {
        let a = self.c_values.iter().position(|&c| c == self.best_c).unwrap_or(0);
        let b = self
            .lambda_values
            .iter()
            .position(|&l| l == self.best_lambda)
            .unwrap_or(0);
        self.score_table[a][b]
    }

    /// Markdown score table, rows `c`, columns `λ`.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| c \\ lambda |");
        for l in &self.lambda_values {
            out.push_str(&format!(" {l:.4e} |"));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(self.lambda_values.len()));
        out.push('\n');
        for (c, row) in self.c_values.iter().zip(&self.score_table) {
            out.push_str(&format!("| {c} |"));
            for v in row {
                out.push_str(&format!(" {v:.6e} |"));
            }
            out.push('\n');
        }
        out
    }

    pub fn summary_line(&self) -> String {
        format!(
            "best c = {}, best lambda = {}, score = {}",
            self.best_c,
            fmt_f64(self.best_lambda),
            fmt_f64(self.best_score())
        )
    }
}
