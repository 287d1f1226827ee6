//! Synthetic data following the low-rank functional regression design and a
//! Monte Carlo driver around it.
//!
//! Each replicate draws covariates from `N(0, Σ)` with `Σ_{ab} = decay^{|a−b|}`,
//! AR(1) error curves with zero initial state, and scales the errors by a `ν`
//! chosen so that the realized signal-to-noise energy ratio equals the target.
//!
//! Seeding: a run with seed `r` draws covariates from ChaCha8 stream
//! [`STREAM_COVARIATES`] and errors from stream [`STREAM_ERRORS`] of
//! `ChaCha8Rng::seed_from_u64(r)`. Monte Carlo run `k` uses seed `base + k`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{basis_matrix, BasisFamily, BasisSpec, TimeGrid};
use crate::design::{subject_design, Dataset, SubjectMoments};
use crate::error::{Error, Result};
use crate::eval::{mise, DEFAULT_QUAD_POINTS};
use crate::model::{effective_rank, CoefficientFunctions, DEFAULT_RANK_TOL};
use crate::solver::{fit_fista, fit_ols, CoefMatrix, SolverOptions};
use crate::tuning::{
    full_data_lambda_dead, grid_search, lambda_ladder, CVGrid, DEFAULT_FOLDS, DEFAULT_LADDER_LEN,
    DEFAULT_LADDER_RATIO,
};

pub const STREAM_COVARIATES: u64 = 1;
pub const STREAM_ERRORS: u64 = 2;

/// Side length of the canonical shape images.
pub const SHAPE_SIZE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    #[serde(rename = "tshape", alias = "t")]
    TShape,
    Cross,
    /// Row-major `p × sc` coefficient image.
    Custom(Vec<Vec<f64>>),
}

impl Shape {
    pub fn label(&self) -> &'static str {
        match self {
            Shape::Square => "Square",
            Shape::TShape => "T",
            Shape::Cross => "Cross",
            Shape::Custom(_) => "Custom",
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Shape::Square => "square",
            Shape::TShape => "tshape",
            Shape::Cross => "cross",
            Shape::Custom(_) => "custom",
        })
    }
}

impl std::str::FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "square" => Ok(Shape::Square),
            "t" | "tshape" => Ok(Shape::TShape),
            "cross" => Ok(Shape::Cross),
            other => Err(Error::Validation(format!(
                "unknown shape `{other}` (expected square, tshape or cross)"
            ))),
        }
    }
}

/// Binary coefficient image for a named shape, or the custom matrix as given.
/// Rectangles are 1-based and inclusive on a 32 × 32 canvas.
pub fn make_shape_m(shape: &Shape, p: usize, sc: usize) -> Result<DMatrix<f64>> {
    let rects: &[(usize, usize, usize, usize)] = match shape {
        Shape::Custom(rows) => {
            if rows.len() != p || rows.iter().any(|r| r.len() != sc) {
                return Err(Error::DimensionMismatch(format!(
                    "custom shape must be {p}x{sc}"
                )));
            }
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Validation("custom shape has non-finite entries".into()));
            }
            return Ok(DMatrix::from_fn(p, sc, |r, c| rows[r][c]));
        }
        Shape::Square => &[(9, 24, 9, 24)],
        Shape::TShape => &[(5, 9, 7, 26), (5, 28, 14, 19)],
        Shape::Cross => &[(14, 19, 5, 28), (5, 28, 14, 19)],
    };
    if p != SHAPE_SIZE || sc != SHAPE_SIZE {
        return Err(Error::Validation(format!(
            "shape {} is defined on a 32x32 canvas but p = {p}, sc = {sc}; use a custom shape",
            shape.label()
        )));
    }
    let mut m = DMatrix::zeros(p, sc);
    for &(r0, r1, c0, c1) in rects {
        for r in r0..=r1 {
            for c in c0..=c1 {
                m[(r - 1, c - 1)] = 1.0;
            }
        }
    }
    Ok(m)
}

/// Weights for the slowly decaying coefficient study: `(1, 0.8, 0.6, 0.5)`
/// followed by `8 (h − 2)^{-4}` for `h = 5..=len`.
pub fn decaying_weights(len: usize) -> Vec<f64> {
    (1..=len)
        .map(|h| match h {
            1 => 1.0,
            2 => 0.8,
            3 => 0.6,
            4 => 0.5,
            _ => 8.0 * ((h - 2) as f64).powi(-4),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub c_true: usize,
    pub s: usize,
    pub shape: Shape,
    pub snr: f64,
    pub true_family: BasisFamily,
    pub ar_coef: f64,
    pub cov_decay: f64,
    pub seed: u64,
    /// Per-basis weights `ω_1..ω_{c_true}`; when set, basis `h` of covariate
    /// `j` takes column `(h − 1) mod c_shape` of block `j` of the shape image,
    /// scaled by `ω_h`, where `c_shape = image columns / s`.
    pub spectral_weights: Option<Vec<f64>>,
    /// Fixed noise scale in place of SNR calibration (`0` gives noiseless data).
    pub nu_override: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 100,
            p: 32,
            t: 256,
            c_true: 4,
            s: 8,
            shape: Shape::TShape,
            snr: 5.0,
            true_family: BasisFamily::Fourier,
            ar_coef: 0.3,
            cov_decay: 0.5,
            seed: 0,
            spectral_weights: None,
            nu_override: None,
        }
    }
}

impl SimConfig {
    /// `(n, p, T, c, s) = (100, 32, 256, 50, 4)` with [`decaying_weights`].
    pub fn infinite_dimensional(shape: Shape) -> Self {
        Self {
            c_true: 50,
            s: 4,
            shape,
            spectral_weights: Some(decaying_weights(50)),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 || self.t == 0 || self.c_true == 0 || self.s == 0 {
            return Err(Error::Validation("n, p, T, c_true and s must be positive".into()));
        }
        if self.nu_override.is_none() && !(self.snr > 0.0 && self.snr.is_finite()) {
            return Err(Error::Validation(format!("snr must be positive, got {}", self.snr)));
        }
        if let Some(nu) = self.nu_override {
            if !(nu >= 0.0 && nu.is_finite()) {
                return Err(Error::Validation(format!("nu_override must be >= 0, got {nu}")));
            }
        }
        if !(self.ar_coef.abs() < 1.0) {
            return Err(Error::Validation("ar_coef must satisfy |ar_coef| < 1".into()));
        }
        if !(self.cov_decay.abs() < 1.0) {
            return Err(Error::Validation("cov_decay must satisfy |cov_decay| < 1".into()));
        }
        if let Some(w) = &self.spectral_weights {
            if w.len() != self.c_true {
                return Err(Error::Validation(format!(
                    "{} spectral weights for c_true = {}",
                    w.len(),
                    self.c_true
                )));
            }
        }
        Ok(())
    }

    /// True coefficient matrix `M* ∈ ℝ^{p × s·c_true}`.
    pub fn true_coefficients(&self) -> Result<CoefMatrix> {
        let sc = self.s * self.c_true;
        let m = match &self.spectral_weights {
            None => make_shape_m(&self.shape, self.p, sc)?,
            Some(weights) => {
                let image_cols = match &self.shape {
                    Shape::Custom(rows) => rows.first().map_or(0, Vec::len),
                    _ => SHAPE_SIZE,
                };
                if image_cols == 0 || image_cols % self.s != 0 {
                    return Err(Error::Validation(format!(
                        "shape image with {image_cols} columns cannot be split into s = {} blocks",
                        self.s
                    )));
                }
                let image = make_shape_m(&self.shape, self.p, image_cols)?;
                let c_shape = image_cols / self.s;
                DMatrix::from_fn(self.p, sc, |l, col| {
                    let (j, h) = (col / self.c_true, col % self.c_true);
                    weights[h] * image[(l, j * c_shape + h % c_shape)]
                })
            }
        };
        CoefMatrix::new(m, self.s, self.c_true)
    }
}

pub fn gen_covariates(n: usize, s: usize, decay: f64, seed: u64) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_COVARIATES);
    covariates_from(n, s, decay, &mut rng)
}

fn covariates_from(n: usize, s: usize, decay: f64, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    if !(decay.abs() < 1.0) {
        return Err(Error::Domain("covariance decay must satisfy |decay| < 1".into()));
    }
    let sigma = DMatrix::from_fn(s, s, |a, b| decay.powi((a as i32 - b as i32).abs()));
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::Numerical("covariance matrix is not positive definite".into()))?;
    let l = chol.l();
    let z = DMatrix::from_fn(s, n, |_, _| StandardNormal.sample(rng));
    Ok((l * z).transpose())
}

/// AR(1) error curves `E(k) = φ E(k − 1) + ε_k`, `E(0) = 0`, one `p × T`
/// matrix per subject.
pub fn gen_ar1_errors(n: usize, p: usize, t: usize, ar_coef: f64, seed: u64) -> Result<Vec<DMatrix<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_ERRORS);
    gen_ar1_errors_with(n, p, t, ar_coef, || StandardNormal.sample(&mut rng))
}

/// As [`gen_ar1_errors`] with caller-supplied innovations, drawn subject by
/// subject, row by row, in time order.
pub fn gen_ar1_errors_with(
    n: usize,
    p: usize,
    t: usize,
    ar_coef: f64,
    mut innovation: impl FnMut() -> f64,
) -> Result<Vec<DMatrix<f64>>> {
    if !(ar_coef.abs() < 1.0) {
        return Err(Error::Domain("AR coefficient must satisfy |ar_coef| < 1".into()));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut e = DMatrix::zeros(p, t);
        for l in 0..p {
            let mut state = 0.0;
            for k in 0..t {
                state = ar_coef * state + innovation();
                e[(l, k)] = state;
            }
        }
        out.push(e);
    }
    Ok(out)
}

/// `ν = sqrt(Σ‖M* X_i‖² / (snr · Σ‖E_i‖²))`.
pub fn calibrate_nu(
    m_star: &CoefMatrix,
    designs: &[DMatrix<f64>],
    errors: &[DMatrix<f64>],
    target_snr: f64,
) -> Result<f64> {
    let signal: f64 = designs
        .iter()
        .map(|x| (m_star.matrix() * x).norm_squared())
        .sum();
    let noise: f64 = errors.iter().map(|e| e.norm_squared()).sum();
    nu_from_energies(signal, noise, target_snr)
}

fn nu_from_energies(signal: f64, noise: f64, target_snr: f64) -> Result<f64> {
    if !(target_snr > 0.0) {
        return Err(Error::Validation("target SNR must be positive".into()));
    }
    if !(signal > 0.0) {
        return Err(Error::Numerical("signal energy is zero".into()));
    }
    if !(noise > 0.0) {
        return Err(Error::Numerical("noise energy is zero".into()));
    }
    Ok((signal / (target_snr * noise)).sqrt())
}

#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub m_star: CoefMatrix,
    pub nu: f64,
    pub beta_true: CoefficientFunctions,
    pub realized_snr: f64,
}

/// Signal over noise energy recomputed from a dataset and its true
/// coefficients: `Σ‖M* X_i‖² / Σ‖Y_i − M* X_i‖²`.
pub fn realized_snr(data: &Dataset, truth: &CoefficientFunctions) -> Result<f64> {
    let basis = basis_matrix(BasisSpec::new(truth.family, truth.c())?, data.grid());
    let mut signal = 0.0;
    let mut noise = 0.0;
    for (i, y) in data.responses().iter().enumerate() {
        let fitted = truth.m_hat.matrix() * subject_design(&data.covariate_row(i), &basis)?;
        noise += (y - &fitted).norm_squared();
        signal += fitted.norm_squared();
    }
    Ok(signal / noise)
}

pub fn gen_dataset(cfg: &SimConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let m_star = cfg.true_coefficients()?;
    let grid = TimeGrid::uniform(cfg.t)?;
    let basis = basis_matrix(BasisSpec::new(cfg.true_family, cfg.c_true)?, &grid);

    let covariates = gen_covariates(cfg.n, cfg.s, cfg.cov_decay, cfg.seed)?;
    let errors = gen_ar1_errors(cfg.n, cfg.p, cfg.t, cfg.ar_coef, cfg.seed)?;

    let signals: Vec<DMatrix<f64>> = (0..cfg.n)
        .map(|i| {
            let x: Vec<f64> = covariates.row(i).iter().copied().collect();
            Ok(m_star.matrix() * subject_design(&x, &basis)?)
        })
        .collect::<Result<_>>()?;
    let signal_energy: f64 = signals.iter().map(|m| m.norm_squared()).sum();
    let noise_energy: f64 = errors.iter().map(|e| e.norm_squared()).sum();
    let nu = match cfg.nu_override {
        Some(nu) => nu,
        None => nu_from_energies(signal_energy, noise_energy, cfg.snr)?,
    };
    let responses: Vec<DMatrix<f64>> = signals
        .into_iter()
        .zip(&errors)
        .map(|(sig, e)| sig + e * nu)
        .collect();
    let data = Dataset::new(covariates, responses, grid)?;
    let beta_true = CoefficientFunctions::new(m_star.clone(), cfg.true_family);
    let snr = if nu == 0.0 {
        f64::INFINITY
    } else {
        realized_snr(&data, &beta_true)?
    };
    Ok((
        data,
        GroundTruth {
            m_star,
            nu,
            beta_true,
            realized_snr: snr,
        },
    ))
}

/// How the penalized estimator is tuned in each Monte Carlo replicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SievePlan {
    Fixed {
        c: usize,
        lambda: f64,
    },
    /// Grid search over `c_values` and a log ladder of `n_lambdas` penalties
    /// from the full-data dead zone down to `lambda_ratio` times it.
    CrossValidated {
        c_values: Vec<usize>,
        #[serde(default = "default_ladder_len")]
        n_lambdas: usize,
        #[serde(default = "default_ladder_ratio")]
        lambda_ratio: f64,
        #[serde(default = "default_folds")]
        k_folds: usize,
    },
}

fn default_ladder_len() -> usize {
    DEFAULT_LADDER_LEN
}

fn default_ladder_ratio() -> f64 {
    DEFAULT_LADDER_RATIO
}

fn default_folds() -> usize {
    DEFAULT_FOLDS
}

impl SievePlan {
    pub fn cross_validated(c_values: Vec<usize>) -> Self {
        SievePlan::CrossValidated {
            c_values,
            n_lambdas: DEFAULT_LADDER_LEN,
            lambda_ratio: DEFAULT_LADDER_RATIO,
            k_folds: DEFAULT_FOLDS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitPlan {
    pub sieve: SievePlan,
    pub fit_family: BasisFamily,
    /// Also fit unpenalized least squares at the sieve's truncation.
    pub include_ols: bool,
    pub solver: SolverOptions,
    pub n_quad: usize,
    pub rank_tol: f64,
}

impl Default for FitPlan {
    fn default() -> Self {
        Self {
            sieve: SievePlan::cross_validated((2..=8).collect()),
            fit_family: BasisFamily::Fourier,
            include_ols: true,
            solver: SolverOptions::default(),
            n_quad: DEFAULT_QUAD_POINTS,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub selected_c: usize,
    pub selected_lambda: f64,
    pub rank: usize,
    pub realized_snr: f64,
    pub mise_sieve: Vec<f64>,
    pub mise_ols: Option<Vec<f64>>,
}

/// Fits one generated dataset according to `plan` and scores it against the
/// truth.
pub fn evaluate_replicate(data: &Dataset, truth: &GroundTruth, plan: &FitPlan, seed: u64) -> Result<RunRecord> {
    let (c, lambda) = match &plan.sieve {
        SievePlan::Fixed { c, lambda } => (*c, *lambda),
        SievePlan::CrossValidated {
            c_values,
            n_lambdas,
            lambda_ratio,
            k_folds,
        } => {
            let c_max = c_values.iter().copied().max().ok_or_else(|| {
                Error::Validation("cross-validation plan has no c values".into())
            })?;
            let top = full_data_lambda_dead(data, c_max, plan.fit_family)?;
            let ladder = lambda_ladder(top, *n_lambdas, *lambda_ratio)?;
            let grid = CVGrid::new(c_values.clone(), ladder, *k_folds, seed)?;
            let cv = grid_search(data, &grid, plan.fit_family, &plan.solver)?;
            (cv.best_c, cv.best_lambda)
        }
    };
    let basis = basis_matrix(BasisSpec::new(plan.fit_family, c)?, data.grid());
    let all: Vec<usize> = (0..data.n()).collect();
    let ne = SubjectMoments::new(data, &basis)?.normal_equations(c, &all)?;
    let fit = fit_fista(&ne, lambda, &plan.solver, None)?;
    let sieve_cf = CoefficientFunctions::new(fit.m_hat, plan.fit_family);
    let mise_sieve = mise(&truth.beta_true, &sieve_cf, plan.n_quad)?.per_j;
    let rank = effective_rank(&sieve_cf.m_hat, plan.rank_tol);
    let mise_ols = if plan.include_ols {
        let ols = fit_ols(&ne)?;
        let ols_cf = CoefficientFunctions::new(ols.m_hat, plan.fit_family);
        Some(mise(&truth.beta_true, &ols_cf, plan.n_quad)?.per_j)
    } else {
        None
    };
    Ok(RunRecord {
        seed,
        selected_c: c,
        selected_lambda: lambda,
        rank,
        realized_snr: truth.realized_snr,
        mise_sieve,
        mise_ols,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub mise_mean: Vec<f64>,
    pub mise_se: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MCReport {
    pub config: SimConfig,
    pub plan: FitPlan,
    pub n_runs: usize,
    /// False when `n_runs == 1`; standard errors are then reported as 0.
    pub se_defined: bool,
    pub sieve: MethodSummary,
    pub ols: Option<MethodSummary>,
    pub mean_selected_c: f64,
    pub se_selected_c: f64,
    pub mean_rank: f64,
    pub se_rank: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runs: Option<Vec<RunRecord>>,
}

/// Mean and standard error (sample SD over `√n`), with SE 0 when `n == 1`.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn summarize(per_run: &[&Vec<f64>]) -> MethodSummary {
    let s = per_run[0].len();
    let (mise_mean, mise_se) = (0..s)
        .map(|j| mean_se(&per_run.iter().map(|v| v[j]).collect::<Vec<_>>()))
        .unzip();
    MethodSummary { mise_mean, mise_se }
}

pub fn summarize_runs(cfg: &SimConfig, plan: &FitPlan, runs: Vec<RunRecord>, keep_runs: bool) -> MCReport {
    let sieve = summarize(&runs.iter().map(|r| &r.mise_sieve).collect::<Vec<_>>());
    let ols = if runs.iter().all(|r| r.mise_ols.is_some()) && !runs.is_empty() {
        Some(summarize(
            &runs.iter().filter_map(|r| r.mise_ols.as_ref()).collect::<Vec<_>>(),
        ))
    } else {
        None
    };
    let (mean_selected_c, se_selected_c) =
        mean_se(&runs.iter().map(|r| r.selected_c as f64).collect::<Vec<_>>());
    let (mean_rank, se_rank) = mean_se(&runs.iter().map(|r| r.rank as f64).collect::<Vec<_>>());
    MCReport {
        config: cfg.clone(),
        plan: plan.clone(),
        n_runs: runs.len(),
        se_defined: runs.len() > 1,
        sieve,
        ols,
        mean_selected_c,
        se_selected_c,
        mean_rank,
        se_rank,
        runs: keep_runs.then_some(runs),
    }
}

/// Runs `n_runs` replicates with seeds `cfg.seed + r` and aggregates them in
/// run order.
pub fn run_monte_carlo(cfg: &SimConfig, plan: &FitPlan, n_runs: usize, keep_runs: bool) -> Result<MCReport> {
    if n_runs == 0 {
        return Err(Error::Validation("n_runs must be >= 1".into()));
    }
    cfg.validate()?;
    let records: Vec<Result<RunRecord>> = (0..n_runs)
        .into_par_iter()
        .map(|r| {
            let seed = cfg.seed.wrapping_add(r as u64);
            let run_cfg = SimConfig {
                seed,
                ..cfg.clone()
            };
            let (data, truth) = gen_dataset(&run_cfg)?;
            evaluate_replicate(&data, &truth, plan, seed)
        })
        .collect();
    let mut runs = Vec::with_capacity(n_runs);
    for (r, rec) in records.into_iter().enumerate() {
        runs.push(rec.map_err(|e| Error::Run {
            run: r,
            source: Box::new(e),
        })?);
    }
    Ok(summarize_runs(cfg, plan, runs, keep_runs))
}

fn cell(mean: f64, se: f64) -> String {
    format!("{:.3}({:.3})", mean * 100.0, se * 100.0)
}

/// Markdown tables with rows `β_1..β_s` and one column per labelled report.
/// MISE values are in units of `10⁻²` as `mean(SE)`.
pub fn mc_markdown(reports: &[(String, &MCReport)]) -> String {
    let mut out = String::new();
    let s = reports.first().map_or(0, |(_, r)| r.sieve.mise_mean.len());
    let header = |title: &str| {
        let mut h = format!("| {title} |");
        for (label, _) in reports {
            h.push_str(&format!(" {label} |"));
        }
        h.push_str("\n|---|");
        h.push_str(&"---|".repeat(reports.len()));
        h.push('\n');
        h
    };
    let mut section = |title: &str, pick: &dyn Fn(&MCReport) -> Option<&MethodSummary>| {
        if reports.iter().any(|(_, r)| pick(r).is_none()) {
            return;
        }
        out.push_str(&header(title));
        for j in 0..s {
            out.push_str(&format!("| beta_{} |", j + 1));
            for (_, r) in reports {
                let m = pick(r).expect("checked above");
                out.push_str(&format!(" {} |", cell(m.mise_mean[j], m.mise_se[j])));
            }
            out.push('\n');
        }
        out.push('\n');
    };
    section("MISE(sieve) (10^-2)", &|r| Some(&r.sieve));
    section("MISE(OLS) (10^-2)", &|r| r.ols.as_ref());
    out.push_str(&header("Diagnostics"));
    out.push_str("| rank |");
    for (_, r) in reports {
        out.push_str(&format!(" {:.3}({:.3}) |", r.mean_rank, r.se_rank));
    }
    out.push_str("\n| selected c |");
    for (_, r) in reports {
        out.push_str(&format!(" {:.3}({:.3}) |", r.mean_selected_c, r.se_selected_c));
    }
    out.push('\n');
    if reports.iter().any(|(_, r)| !r.se_defined) {
        out.push_str("\nStandard errors are undefined for a single run and shown as 0.\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::rank_of_values;
    use crate::solver::singular_values;

    fn small_cfg() -> SimConfig {
        SimConfig {
            n: 30,
            p: 6,
            t: 32,
            c_true: 2,
            s: 3,
            shape: Shape::Custom(
                (0..6)
                    .map(|l| (0..6).map(|c| if l < 3 && c % 2 == 0 { 1.0 } else { 0.0 }).collect())
                    .collect(),
            ),
            ..SimConfig::default()
        }
    }

    #[test]
    fn default_config_dimensions() {
        let cfg = SimConfig::default();
        assert_eq!((cfg.n, cfg.p, cfg.t, cfg.c_true, cfg.s), (100, 32, 256, 4, 8));
        assert_eq!(cfg.ar_coef, 0.3);
        assert_eq!(cfg.cov_decay, 0.5);
    }

    #[test]
    fn shape_ranks() {
        let expect = [(Shape::Square, 1), (Shape::TShape, 2), (Shape::Cross, 2)];
        for (shape, rank) in expect {
            let m = make_shape_m(&shape, 32, 32).unwrap();
            assert_eq!(rank_of_values(&singular_values(&m), 1e-10), rank, "{shape:?}");
            assert!(m.iter().all(|&v| v == 0.0 || v == 1.0));
        }
        let sq = make_shape_m(&Shape::Square, 32, 32).unwrap();
        assert_eq!(sq.sum(), 256.0);
        assert_eq!(sq[(8, 8)], 1.0);
        assert_eq!(sq[(7, 8)], 0.0);
        assert!(make_shape_m(&Shape::Cross, 16, 32).is_err());
    }

    #[test]
    fn covariates_identity_when_decay_zero() {
        let x = gen_covariates(10_000, 3, 0.0, 1).unwrap();
        let n = x.nrows() as f64;
        for a in 0..3 {
            for b in (a + 1)..3 {
                let ca = x.column(a);
                let cb = x.column(b);
                let rho = ca.dot(&cb) / (ca.norm() * cb.norm());
                assert!(rho.abs() < 0.1);
            }
        }
        let x = gen_covariates(10_000, 1, 0.5, 2).unwrap();
        let mean = x.sum() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn covariate_moments_match_toeplitz() {
        let n = 100_000;
        let s = 4;
        let x = gen_covariates(n, s, 0.5, 3).unwrap();
        let cov = x.transpose() * &x / n as f64;
        for a in 0..s {
            for b in 0..s {
                let target = 0.5f64.powi((a as i32 - b as i32).abs());
                assert!((cov[(a, b)] - target).abs() < 0.02, "({a},{b}) {}", cov[(a, b)]);
            }
        }
    }

    #[test]
    fn ar1_special_cases() {
        let e = gen_ar1_errors_with(2, 3, 10, 0.3, || 0.0).unwrap();
        assert!(e.iter().all(|m| m.iter().all(|&v| v == 0.0)));
        let mut k = 0.0;
        let e = gen_ar1_errors_with(1, 1, 3, 0.5, || {
            k += 1.0;
            k
        })
        .unwrap();
        // 1, 0.5*1 + 2, 0.5*2.5 + 3
        assert_eq!(e[0].as_slice(), &[1.0, 2.5, 4.25]);
        let mut draws = vec![];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = gen_ar1_errors_with(2, 2, 4, 0.0, || {
            let v: f64 = StandardNormal.sample(&mut rng);
            draws.push(v);
            v
        })
        .unwrap();
        let flat: Vec<f64> = e.iter().flat_map(|m| m.transpose().iter().copied().collect::<Vec<_>>()).collect();
        assert_eq!(flat, draws);
        assert!(gen_ar1_errors(1, 1, 1, 1.0, 0).is_err());
    }

    #[test]
    fn ar1_moments() {
        let e = gen_ar1_errors(100, 32, 256, 0.3, 5).unwrap();
        let mut lag0 = 0.0;
        let mut lag1 = 0.0;
        let mut var_late = 0.0;
        let mut count_late = 0.0;
        for m in &e {
            for l in 0..32 {
                for k in 0..256 {
                    let v = m[(l, k)];
                    lag0 += v * v;
                    if k > 0 {
                        lag1 += v * m[(l, k - 1)];
                    }
                    if k >= 20 {
                        var_late += v * v;
                        count_late += 1.0;
                    }
                }
            }
        }
        let acf = lag1 / lag0;
        assert!((acf - 0.3).abs() < 0.02, "acf {acf}");
        let stationary = 1.0 / (1.0 - 0.09);
        assert!(((var_late / count_late) / stationary - 1.0).abs() < 0.02);
    }

    #[test]
    fn nu_hand_cases() {
        assert_eq!(nu_from_energies(2.0, 2.0, 1.0).unwrap(), 1.0);
        assert_eq!(nu_from_energies(3.0, 3.0, 4.0).unwrap(), 0.5);
        assert!(nu_from_energies(0.0, 1.0, 1.0).is_err());
        assert!(nu_from_energies(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn calibrate_nu_matches_generator() {
        let cfg = small_cfg();
        let (data, truth) = gen_dataset(&cfg).unwrap();
        let basis = basis_matrix(BasisSpec::new(cfg.true_family, cfg.c_true).unwrap(), data.grid());
        let designs: Vec<DMatrix<f64>> = (0..cfg.n)
            .map(|i| subject_design(&data.covariate_row(i), &basis).unwrap())
            .collect();
        let errors = gen_ar1_errors(cfg.n, cfg.p, cfg.t, cfg.ar_coef, cfg.seed).unwrap();
        let nu = calibrate_nu(&truth.m_star, &designs, &errors, cfg.snr).unwrap();
        assert!((nu - truth.nu).abs() < 1e-12 * nu);
        assert!((truth.realized_snr - cfg.snr).abs() < 1e-9);
    }

    #[test]
    fn default_design_snr_is_exact() {
        for snr in [1.0, 5.0, 10.0] {
            let cfg = SimConfig { snr, seed: 11, ..SimConfig::default() };
            let (data, truth) = gen_dataset(&cfg).unwrap();
            let again = realized_snr(&data, &truth.beta_true).unwrap();
            assert!((again - snr).abs() < 1e-9, "{again}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let (a, _) = gen_dataset(&cfg).unwrap();
        let (b, _) = gen_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        let (c, _) = gen_dataset(&SimConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_hook_gives_exact_signal() {
        let cfg = SimConfig { nu_override: Some(0.0), ..small_cfg() };
        let (data, truth) = gen_dataset(&cfg).unwrap();
        let basis = basis_matrix(BasisSpec::new(cfg.true_family, cfg.c_true).unwrap(), data.grid());
        for i in 0..cfg.n {
            let x = subject_design(&data.covariate_row(i), &basis).unwrap();
            assert_eq!(data.responses()[i], truth.m_star.matrix() * x);
        }
        let all: Vec<usize> = (0..cfg.n).collect();
        let ne = SubjectMoments::new(&data, &basis).unwrap().normal_equations(cfg.c_true, &all).unwrap();
        let ols = fit_ols(&ne).unwrap();
        assert!((ols.m_hat.matrix() - truth.m_star.matrix()).amax() < 1e-8);
    }

    #[test]
    fn spectral_weights_layout() {
        let cfg = SimConfig::infinite_dimensional(Shape::Cross);
        let m = cfg.true_coefficients().unwrap();
        assert_eq!((m.p(), m.s(), m.c()), (32, 4, 50));
        let image = make_shape_m(&Shape::Cross, 32, 32).unwrap();
        let w = decaying_weights(50);
        assert!((w[4] - 8.0 / 81.0).abs() < 1e-15);
        for l in [4usize, 13, 20] {
            for j in 0..4 {
                for h in 0..50 {
                    let expected = w[h] * image[(l, j * 8 + h % 8)];
                    assert_eq!(m.matrix()[(l, j * 50 + h)], expected);
                }
            }
        }
    }

    #[test]
    fn monte_carlo_single_run_and_noiseless() {
        let cfg = SimConfig { nu_override: Some(0.0), ..small_cfg() };
        let plan = FitPlan {
            sieve: SievePlan::Fixed { c: 2, lambda: 0.0 },
            solver: SolverOptions { rel_tol: 1e-15, max_iters: 20_000, ..SolverOptions::default() },
            ..FitPlan::default()
        };
        let report = run_monte_carlo(&cfg, &plan, 1, true).unwrap();
        assert!(!report.se_defined);
        assert!(report.sieve.mise_se.iter().all(|&v| v == 0.0));
        let run = &report.runs.as_ref().unwrap()[0];
        assert_eq!(report.sieve.mise_mean, run.mise_sieve);
        let report = run_monte_carlo(&cfg, &plan, 2, false).unwrap();
        assert!(report.sieve.mise_mean.iter().all(|&v| v < 1e-10));
        assert!(report.ols.as_ref().unwrap().mise_mean.iter().all(|&v| v < 1e-10));
        let md = mc_markdown(&[("Custom".into(), &report)]);
        assert!(md.contains("| beta_3 |"));
    }

    #[test]
    fn monte_carlo_reports_failing_run() {
        let cfg = small_cfg();
        let plan = FitPlan {
            sieve: SievePlan::Fixed { c: 2, lambda: -1.0 },
            ..FitPlan::default()
        };
        let err = run_monte_carlo(&cfg, &plan, 2, false).unwrap_err();
        assert!(matches!(err, Error::Run { run: 0, .. }));
    }

    #[test]
    fn mean_se_formula() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // sample sd = sqrt(5/3), se = sd / 2
        assert!((se - (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(mean_se(&[7.0]), (7.0, 0.0));
    }
}
