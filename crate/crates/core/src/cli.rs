//! Command-line interface: `simulate`, `fit`, `cv`, `evaluate` and `mc`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::basis::{basis_matrix, BasisFamily, BasisSpec, TimeGrid};
use crate::design::{Dataset, SubjectMoments};
use crate::error::{Error, Result};
use crate::eval::{mise, DEFAULT_QUAD_POINTS};
use crate::io::{load_coefficients, read_dataset, read_json, write_dataset, write_json, write_text, CoefficientsFile};
use crate::model::{effective_rank, scree, scree_csv, CoefficientFunctions, DEFAULT_RANK_TOL};
use crate::simulation::{gen_dataset, mc_markdown, run_monte_carlo, FitPlan, MCReport, Shape, SievePlan, SimConfig};
use crate::solver::{fit_fista, fit_ols, fit_ridge, FitResult, SolverOptions};
use crate::tuning::{grid_search, lambda_ladder, full_data_lambda_dead, CVGrid, CVResult, DEFAULT_FOLDS, DEFAULT_LADDER_LEN, DEFAULT_LADDER_RATIO};

/// Environment variable consulted for the seed when `--seed` is absent.
pub const SEED_ENV: &str = "LOWRANK_SEED";

#[derive(Parser, Debug)]
#[command(name = "fmlr", version, about = "Low-rank functional-response regression")]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with known coefficient curves.
    Simulate(SimulateArgs),
    /// Fit the penalized estimator (or least squares) at a fixed `c`.
    Fit(FitArgs),
    /// Cross-validate over `(c, λ)` and refit at the selected cell.
    Cv(CvArgs),
    /// Integrated squared error of a fit against known curves.
    Evaluate(EvaluateArgs),
    /// Monte Carlo study over shapes and signal-to-noise ratios.
    Mc(McArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// JSON simulation config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub shape: Option<Shape>,
    #[arg(long)]
    pub snr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Directory holding covariates.csv and responses.csv.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "fourier")]
    pub family: BasisFamily,
    /// Center covariates and scale each response coordinate before fitting.
    #[arg(long)]
    pub standardize: bool,
    /// JSON solver options (`max_iters`, `rel_tol`, `min_iters`).
    #[arg(long)]
    pub solver: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub c: usize,
    #[arg(long, conflicts_with_all = ["ols", "ridge"])]
    pub lambda: Option<f64>,
    /// Unpenalized least squares.
    #[arg(long)]
    pub ols: bool,
    /// Ridge-stabilized least squares with this penalty.
    #[arg(long, conflicts_with = "ols")]
    pub ridge: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', default_values_t = vec![2usize, 3, 4, 5, 6, 7, 8])]
    pub c_values: Vec<usize>,
    /// Explicit penalties (strictly decreasing); defaults to a log ladder from
    /// the full-data zero threshold.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_LADDER_LEN)]
    pub n_lambdas: usize,
    #[arg(long, default_value_t = DEFAULT_LADDER_RATIO)]
    pub lambda_ratio: f64,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    pub folds: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// JSON with true coefficients (e.g. `truth.json` from `simulate`).
    #[arg(long)]
    pub truth: PathBuf,
    /// JSON with estimated coefficients (e.g. `fit.json`).
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long, default_value_t = DEFAULT_QUAD_POINTS)]
    pub n_quad: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct McArgs {
    /// JSON simulation config used as the base for every cell.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON fit plan (sieve tuning, basis family, solver options).
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub runs: usize,
    /// Named shapes to run; defaults to square, tshape and cross, or to the
    /// config's own shape when that is a custom matrix.
    #[arg(long, value_delimiter = ',')]
    pub shapes: Option<Vec<Shape>>,
    #[arg(long, value_delimiter = ',')]
    pub snrs: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Include per-run records in the JSON report.
    #[arg(long)]
    pub keep_runs: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Run metadata written next to every output. Contains no timestamps so that
/// repeated runs produce identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
}

impl Provenance {
    fn new(command: &str, seed: Option<u64>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub coefficients: CoefficientsFile,
    pub nu: f64,
    pub realized_snr: f64,
    pub config: SimConfig,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitFile {
    pub method: String,
    pub lambda: f64,
    pub standardized: bool,
    pub iterations: usize,
    pub converged: bool,
    pub final_objective: f64,
    pub objective_trace: Vec<f64>,
    pub singular_values: Vec<f64>,
    pub effective_rank: usize,
    pub coefficients: CoefficientsFile,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvFile {
    pub cv: CVResult,
    pub standardized: bool,
    pub family: BasisFamily,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McCell {
    pub shape: Shape,
    pub snr: f64,
    pub report: MCReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McFile {
    pub runs: usize,
    pub cells: Vec<McCell>,
    pub provenance: Provenance,
}

/// Flag, then `LOWRANK_SEED`, then the value from the config file.
pub fn resolve_seed(flag: Option<u64>, file: u64) -> Result<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Validation(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(file),
    }
}

fn load_sim_config(path: Option<&Path>) -> Result<SimConfig> {
    match path {
        Some(p) => read_json(p),
        None => Ok(SimConfig::default()),
    }
}

fn load_solver(path: Option<&Path>) -> Result<SolverOptions> {
    match path {
        Some(p) => read_json(p),
        None => Ok(SolverOptions::default()),
    }
}

fn load_data(args: &DataArgs) -> Result<Dataset> {
    let data = read_dataset(&args.data)?;
    Ok(if args.standardize { data.standardized() } else { data })
}

fn write_fit_outputs(
    out: &Path,
    method: &str,
    fit: FitResult,
    family: BasisFamily,
    grid: &TimeGrid,
    standardized: bool,
    provenance: Provenance,
) -> Result<()> {
    let rank = effective_rank(&fit.m_hat, DEFAULT_RANK_TOL);
    let k = fit.m_hat.p().min(fit.m_hat.matrix().ncols());
    let scree_values = scree(&fit.m_hat, k);
    let final_objective = fit.final_objective();
    let cf = CoefficientFunctions::new(fit.m_hat, family);
    write_text(&out.join("curves.csv"), &cf.curves_csv(grid)?)?;
    write_text(&out.join("scree.csv"), &scree_csv(&scree_values))?;
    let file = FitFile {
        method: method.to_string(),
        lambda: fit.lambda_used,
        standardized,
        iterations: fit.iterations,
        converged: fit.converged,
        final_objective,
        objective_trace: fit.objective_trace,
        singular_values: fit.singular_values,
        effective_rank: rank,
        coefficients: CoefficientsFile::from_functions(&cf),
        provenance,
    };
    write_json(&out.join("fit.json"), &file)
}

fn fit_at(
    data: &Dataset,
    family: BasisFamily,
    c: usize,
    method: &FitMethod,
    opts: &SolverOptions,
) -> Result<FitResult> {
    let basis = basis_matrix(BasisSpec::new(family, c)?, data.grid());
    let all: Vec<usize> = (0..data.n()).collect();
    let ne = SubjectMoments::new(data, &basis)?.normal_equations(c, &all)?;
    match method {
        FitMethod::Penalized(lambda) => fit_fista(&ne, *lambda, opts, None),
        FitMethod::Ols => fit_ols(&ne),
        FitMethod::Ridge(r) => fit_ridge(&ne, *r),
    }
}

enum FitMethod {
    Penalized(f64),
    Ols,
    Ridge(f64),
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let mut cfg = load_sim_config(args.config.as_deref())?;
    if let Some(shape) = &args.shape {
        cfg.shape = shape.clone();
    }
    if let Some(snr) = args.snr {
        cfg.snr = snr;
    }
    cfg.seed = resolve_seed(args.seed, cfg.seed)?;
    let (data, truth) = gen_dataset(&cfg)?;
    write_dataset(&args.out, &data)?;
    let file = TruthFile {
        coefficients: CoefficientsFile::from_functions(&truth.beta_true),
        nu: truth.nu,
        realized_snr: truth.realized_snr,
        config: cfg.clone(),
        provenance: Provenance::new("simulate", Some(cfg.seed)),
    };
    write_json(&args.out.join("truth.json"), &file)?;
    println!(
        "wrote {} subjects to {} (nu = {}, snr = {})",
        data.n(),
        args.out.display(),
        truth.nu,
        truth.realized_snr
    );
    Ok(())
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let data = load_data(&args.data)?;
    let opts = load_solver(args.data.solver.as_deref())?;
    let (method, label) = match (args.lambda, args.ols, args.ridge) {
        (_, true, _) => (FitMethod::Ols, "ols"),
        (_, _, Some(r)) => (FitMethod::Ridge(r), "ridge"),
        (Some(l), _, _) => (FitMethod::Penalized(l), "nuclear"),
        (None, false, None) => {
            return Err(Error::Validation(
                "fit needs one of --lambda, --ols or --ridge".into(),
            ))
        }
    };
    let fit = fit_at(&data, args.data.family, args.c, &method, &opts)?;
    println!(
        "{label} fit: c = {}, lambda = {}, iterations = {}, converged = {}",
        args.c, fit.lambda_used, fit.iterations, fit.converged
    );
    write_fit_outputs(
        &args.out,
        label,
        fit,
        args.data.family,
        data.grid(),
        args.data.standardize,
        Provenance::new("fit", None),
    )
}

fn cmd_cv(args: &CvArgs) -> Result<()> {
    let data = load_data(&args.data)?;
    let opts = load_solver(args.data.solver.as_deref())?;
    let seed = resolve_seed(args.seed, 0)?;
    let lambdas = match &args.lambdas {
        Some(l) => l.clone(),
        None => {
            let c_max = args.c_values.iter().copied().max().unwrap_or(1);
            let top = full_data_lambda_dead(&data, c_max, args.data.family)?;
            lambda_ladder(top, args.n_lambdas, args.lambda_ratio)?
        }
    };
    let grid = CVGrid::new(args.c_values.clone(), lambdas, args.folds, seed)?;
    let cv = grid_search(&data, &grid, args.data.family, &opts)?;
    println!("{}", cv.summary_line());
    write_text(&args.out.join("cv.md"), &cv.to_markdown())?;
    let fit = fit_at(
        &data,
        args.data.family,
        cv.best_c,
        &FitMethod::Penalized(cv.best_lambda),
        &opts,
    )?;
    let provenance = Provenance::new("cv", Some(seed));
    write_fit_outputs(
        &args.out,
        "nuclear",
        fit,
        args.data.family,
        data.grid(),
        args.data.standardize,
        provenance.clone(),
    )?;
    write_json(
        &args.out.join("cv.json"),
        &CvFile {
            cv,
            standardized: args.data.standardize,
            family: args.data.family,
            provenance,
        },
    )
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let truth = load_coefficients(&args.truth)?;
    let fit = load_coefficients(&args.fit)?;
    let report = mise(&truth, &fit, args.n_quad)?;
    let md = report.to_markdown();
    match &args.out {
        Some(dir) => {
            write_json(&dir.join("mise.json"), &report)?;
            write_text(&dir.join("mise.md"), &md)?;
        }
        None => print!("{md}"),
    }
    Ok(())
}

fn cmd_mc(args: &McArgs) -> Result<()> {
    let mut base = load_sim_config(args.config.as_deref())?;
    base.seed = resolve_seed(args.seed, base.seed)?;
    let plan: FitPlan = match &args.plan {
        Some(p) => read_json(p)?,
        None => FitPlan::default(),
    };
    if let SievePlan::CrossValidated { c_values, .. } = &plan.sieve {
        if c_values.is_empty() {
            return Err(Error::Validation("plan has an empty c grid".into()));
        }
    }
    let snrs = args.snrs.clone().unwrap_or_else(|| vec![base.snr]);
    let shapes = match (&args.shapes, &base.shape) {
        (Some(s), _) => s.clone(),
        (None, Shape::Custom(_)) => vec![base.shape.clone()],
        (None, _) => vec![Shape::Square, Shape::TShape, Shape::Cross],
    };
    let mut cells = Vec::new();
    let mut md = String::new();
    for &snr in &snrs {
        let mut row = Vec::new();
        for shape in &shapes {
            let cfg = SimConfig {
                shape: shape.clone(),
                snr,
                ..base.clone()
            };
            let report = run_monte_carlo(&cfg, &plan, args.runs, args.keep_runs)?;
            eprintln!(
                "snr {snr}, {}: mean selected c {:.3}, mean rank {:.3}",
                shape.label(),
                report.mean_selected_c,
                report.mean_rank
            );
            row.push(McCell {
                shape: shape.clone(),
                snr,
                report,
            });
        }
        md.push_str(&format!("## SNR = {snr}\n\n"));
        let labelled: Vec<(String, &MCReport)> = row
            .iter()
            .map(|c| (c.shape.label().to_string(), &c.report))
            .collect();
        md.push_str(&mc_markdown(&labelled));
        md.push('\n');
        cells.extend(row);
    }
    write_text(&args.out.join("mc.md"), &md)?;
    write_json(
        &args.out.join("mc.json"),
        &McFile {
            runs: args.runs,
            cells,
            provenance: Provenance::new("mc", Some(base.seed)),
        },
    )?;
    print!("{md}");
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(Error::Validation("--threads must be >= 1".into()));
        }
        // A second call within one process keeps the existing pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Mc(a) => cmd_mc(a),
    }
}

/// Parses arguments and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
