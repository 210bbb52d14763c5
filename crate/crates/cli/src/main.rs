//! Command-line front end: WGEE fitting, joint model selection, and Monte
//! Carlo simulation experiments over longitudinal data with dropout.
//!
//! Exit codes: 0 success; 1 fit or numeric failure; 2 data validation error;
//! 64 usage error; 65 malformed scenario file; 73 output not writable.
//! Results go to stdout, diagnostics to stderr.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use elgee::data::{load_long_csv, ColumnSchema, LongitudinalDataset, MeanModelSpec, OutcomeFamily};
use elgee::dropout::{fit_dropout, hazard_design, DropoutFit, HazardSpec};
use elgee::selection::{
    enumerate_candidates, full_union_spec, select_with_dropout, CandidatePolicy,
};
use elgee::simlab::{parse_scenarios, run_monte_carlo, standard_candidates, SimError};
use elgee::wgee::{sandwich_variance, wgee_fit, CorrelationKind};

const EXIT_FIT: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_USAGE: u8 = 64;
const EXIT_SCENARIO: u8 = 65;
const EXIT_CANTCREAT: u8 = 73;

#[derive(Parser)]
#[command(
    name = "elgee",
    version,
    about = "Weighted GEE fitting and joint mean/correlation model selection for longitudinal data with dropout"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one weighted GEE model and report coefficients with robust
    /// standard errors.
    Fit(FitArgs),
    /// Evaluate JEAIC/JEBIC/MLIC/QICWr over a candidate grid and report the
    /// per-criterion winners.
    Select(SelectArgs),
    /// Run Monte Carlo selection-rate experiments from a scenario file.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Long-format CSV with one row per (subject, occasion).
    #[arg(long)]
    data: PathBuf,
    /// Column-mapping config (`key = value`); defaults to the id/time/y plus
    /// x*/h* header convention.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Outcome family: auto, binary, or gaussian.
    #[arg(long, default_value = "auto")]
    family: String,
    /// Number of lagged outcomes in the dropout hazard (default: T - 1).
    #[arg(long)]
    dropout_lags: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Mean-model covariates as a comma list of column names, or `all`.
    #[arg(long, default_value = "all")]
    mean: String,
    /// Working correlation structure: ind, exc, ar1, stationary, un.
    #[arg(long, default_value = "exc")]
    structure: String,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Candidate mean models, one comma list of covariate names per line
    /// (`1` for intercept-only). Default: all subsets with intercept.
    #[arg(long)]
    candidates: Option<PathBuf>,
    /// Comma list of structures to cross with the mean models.
    #[arg(long, default_value = "ind,exc,ar1")]
    structures: String,
    /// Write the criterion table as TSV to this path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: ELGEE_JOBS or all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario file: `key = value` lines with one `[section]` per scenario.
    #[arg(long)]
    scenario: PathBuf,
    /// Override the master seed of every scenario in the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for per-scenario rate-table TSVs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: ELGEE_JOBS or all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = err.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{err}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let code = match cli.command {
        Command::Fit(args) => cmd_fit(&args),
        Command::Select(args) => cmd_select(&args),
        Command::Simulate(args) => cmd_simulate(&args),
    };
    match code {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}

fn fail(code: u8, message: impl std::fmt::Display) -> u8 {
    eprintln!("error: {message}");
    code
}

fn jobs_from(cli_jobs: Option<usize>) -> usize {
    cli_jobs
        .or_else(|| {
            std::env::var("ELGEE_JOBS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .filter(|&j| j > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

fn with_pool<T: Send>(jobs: usize, run: impl FnOnce() -> T + Send) -> Result<T, u8> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| fail(EXIT_FIT, format_args!("thread pool: {e}")))?;
    Ok(pool.install(run))
}

fn load_dataset(args: &DataArgs) -> Result<LongitudinalDataset, u8> {
    let raw = fs::read_to_string(&args.data)
        .map_err(|e| fail(EXIT_DATA, format_args!("{}: {e}", args.data.display())))?;
    let schema = match &args.schema {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| fail(EXIT_DATA, format_args!("{}: {e}", path.display())))?;
            ColumnSchema::parse(&text).map_err(|e| fail(EXIT_DATA, e))?
        }
        None => {
            let mut rdr = csv::ReaderBuilder::new().from_reader(raw.as_bytes());
            let headers: Vec<String> = rdr
                .headers()
                .map_err(|e| fail(EXIT_DATA, e))?
                .iter()
                .map(|s| s.to_string())
                .collect();
            ColumnSchema::infer(&headers).map_err(|e| fail(EXIT_DATA, e))?
        }
    };
    // A provisional gaussian load exposes the outcomes for family inference;
    // the family only affects downstream arithmetic.
    let family = match args.family.as_str() {
        "binary" => OutcomeFamily::Binary,
        "gaussian" => OutcomeFamily::Gaussian,
        "auto" => {
            let probe = load_long_csv(raw.as_bytes(), &schema, OutcomeFamily::Gaussian)
                .map_err(|e| fail(EXIT_DATA, e))?;
            let binary = probe
                .y()
                .iter()
                .zip(probe.observed().iter())
                .filter(|(_, &obs)| obs)
                .all(|(&y, _)| y == 0.0 || y == 1.0);
            if binary {
                eprintln!(
                    "note: outcomes look binary; fitting a logit model (override with --family)"
                );
                OutcomeFamily::Binary
            } else {
                OutcomeFamily::Gaussian
            }
        }
        other => {
            return Err(fail(
                EXIT_USAGE,
                format_args!("unknown family `{other}` (expected auto, binary or gaussian)"),
            ))
        }
    };
    load_long_csv(raw.as_bytes(), &schema, family).map_err(|e| fail(EXIT_DATA, e))
}

fn fit_weights(ds: &LongitudinalDataset, args: &DataArgs) -> Result<DropoutFit, u8> {
    if ds.is_complete() {
        eprintln!("note: no dropout in the data; using unit observation weights");
        return Ok(DropoutFit::no_dropout(ds));
    }
    let lags = args.dropout_lags.unwrap_or(ds.t() - 1);
    let spec = HazardSpec {
        y_lags: lags,
        include_extra: true,
    };
    fit_dropout(ds, &hazard_design(ds, &spec)).map_err(|e| fail(EXIT_FIT, e))
}

fn resolve_columns(ds: &LongitudinalDataset, names: &str) -> Result<MeanModelSpec, u8> {
    if names == "all" {
        return Ok(MeanModelSpec::full(ds.p_full() - 1));
    }
    if names == "1" {
        return Ok(MeanModelSpec::intercept_only());
    }
    let mut indices = Vec::new();
    for name in names.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let ix = ds
            .x_names()
            .iter()
            .position(|x| x == name)
            .ok_or_else(|| fail(EXIT_USAGE, format_args!("unknown covariate `{name}`")))?;
        indices.push(ix);
    }
    MeanModelSpec::new(true, indices).map_err(|e| fail(EXIT_USAGE, e))
}

fn dropout_report(dropout: &DropoutFit) -> String {
    let mut out = String::new();
    if dropout.q() == 0 {
        let _ = writeln!(out, "dropout model: none (complete data, unit weights)");
        return out;
    }
    let _ = writeln!(
        out,
        "dropout model: q = {}, converged in {} iterations",
        dropout.q(),
        dropout.iterations
    );
    let theta: Vec<String> = dropout.theta.iter().map(|v| format!("{v:.4}")).collect();
    let _ = writeln!(out, "  theta = [{}]", theta.join(", "));
    let min_omega = dropout
        .omega
        .iter()
        .zip(dropout.ipw.iter())
        .filter(|(_, &w)| w > 0.0)
        .map(|(&o, _)| o)
        .fold(f64::INFINITY, f64::min);
    let _ = writeln!(
        out,
        "  weights: min observed omega {:.4}, floored cells {}",
        min_omega, dropout.floored
    );
    out
}

fn cmd_fit(args: &FitArgs) -> Result<(), u8> {
    let ds = load_dataset(&args.data)?;
    let structure = CorrelationKind::from_str(&args.structure).map_err(|e| fail(EXIT_USAGE, e))?;
    let spec = resolve_columns(&ds, &args.mean)?;
    let dropout = fit_weights(&ds, &args.data)?;
    let fit = wgee_fit(&ds, &spec, structure, &dropout).map_err(|e| fail(EXIT_FIT, e))?;
    let cov = fit
        .robust_cov
        .clone()
        .or_else(|| sandwich_variance(&ds, &fit, &dropout).ok());

    let mut out = String::new();
    let _ = write!(out, "{}", dropout_report(&dropout));
    let _ = writeln!(
        out,
        "mean model: {} (p = {}), structure {}, family {}",
        fit.spec.label(ds.x_names()),
        fit.p(),
        fit.corr.kind,
        ds.family()
    );
    let rho: Vec<String> = fit.corr.rho.iter().map(|v| format!("{v:.4}")).collect();
    let _ = writeln!(
        out,
        "  converged in {} iterations; phi = {:.4}; rho = [{}]",
        fit.iterations,
        fit.phi,
        rho.join(", ")
    );
    let _ = writeln!(out, "  {:<14} {:>12} {:>12}", "coef", "estimate", "robust se");
    let cols = fit.spec.columns();
    for (c, &col) in cols.iter().enumerate() {
        let se = cov
            .as_ref()
            .map(|m| format!("{:.6}", m[[c, c]].sqrt()))
            .unwrap_or_else(|| "n/a".to_string());
        let _ = writeln!(
            out,
            "  {:<14} {:>12.6} {:>12}",
            ds.x_names()[col], fit.beta[c], se
        );
    }
    print!("{out}");
    Ok(())
}

fn parse_structures(text: &str) -> Result<Vec<CorrelationKind>, u8> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| CorrelationKind::from_str(s).map_err(|e| fail(EXIT_USAGE, e)))
        .collect()
}

fn write_output(path: &Path, contents: &str) -> Result<(), u8> {
    fs::write(path, contents)
        .map_err(|e| fail(EXIT_CANTCREAT, format_args!("{}: {e}", path.display())))
}

fn cmd_select(args: &SelectArgs) -> Result<(), u8> {
    let ds = load_dataset(&args.data)?;
    let structures = parse_structures(&args.structures)?;
    let policy = match &args.candidates {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| fail(EXIT_DATA, format_args!("{}: {e}", path.display())))?;
            let mut specs = Vec::new();
            for line in text.lines().map(str::trim) {
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                specs.push(resolve_columns(&ds, line)?);
            }
            CandidatePolicy::Explicit(specs)
        }
        None => CandidatePolicy::AllSubsetsWithIntercept,
    };
    let candidates =
        enumerate_candidates(&ds, &policy, &structures).map_err(|e| fail(EXIT_USAGE, e))?;
    let dropout = fit_weights(&ds, &args.data)?;
    let l_total = full_union_spec(&candidates).len() + (ds.t() - 1) + dropout.q();
    if ds.n() <= l_total {
        eprintln!(
            "warning: {} subjects for {l_total} stacked estimating equations; \
             the empirical likelihood may be infeasible for most candidates",
            ds.n()
        );
    }
    let jobs = jobs_from(args.jobs);
    let table = with_pool(jobs, || select_with_dropout(&ds, &candidates, &dropout))?;
    print!("{table}");
    if let Some(path) = &args.out {
        write_output(path, &table.to_tsv())?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), u8> {
    let text = fs::read_to_string(&args.scenario)
        .map_err(|e| fail(EXIT_SCENARIO, format_args!("{}: {e}", args.scenario.display())))?;
    let mut scenarios = parse_scenarios(&text).map_err(|e| fail(EXIT_SCENARIO, e))?;
    if let Some(seed) = args.seed {
        for named in &mut scenarios {
            named.scenario.seed = seed;
        }
    }
    let jobs = jobs_from(args.jobs);
    for named in &scenarios {
        let started = std::time::Instant::now();
        let scenario = named.scenario.clone();
        let table = with_pool(jobs, move || {
            run_monte_carlo(&scenario, standard_candidates)
        })?
        .map_err(|e| match e {
            SimError::Scenario { .. } | SimError::InvalidScenario { .. } => fail(EXIT_SCENARIO, e),
            other => fail(EXIT_FIT, other),
        })?;
        println!("# scenario {}", named.name);
        print!("{}", table.to_tsv());
        eprintln!(
            "scenario {}: {} replicates in {:.1?}",
            named.name,
            table.replicates,
            started.elapsed()
        );
        if let Some(dir) = &args.out {
            fs::create_dir_all(dir)
                .map_err(|e| fail(EXIT_CANTCREAT, format_args!("{}: {e}", dir.display())))?;
            let path = dir.join(format!("{}.tsv", named.name));
            write_output(&path, &table.to_tsv())?;
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}
