//! Batch front end: `run`, `sweep` and `verify`.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or config error,
//! 3 internal invariant violation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::harness::{run_repeated, sweep_m, ExperimentConfig, ExperimentResult};
use crate::verify::{run_suite, InclusionFn, SuiteOptions, VerifyReport};
use crate::{inclusion_probability, Error};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "ADVICE_EFFICIENT_OUT";

#[derive(Debug, Parser)]
#[command(name = "advice-efficient", version, about = "Exponential weights with M-of-N expert queries")]
pub struct Cli {
    /// Cap on worker threads used for repetitions.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run repeated experiments from a config file.
    Run {
        config: PathBuf,
        #[arg(long, env = OUT_DIR_ENV)]
        out: PathBuf,
    },
    /// Run the config once per query budget M.
    Sweep {
        config: PathBuf,
        #[arg(long = "m", value_delimiter = ',', required = true)]
        m_values: Vec<usize>,
        #[arg(long, env = OUT_DIR_ENV)]
        out: PathBuf,
    },
    /// Run the exact enumeration and inequality checks.
    Verify {
        #[arg(long = "max-n", default_value_t = 8)]
        max_n: usize,
        #[arg(long, default_value = "verify_report.json")]
        out: PathBuf,
        #[arg(long, default_value_t = SuiteOptions::default().seed)]
        seed: u64,
    },
}

/// A failure carrying the exit code it maps to.
#[derive(Debug)]
pub struct CliFailure {
    pub code: i32,
    pub message: String,
}

impl CliFailure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliFailure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidInput(_) | Error::Infeasible(_) => EXIT_USAGE,
            Error::InvalidState(_) | Error::Protocol(_) | Error::Invariant(_) => EXIT_INVARIANT,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> CliFailure {
    CliFailure::usage(format!("{}: {e}", path.display()))
}

/// Parses a config file. Errors carry `path:line:column`.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliFailure> {
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    let config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| CliFailure::usage(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column())))?;
    let base_dir = path.parent().unwrap_or(Path::new("."));
    let environment = config
        .environment
        .load_files(base_dir)
        .map_err(|e| CliFailure::usage(format!("{}: {e}", path.display())))?;
    let config = ExperimentConfig { environment, ..config };
    config
        .validate()
        .map_err(|e| CliFailure::usage(format!("{}: {e}", path.display())))?;
    Ok(config)
}

/// Decimal with at least 12 significant digits, never in exponent form.
pub fn format_number(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{:.12}", if x == 0.0 { 0.0 } else { x });
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (11 - magnitude).clamp(12, 340) as usize;
    format!("{x:.decimals$}")
}

pub fn regret_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("round,mean_regret,std_regret,min,max,bound\n");
    let r = &result.regret;
    for i in 0..result.bound.len() {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            i + 1,
            format_number(r.mean[i]),
            format_number(r.std[i]),
            format_number(r.min[i]),
            format_number(r.max[i]),
            format_number(result.bound[i])
        )
        .expect("write to string");
    }
    out
}

pub fn sweep_csv(results: &[ExperimentResult]) -> String {
    let mut out = String::from("M,final_mean_regret,final_bound\n");
    for r in results {
        writeln!(
            out,
            "{},{},{}",
            r.config.m,
            format_number(r.final_mean_regret()),
            format_number(r.final_bound())
        )
        .expect("write to string");
    }
    out
}

#[derive(Debug, Serialize)]
struct RunSummary<'a> {
    algorithm: crate::Algorithm,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "T")]
    t: usize,
    repetitions: usize,
    final_mean_regret: f64,
    final_std_regret: f64,
    final_min_regret: f64,
    final_max_regret: f64,
    final_bound: f64,
    final_mean_cumulative_loss: f64,
    best_experts: &'a [usize],
    ledger: &'a crate::environments::LedgerSummary,
}

impl<'a> RunSummary<'a> {
    fn of(r: &'a ExperimentResult) -> Self {
        Self {
            algorithm: r.config.algorithm,
            n: r.config.n,
            m: r.config.m,
            t: r.config.t,
            repetitions: r.config.repetitions,
            final_mean_regret: r.final_mean_regret(),
            final_std_regret: r.regret.last_std(),
            final_min_regret: *r.regret.min.last().expect("non-empty"),
            final_max_regret: *r.regret.max.last().expect("non-empty"),
            final_bound: r.final_bound(),
            final_mean_cumulative_loss: r.cumulative_loss.last_mean(),
            best_experts: &r.best_experts,
            ledger: &r.ledger,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: ExperimentConfig,
    pub artifact_version: String,
    pub timestamp_unix: u64,
    pub seeds: Vec<u64>,
    pub outputs: Vec<String>,
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<String, CliFailure> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| io_failure(&path, e))?;
    Ok(name.to_string())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<String, CliFailure> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    write_file(dir, name, &text)
}

fn write_manifest(
    dir: &Path,
    command: &str,
    config: &ExperimentConfig,
    seeds: Vec<u64>,
    mut outputs: Vec<String>,
) -> Result<(), CliFailure> {
    outputs.push("manifest.json".into());
    let manifest = RunManifest {
        command: command.into(),
        config: config.clone(),
        artifact_version: env!("CARGO_PKG_VERSION").into(),
        timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        seeds,
        outputs,
    };
    write_json(dir, "manifest.json", &manifest)?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliFailure> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

pub fn cmd_run(config_path: &Path, out: &Path) -> Result<ExperimentResult, CliFailure> {
    let config = load_config(config_path)?;
    create_dir(out)?;
    let result = run_repeated(&config)?;
    let outputs = vec![
        write_file(out, "regret.csv", &regret_csv(&result))?,
        write_json(out, "summary.json", &RunSummary::of(&result))?,
    ];
    write_manifest(out, "run", &config, result.seeds.clone(), outputs)?;
    Ok(result)
}

pub fn cmd_sweep(config_path: &Path, m_values: &[usize], out: &Path) -> Result<Vec<ExperimentResult>, CliFailure> {
    let config = load_config(config_path)?;
    if let Some(&m) = m_values.iter().find(|&&m| m == 0 || m > config.n) {
        return Err(CliFailure::usage(format!("M={m} outside [1, N={}]", config.n)));
    }
    create_dir(out)?;
    let results = sweep_m(&config, m_values)?;
    let mut outputs = Vec::new();
    for r in &results {
        outputs.push(write_file(out, &format!("regret_M{}.csv", r.config.m), &regret_csv(r))?);
    }
    outputs.push(write_file(out, "sweep_summary.csv", &sweep_csv(&results))?);
    let summaries: Vec<RunSummary> = results.iter().map(RunSummary::of).collect();
    outputs.push(write_json(out, "summary.json", &summaries)?);
    let seeds = results.first().map(|r| r.seeds.clone()).unwrap_or_default();
    write_manifest(out, "sweep", &config, seeds, outputs)?;
    Ok(results)
}

/// Runs the verification suite with `inclusion` as the estimator denominator
/// and writes the JSON report.
pub fn cmd_verify_with(max_n: usize, seed: u64, out: &Path, inclusion: InclusionFn<f64>) -> Result<VerifyReport, CliFailure> {
    let opts = SuiteOptions {
        max_n,
        seed,
        inclusion,
        ..SuiteOptions::default()
    };
    let report = run_suite(&opts)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let text = serde_json::to_string_pretty(&report).expect("serializable") + "\n";
    fs::write(out, text).map_err(|e| io_failure(out, e))?;
    Ok(report)
}

pub fn cmd_verify(max_n: usize, seed: u64, out: &Path) -> Result<VerifyReport, CliFailure> {
    cmd_verify_with(max_n, seed, out, inclusion_probability)
}

fn dispatch(command: &Command) -> Result<i32, CliFailure> {
    match command {
        Command::Run { config, out } => {
            let r = cmd_run(config, out)?;
            println!(
                "final mean regret {} (bound {}) over {} repetitions; outputs in {}",
                format_number(r.final_mean_regret()),
                format_number(r.final_bound()),
                r.config.repetitions,
                out.display()
            );
            Ok(EXIT_OK)
        }
        Command::Sweep { config, m_values, out } => {
            for r in cmd_sweep(config, m_values, out)? {
                println!(
                    "M={}: final mean regret {} (bound {})",
                    r.config.m,
                    format_number(r.final_mean_regret()),
                    format_number(r.final_bound())
                );
            }
            Ok(EXIT_OK)
        }
        Command::Verify { max_n, out, seed } => verify_and_report(*max_n, *seed, out, inclusion_probability),
    }
}

/// Runs the suite, prints one line per check, and maps the outcome to an exit
/// code: 0 if every check passes, 1 otherwise. The report is written either way.
pub fn verify_and_report(
    max_n: usize,
    seed: u64,
    out: &Path,
    inclusion: InclusionFn<f64>,
) -> Result<i32, CliFailure> {
    let report = cmd_verify_with(max_n, seed, out, inclusion)?;
    for c in &report.checks {
        println!(
            "{} {} (max deviation {:e}, threshold {:e})",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.max_deviation,
            c.threshold
        );
    }
    Ok(if report.passed { EXIT_OK } else { EXIT_VERIFY_FAILED })
}

/// Executes a parsed command line and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let outcome = match cli.threads {
        Some(0) => Err(CliFailure::usage("--threads must be at least 1")),
        Some(k) => match rayon::ThreadPoolBuilder::new().num_threads(k).build() {
            Ok(pool) => pool.install(|| dispatch(&cli.command)),
            Err(e) => Err(CliFailure {
                code: EXIT_INVARIANT,
                message: format!("cannot start thread pool: {e}"),
            }),
        },
        None => dispatch(&cli.command),
    };
    match outcome {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

/// Parses `args` (including the program name) and executes them.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}
