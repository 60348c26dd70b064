//! Command-line front end: `run`, `sweep`, `gen-trace`, `validate`.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 internal
//! invariant breach.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Deserialize;

use crate::baselines::PolicyKind;
use crate::memory::{max_safe_batch, safe_memory, token_budget};
use crate::metrics::{
    emit_report, write_goodput_line, write_sweep_header, write_sweep_row, MetricsReport, ReportFormat, SweepRow,
};
use crate::scenario::{Scenario, ScenarioError, WorkloadSource};
use crate::sim::{run_with_log, SimError};
use crate::trace::{write_trace, TraceFormat};
use crate::workload::{gen_synthetic, WorkloadSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "bucketsim",
    version,
    about = "Length-bucketed batching simulator for disaggregated LLM serving"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Write output here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the scheduling policy (bucketserve, continuous, static:<n>).
    #[arg(long)]
    pub policy: Option<PolicyKind>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario once and print the report.
    Run {
        scenario: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Output format: json, table, or csv.
        #[arg(long, default_value = "json", value_parser = parse_format)]
        format: ReportFormat,
        /// Write a JSON-lines event log.
        #[arg(long)]
        log_events: Option<PathBuf>,
        /// Include wall-clock timings in machine-readable output.
        #[arg(long)]
        timing: bool,
    },
    /// Run a scenario across offered loads and print a CSV curve.
    Sweep {
        scenario: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Comma-separated offered loads in requests/s.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        loads: Vec<f64>,
        /// Runs per load, seeded seed, seed+1, ...
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Generate a synthetic trace file (.csv or .jsonl).
    GenTrace {
        /// Workload file (`seed` plus a `[workload]` table) or a scenario.
        spec: PathBuf,
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parse a scenario and print derived memory quantities.
    Validate {
        scenario: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    ReportFormat::parse(s).ok_or_else(|| format!("unknown format `{s}` (json, table, csv)"))
}

/// Failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        let code = match e {
            SimError::Config(_) | SimError::Log(_) => EXIT_CONFIG,
            SimError::InvariantBreach { .. } | SimError::Metrics(_) => EXIT_INTERNAL,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> CliError + '_ {
    move |e| CliError::config(format!("{}: {e}", path.display()))
}

/// Parse `args` (including the program name) and execute.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(stderr, "{}", e.render())
            } else {
                write!(stdout, "{}", e.render())
            };
            return code;
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(cmd: Command, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Run {
            scenario,
            common,
            format,
            log_events,
            timing,
        } => cmd_run(&scenario, &common, format, log_events.as_deref(), timing, stdout),
        Command::Sweep {
            scenario,
            common,
            loads,
            repeats,
        } => cmd_sweep(&scenario, &common, &loads, repeats, stdout),
        Command::GenTrace { spec, out, seed } => cmd_gen_trace(&spec, &out, seed, stdout),
        Command::Validate { scenario, common } => cmd_validate(&scenario, &common, stdout),
    }
}

fn load_scenario(path: &Path, common: &Common) -> Result<Scenario, CliError> {
    let mut s = Scenario::load(path)?;
    if let Some(seed) = common.seed {
        s = s.with_seed(seed);
    }
    if let Some(p) = common.policy {
        s.sim.policy = p;
    }
    Ok(s)
}

/// Output sink: the `--out` file or stdout.
fn with_output<F>(out: Option<&Path>, stdout: &mut dyn Write, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut dyn Write) -> io::Result<()>,
{
    match out {
        Some(path) => {
            let file = File::create(path).map_err(io_err(path))?;
            let mut w = BufWriter::new(file);
            f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
        }
        None => f(stdout).map_err(|e| CliError::config(format!("stdout: {e}"))),
    }
}

/// Run one scenario to a report.
pub fn run_scenario<'a>(s: &'a Scenario, log: Option<&'a mut dyn Write>) -> Result<MetricsReport, CliError> {
    let trace = s.trace()?;
    Ok(run_with_log(&trace, &s.sim, log)?.report)
}

pub fn cmd_run(
    path: &Path,
    common: &Common,
    format: ReportFormat,
    log_events: Option<&Path>,
    timing: bool,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let s = load_scenario(path, common)?;
    let mut report = match log_events {
        Some(lp) => {
            let file = File::create(lp).map_err(io_err(lp))?;
            let mut w = BufWriter::new(file);
            let r = run_scenario(&s, Some(&mut w))?;
            w.flush().map_err(io_err(lp))?;
            r
        }
        None => run_scenario(&s, None)?,
    };
    // wall-clock figures differ run to run; keep machine output reproducible
    if !timing && format != ReportFormat::Table {
        report.timing = None;
    }
    let bytes = emit_report(&report, format);
    with_output(common.out.as_deref(), stdout, |w| w.write_all(&bytes))
}

/// Run every `(load, repeat)` point. Repeats of one load run in parallel;
/// rows come back in load order.
pub fn sweep_rows(
    base: &Scenario,
    loads: &[f64],
    repeats: usize,
    mut on_row: impl FnMut(&SweepRow) -> io::Result<()>,
) -> Result<Vec<SweepRow>, CliError> {
    if loads.is_empty() {
        return Err(CliError::config("sweep needs at least one load (--loads)"));
    }
    if repeats == 0 {
        return Err(CliError::config("--repeats must be >= 1"));
    }
    let mut rows = Vec::with_capacity(loads.len());
    for &load in loads {
        let point = base.clone().with_load(load)?;
        let reports: Vec<Result<MetricsReport, CliError>> = (0..repeats)
            .into_par_iter()
            .map(|i| run_scenario(&point.clone().with_seed(base.seed + i as u64), None))
            .collect();
        let reports = reports.into_iter().collect::<Result<Vec<_>, _>>()?;
        let row = SweepRow::from_reports(load, &reports);
        on_row(&row).map_err(|e| CliError::config(format!("writing sweep output: {e}")))?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn cmd_sweep(
    path: &Path,
    common: &Common,
    loads: &[f64],
    repeats: usize,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let s = load_scenario(path, common)?;
    if loads.is_empty() {
        return Err(CliError::config("sweep needs at least one load (--loads)"));
    }
    let out_path = common.out.as_deref();
    let mut sink: Box<dyn Write + '_> = match out_path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(io_err(p))?)),
        None => Box::new(stdout),
    };
    let write_err = |e: io::Error| CliError::config(format!("writing sweep output: {e}"));
    write_sweep_header(&mut sink).map_err(write_err)?;
    // rows already written stay in the output if a later point fails
    let res = sweep_rows(&s, loads, repeats, |row| {
        write_sweep_row(&mut sink, row)?;
        sink.flush()
    });
    let rows = match res {
        Ok(rows) => rows,
        Err(e) => {
            let _ = sink.flush();
            return Err(e);
        }
    };
    write_goodput_line(&mut sink, &rows).map_err(write_err)?;
    sink.flush().map_err(write_err)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkloadFile {
    #[serde(default)]
    seed: u64,
    workload: WorkloadSpec,
}

fn workload_from_file(path: &Path) -> Result<WorkloadSpec, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    match toml::from_str::<WorkloadFile>(&text) {
        Ok(f) => Ok(WorkloadSpec {
            seed: f.seed,
            ..f.workload
        }),
        Err(first) => {
            let base = path.parent().unwrap_or(Path::new("."));
            match Scenario::from_toml_str(&text, base) {
                Ok(Scenario {
                    workload: WorkloadSource::Synthetic(spec),
                    ..
                }) => Ok(spec),
                Ok(_) => Err(CliError::config(
                    "gen-trace needs a synthetic workload, not a trace file",
                )),
                Err(_) => Err(CliError::config(format!(
                    "{}: {}",
                    path.display(),
                    first.to_string().trim_end()
                ))),
            }
        }
    }
}

pub fn cmd_gen_trace(spec_path: &Path, out: &Path, seed: Option<u64>, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut spec = workload_from_file(spec_path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let trace = gen_synthetic(&spec).map_err(|e| CliError::config(e.to_string()))?;
    let file = File::create(out).map_err(io_err(out))?;
    let mut w = BufWriter::new(file);
    write_trace(&trace, TraceFormat::from_path(out), &mut w).map_err(|e| CliError::config(e.to_string()))?;
    w.flush().map_err(io_err(out))?;
    writeln!(stdout, "wrote {} requests to {}", trace.len(), out.display()).map_err(|e| CliError::config(e.to_string()))
}

pub fn cmd_validate(path: &Path, common: &Common, stdout: &mut dyn Write) -> Result<(), CliError> {
    let s = load_scenario(path, common)?;
    let trace = s.trace()?;
    let m = &s.sim.model;
    let gpu = &s.sim.cluster.gpu;
    let budget = token_budget(m, gpu);
    let lengths: Vec<u32> = trace
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.truncate_to(m.max_seq_len);
            r.input_len
        })
        .collect();
    let text = format!(
        "model: layers={} heads={} head_dim={} bytes_per_elem={} max_seq_len={}\n\
         kv_bytes_per_token: {}\n\
         safe_memory: {}\n\
         token_budget: {}\n\
         initial_n_max: {}\n\
         policy: {}\n\
         memory_accounting: {}\n\
         workers: prefill={} decode={}\n\
         requests: {}\n",
        m.layers,
        m.heads,
        m.head_dim,
        m.bytes_per_elem,
        m.max_seq_len,
        m.kv_bytes_per_token(),
        safe_memory(gpu),
        budget,
        max_safe_batch(&lengths, budget),
        s.sim.policy,
        match s.sim.accounting {
            crate::memory::MemoryAccounting::Padded => "padded",
            crate::memory::MemoryAccounting::Exact => "exact",
        },
        s.sim.cluster.prefill_workers,
        s.sim.cluster.decode_workers,
        trace.len(),
    );
    with_output(common.out.as_deref(), stdout, |w| w.write_all(text.as_bytes()))
}
