//! `enrich-est` command line.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{load_config, Config, DataFile, LoadError};
use crate::error::Error;
use crate::estimators::{estimate_report, pooled_mle, EstimateReport, SigmaSource};
use crate::population::IndexSet;
use crate::selection::{apply_rule, ExtendedInterval, SelectionRule};
use crate::simulation::{
    bias_mse_table, run_scenario, write_csv, GenerationMode, RngPolicy, SimulationOptions,
};
use crate::verify::{run_verify, Level};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_FUTILITY: i32 = 2;
pub const EXIT_TARGET: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_VERIFY: i32 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "enrich-est",
    version,
    about = "Conditionally unbiased estimation for two-stage adaptive enrichment trials"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate treatment effects from one trial's data.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated targets such as `F,1,2` or `1+2`; defaults to the
        /// selected population and each of its members.
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<String>>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Ignore the selection (bounds (−∞, ∞)); the conditional estimate
        /// then equals the MLE.
        #[arg(long)]
        unconditional: bool,
    },
    /// Simulate the configured scenarios.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        reps: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; results do not depend on it.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, default_value = "per-patient")]
        mode: GenerationMode,
        /// Markdown table path; overrides the config.
        #[arg(long)]
        markdown: Option<PathBuf>,
    },
    /// Run the self-verification suite.
    Verify {
        #[arg(long, default_value = "fast")]
        level: Level,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// Failure carrying its exit code.
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Failure::new(EXIT_IO, format!("{}: {e}", path.display()))
    }
}

impl From<LoadError> for Failure {
    fn from(e: LoadError) -> Self {
        match e {
            LoadError::Io(_) => Failure::new(EXIT_IO, e.to_string()),
            LoadError::Invalid(_) => Failure::new(EXIT_CONFIG, e.to_string()),
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NoEstimateAfterStop => EXIT_FUTILITY,
        Error::NotIntervalRepresentable(_) | Error::TargetNotSelected { .. } => EXIT_TARGET,
        _ => EXIT_CONFIG,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::new(exit_code(&e), e.to_string())
    }
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(stderr, "{text}");
            } else {
                let _ = write!(stdout, "{text}");
            }
            return code;
        }
    };
    let result = match cli.command {
        Command::Estimate {
            config,
            data,
            targets,
            out,
            unconditional,
        } => cmd_estimate(
            &config,
            &data,
            targets,
            out.as_deref(),
            unconditional,
            stdout,
        ),
        Command::Simulate {
            config,
            reps,
            seed,
            out,
            threads,
            mode,
            markdown,
        } => cmd_simulate(&config, reps, seed, &out, threads, mode, markdown, stdout),
        Command::Verify {
            level,
            seed,
            report,
        } => cmd_verify(level, seed, report.as_deref(), stdout),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code
        }
    }
}

fn write_out(stdout: &mut dyn Write, text: &str) -> Result<(), Failure> {
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| Failure::new(EXIT_IO, format!("stdout: {e}")))
}

fn default_targets(selected: &IndexSet) -> Vec<IndexSet> {
    let mut targets = vec![selected.clone()];
    if selected.len() > 1 {
        targets.extend(selected.iter().map(IndexSet::single));
    }
    targets
}

fn fmt_num(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into())
}

struct Row {
    label: String,
    mle: Option<f64>,
    report: Result<EstimateReport, Error>,
}

fn cmd_estimate(
    config_path: &Path,
    data_path: &Path,
    targets: Option<Vec<String>>,
    out: Option<&Path>,
    unconditional: bool,
    stdout: &mut dyn Write,
) -> Result<i32, Failure> {
    let Config {
        spec,
        design,
        pice_df,
        ..
    } = load_config(config_path)?;
    let k = spec.k();
    let text = std::fs::read_to_string(data_path).map_err(|e| Failure::io(data_path, e))?;
    let data = DataFile::parse(&text)
        .and_then(|d| d.into_trial_data(k))
        .map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", data_path.display())))?;
    let rule = design.rule.build()?;
    let s1 = data
        .stage1_summary()
        .map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
    let mut outcome = apply_rule(&rule, &spec, &s1)?;
    if outcome.is_stop() {
        return Err(Error::NoEstimateAfterStop.into());
    }
    if unconditional {
        outcome.bounds = Some(ExtendedInterval::unbounded());
    }
    let targets = match targets {
        Some(labels) => labels
            .iter()
            .map(|l| IndexSet::parse(l, k))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?,
        None => default_targets(&outcome.selected),
    };
    let reports = estimate_report(
        &data,
        &spec,
        &design,
        &rule as &dyn SelectionRule,
        &outcome,
        &targets,
        pice_df,
    )
    .map_err(|e| Failure::new(exit_code(&e), e.to_string()))?;
    let rows: Vec<Row> = targets
        .iter()
        .zip(reports)
        .map(|(t, report)| Row {
            label: t.label(k),
            mle: pooled_mle(&data, t).ok(),
            report,
        })
        .collect();

    let bounds = outcome.bounds.expect("non-stop outcome has bounds");
    let mut text = format!(
        "rule {}: selected {} with X_{{{},1}} in {}\n",
        rule.id(),
        outcome.selected.label(k),
        outcome.selected.label(k),
        bounds
    );
    let source = rows
        .iter()
        .find_map(|r| r.report.as_ref().ok().map(|rep| rep.sigma_source))
        .unwrap_or(if design.sigma2.is_some() {
            SigmaSource::Known
        } else {
            SigmaSource::PlugIn
        });
    if source == SigmaSource::PlugIn {
        if let Some(rep) = rows.iter().find_map(|r| r.report.as_ref().ok()) {
            text.push_str(&format!("estimated sigma2 = {:.6}\n", rep.sigma2_used));
        }
    }
    text.push_str(&format!(
        "{:<8} {:>10} {:>10} {:>10}  {}\n",
        "target", "mle", "umvcue", "pice", "bounds"
    ));
    let mut code = EXIT_OK;
    for row in &rows {
        match &row.report {
            Ok(rep) => text.push_str(&format!(
                "{:<8} {:>10} {:>10} {:>10}  {}\n",
                row.label,
                fmt_num(Some(rep.mle)),
                fmt_num(rep.umvcue),
                fmt_num(rep.pice),
                rep.bounds_used
            )),
            Err(e) => {
                code = code.max(exit_code(e));
                text.push_str(&format!(
                    "{:<8} {:>10} {:>10} {:>10}  error: {e}\n",
                    row.label,
                    fmt_num(row.mle),
                    "ERR",
                    "ERR"
                ));
            }
        }
    }
    write_out(stdout, &text)?;
    if let Some(path) = out {
        write_estimate_csv(path, &rows).map_err(|e| Failure::io(path, e))?;
    }
    Ok(code)
}

fn write_estimate_csv(path: &Path, rows: &[Row]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record([
        "target",
        "mle",
        "umvcue",
        "pice",
        "lower",
        "upper",
        "r",
        "v2",
        "sigma2",
        "sigma_source",
        "error",
    ])?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for row in rows {
        let record = match &row.report {
            Ok(rep) => vec![
                row.label.clone(),
                rep.mle.to_string(),
                opt(rep.umvcue),
                opt(rep.pice),
                rep.bounds_used.lower().to_string(),
                rep.bounds_used.upper().to_string(),
                rep.r.to_string(),
                rep.v_pooled.to_string(),
                rep.sigma2_used.to_string(),
                match rep.sigma_source {
                    SigmaSource::Known => "known".into(),
                    SigmaSource::PlugIn => "plug-in".into(),
                },
                String::new(),
            ],
            Err(e) => {
                let mut r = vec![row.label.clone(), opt(row.mle)];
                r.extend(std::iter::repeat_n(String::new(), 8));
                r.push(e.to_string());
                r
            }
        };
        w.write_record(record)?;
    }
    w.flush()
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    config_path: &Path,
    reps: usize,
    seed: u64,
    out: &Path,
    threads: Option<usize>,
    mode: GenerationMode,
    markdown: Option<PathBuf>,
    stdout: &mut dyn Write,
) -> Result<i32, Failure> {
    let cfg = load_config(config_path)?;
    if cfg.scenarios.is_empty() {
        return Err(Failure::new(
            EXIT_CONFIG,
            "the configuration has no scenarios",
        ));
    }
    if reps == 0 {
        return Err(Failure::new(EXIT_CONFIG, "--reps must be at least 1"));
    }
    if threads == Some(0) {
        return Err(Failure::new(EXIT_CONFIG, "--threads must be at least 1"));
    }
    let rule = cfg.design.rule.build()?;
    let options = SimulationOptions {
        mode,
        pice_df: cfg.pice_df,
    };
    let simulate = || {
        cfg.scenarios
            .iter()
            .map(|s| {
                run_scenario(
                    s,
                    &cfg.spec,
                    &cfg.design,
                    &rule,
                    reps,
                    RngPolicy::new(seed),
                    options,
                )
            })
            .collect::<Result<Vec<_>, _>>()
    };
    let results = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?
            .install(simulate),
        None => simulate(),
    }?;

    let file = File::create(out).map_err(|e| Failure::io(out, e))?;
    write_csv(&results, BufWriter::new(file)).map_err(|e| Failure::io(out, e))?;
    let table = bias_mse_table(&results);
    let md_path = markdown
        .or(cfg.output.markdown)
        .unwrap_or_else(|| out.with_extension("md"));
    std::fs::write(&md_path, &table).map_err(|e| Failure::io(&md_path, e))?;
    write_out(stdout, &table)?;
    Ok(EXIT_OK)
}

fn cmd_verify(
    level: Level,
    seed: u64,
    report: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<i32, Failure> {
    let result = run_verify(level, seed).map_err(|e| Failure::new(EXIT_VERIFY, e.to_string()))?;
    write_out(stdout, &result.render())?;
    if let Some(path) = report {
        std::fs::write(path, result.to_json()).map_err(|e| Failure::io(path, e))?;
    }
    if result.passed() {
        Ok(EXIT_OK)
    } else {
        Err(Failure::new(
            EXIT_VERIFY,
            format!("failed checks: {}", result.failed_ids().join(", ")),
        ))
    }
}
