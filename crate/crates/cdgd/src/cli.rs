//! The `cdgd` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use cdgd_core::detect::{score, threshold_sweep, uniform_grid, cdgd_alpha};
use cdgd_core::seeds::derive;
use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, MethodName, ModeSpec};
use crate::emit::{emit_report, emit_sweep, parse_formats, to_json};
use crate::error::{CliError, Result};
use crate::experiment::{repetition_data, run_experiment, sweep, AggregateReport, SweepAxis};
use crate::io::{load_dataset, save_dataset, Format};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_ALL_FAILED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "cdgd", version, about = "Find mislabeled samples by learning per-sample weights through unrolled training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment and write its aggregate report.
    Run(RunArgs),
    /// Run one experiment per value of a parameter.
    Sweep(SweepArgs),
    /// Score saved weights against a saved corruption mask.
    Score(ScoreArgs),
    /// Write the noisy and clean datasets of one repetition.
    GenData(GenArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in config: sphere-demo, sphere-protocol, sphere-quick, memorization.
    #[arg(long)]
    preset: Option<String>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    /// full, trunc or trunc:W.
    #[arg(long)]
    mode: Option<String>,
    /// Comma separated subset of cdgd-alpha, cdgd-t, sn, sc.
    #[arg(long)]
    methods: Option<String>,
    /// Weight threshold.
    #[arg(long)]
    tau: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma separated report formats: json, csv.
    #[arg(long, default_value = "json,csv")]
    format: String,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// noise-fraction, d, n-clean or tau.
    #[arg(long)]
    axis: String,
    /// Comma separated values, or lin:START:END:COUNT.
    #[arg(long)]
    values: String,
    #[arg(long, default_value = "json,csv")]
    format: String,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// JSON array of weights.
    #[arg(long)]
    alpha: PathBuf,
    /// JSON array of booleans, or a dataset file with a corrupt column.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    /// Also sweep the threshold over this many equal steps.
    #[arg(long)]
    sweep: Option<usize>,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Repetition whose data to write.
    #[arg(long, default_value_t = 0)]
    rep: u64,
    /// csv or binary.
    #[arg(long, default_value = "csv")]
    format: String,
}

fn resolve(a: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(_), Some(_)) => return Err(CliError::usage("--config and --preset are exclusive")),
        (Some(p), None) => ExperimentConfig::load(p)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.master_seed = s;
    }
    if let Some(r) = a.reps {
        cfg.repetitions = r;
    }
    if let Some(m) = &a.mode {
        cfg.mode = m.parse::<ModeSpec>()?;
    }
    if let Some(list) = &a.methods {
        cfg.methods = list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect::<Result<Vec<MethodName>>>()?;
    }
    if let Some(t) = a.tau {
        cfg.tau = t;
    }
    if let Some(o) = &a.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_values(s: &str) -> Result<Vec<f64>> {
    let bad = || CliError::usage(format!("values `{s}` are not a list or lin:START:END:COUNT"));
    if let Some(rest) = s.strip_prefix("lin:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let [a, b, n] = parts[..] else { return Err(bad()) };
        let (a, b): (f64, f64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
        let n: usize = n.parse().map_err(|_| bad())?;
        return Ok(match n {
            0 => Vec::new(),
            1 => vec![a],
            _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
        });
    }
    s.split(',').map(str::trim).filter(|v| !v.is_empty()).map(|v| v.parse().map_err(|_| bad())).collect()
}

fn summary(out: &mut impl Write, report: &AggregateReport) -> std::io::Result<()> {
    writeln!(out, "{:<12} {:>5} {:>18} {:>18} {:>18}", "method", "reps", "precision", "recall", "f1")?;
    for (m, a) in &report.methods {
        let cell = |s: crate::experiment::Stat| match s.stderr {
            Some(e) => format!("{:.3} ± {:.3}", s.mean, e),
            None => format!("{:.3}", s.mean),
        };
        writeln!(out, "{:<12} {:>5} {:>18} {:>18} {:>18}", m.as_str(), a.reps, cell(a.precision), cell(a.recall), cell(a.f1))?;
    }
    if report.failures > 0 {
        writeln!(out, "{} of {} repetitions failed", report.failures, report.runs.len())?;
        for r in report.runs.iter().filter(|r| r.error.is_some()) {
            writeln!(out, "  repetition {}: {}", r.repetition, r.error.as_deref().unwrap_or_default())?;
        }
    }
    Ok(())
}

fn write_alpha_files(report: &AggregateReport, dir: &Path) -> Result<()> {
    for run in &report.runs {
        if let Some(alpha) = &run.alpha {
            let path = dir.join(format!("alpha-{}.json", run.repetition));
            std::fs::write(&path, to_json(alpha)).map_err(CliError::io(&path))?;
            let path = dir.join(format!("truth-{}.json", run.repetition));
            std::fs::write(&path, to_json(&run.truth)).map_err(CliError::io(&path))?;
        }
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::parse(path, format!("line {}", e.line()), e))
}

fn run(args: RunArgs, out: &mut impl Write) -> Result<i32> {
    let formats = parse_formats(&args.format)?;
    let cfg = resolve(&args.cfg)?;
    let report = run_experiment(&cfg)?;
    let paths = emit_report(&report, &formats, &cfg.output_dir)?;
    write_alpha_files(&report, &cfg.output_dir)?;
    summary(out, &report).map_err(CliError::io("stdout"))?;
    for p in paths {
        writeln!(out, "wrote {}", p.display()).map_err(CliError::io("stdout"))?;
    }
    Ok(if report.successes == 0 { EXIT_ALL_FAILED } else { EXIT_OK })
}

fn run_sweep(args: SweepArgs, out: &mut impl Write) -> Result<i32> {
    let formats = parse_formats(&args.format)?;
    let cfg = resolve(&args.cfg)?;
    let axis: SweepAxis = args.axis.parse()?;
    let values = parse_values(&args.values)?;
    let report = sweep(&cfg, axis, &values)?;
    for (v, r) in report.values.iter().zip(&report.reports) {
        writeln!(out, "{} = {v}", axis.as_str()).and_then(|_| summary(out, r)).map_err(CliError::io("stdout"))?;
    }
    for p in emit_sweep(&report, &formats, &cfg.output_dir)? {
        writeln!(out, "wrote {}", p.display()).map_err(CliError::io("stdout"))?;
    }
    let all_failed = !report.reports.is_empty() && report.reports.iter().all(|r| r.successes == 0);
    Ok(if all_failed { EXIT_ALL_FAILED } else { EXIT_OK })
}

fn run_score(args: ScoreArgs, out: &mut impl Write) -> Result<i32> {
    let alpha: Vec<f64> = read_json(&args.alpha)?;
    let truth: Vec<bool> = match args.truth.extension().and_then(|e| e.to_str()) {
        Some("json") => read_json(&args.truth)?,
        _ => load_dataset(&args.truth, Format::from_path(&args.truth))?
            .corruption
            .ok_or_else(|| CliError::usage(format!("{} has no corrupt column", args.truth.display())))?,
    };
    if !(0.0..=1.0).contains(&args.tau) {
        return Err(CliError::usage(format!("tau {} outside [0, 1]", args.tau)));
    }
    let s = score(&cdgd_alpha(&alpha, args.tau), &truth)?;
    let mut doc = serde_json::json!({ "tau": args.tau, "precision": s.precision, "recall": s.recall, "f1": s.f1 });
    if let Some(n) = args.sweep {
        doc["sweep"] = serde_json::to_value(threshold_sweep(&alpha, &truth, &uniform_grid(n))?).expect("sweep serializes");
    }
    write!(out, "{}", to_json(&doc)).map_err(CliError::io("stdout"))?;
    Ok(EXIT_OK)
}

fn run_gen(args: GenArgs, out: &mut impl Write) -> Result<i32> {
    let format: Format = args.format.parse()?;
    let cfg = resolve(&args.cfg)?;
    let (noisy, clean) = repetition_data(&cfg, derive(cfg.master_seed, args.rep))?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    for (name, ds) in [("noisy", &noisy), ("clean", &clean)] {
        let path = dir.join(format!("{name}.{}", format.extension()));
        save_dataset(ds, &path, format)?;
        writeln!(out, "wrote {} ({} samples)", path.display(), ds.len()).map_err(CliError::io("stdout"))?;
    }
    Ok(EXIT_OK)
}

/// Runs the command line on `args` (program name first) and returns the exit code.
pub fn main_with_args<I, T>(args: I, out: &mut impl Write, err: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return code;
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a, out),
        Command::Sweep(a) => run_sweep(a, out),
        Command::Score(a) => run_score(a, out),
        Command::GenData(a) => run_gen(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "cdgd: {e}");
            EXIT_USAGE
        }
    }
}
