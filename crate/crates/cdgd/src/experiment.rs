//! Repeated experiments, aggregation and parameter sweeps.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use cdgd_core::bilevel::run_cdgd;
use cdgd_core::datalab::{sphere_problem, Dataset};
use cdgd_core::detect::{cdgd_alpha, cdgd_t, sc_baseline, sn_baseline, DetectionReport, Method, Scores};
use cdgd_core::seeds::derive;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSpec, ExperimentConfig, MethodName};
use crate::error::{CliError, Result};
use crate::io::{load_dataset, Format};

const DATA_STREAM: u64 = 0;
const CDGD_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const CLEAN_TRAIN_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunTiming {
    pub cdgd_secs: f64,
    pub total_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub repetition: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub reports: Vec<DetectionReport>,
    /// Ground-truth corruption mask of the noisy set.
    pub truth: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outer_history: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_segments: Option<usize>,
    pub timing: RunTiming,
}

impl RunRecord {
    pub fn report(&self, m: MethodName) -> Option<&DetectionReport> {
        self.reports.iter().find(|r| method_name(&r.method) == m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(reps)`; absent for a single run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stderr = (values.len() >= 2).then(|| {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        });
        Self { mean, stderr }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub reps: usize,
    pub precision: Stat,
    pub recall: Stat,
    pub f1: Stat,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AggregateTiming {
    pub total_secs: f64,
    pub mean_cdgd_secs: f64,
    pub max_cdgd_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub config: ExperimentConfig,
    pub methods: BTreeMap<MethodName, MethodAggregate>,
    pub successes: usize,
    pub failures: usize,
    pub runs: Vec<RunRecord>,
    pub timing: AggregateTiming,
}

pub fn method_name(m: &Method) -> MethodName {
    match m {
        Method::CdgdAlpha { .. } => MethodName::CdgdAlpha,
        Method::CdgdT => MethodName::CdgdT,
        Method::SnBaseline => MethodName::Sn,
        Method::ScBaseline => MethodName::Sc,
    }
}

/// Mean and standard error per method over the successful runs.
pub fn aggregate(config: ExperimentConfig, runs: Vec<RunRecord>, total_secs: f64) -> AggregateReport {
    let ok: Vec<&RunRecord> = runs.iter().filter(|r| r.error.is_none()).collect();
    let mut methods = BTreeMap::new();
    for &m in &config.methods {
        let scores: Vec<Scores> = ok.iter().filter_map(|r| r.report(m)).map(DetectionReport::scores).collect();
        if scores.is_empty() {
            continue;
        }
        let col = |f: fn(&Scores) -> f64| Stat::of(&scores.iter().map(f).collect::<Vec<_>>());
        methods.insert(
            m,
            MethodAggregate { reps: scores.len(), precision: col(|s| s.precision), recall: col(|s| s.recall), f1: col(|s| s.f1) },
        );
    }
    let cdgd: Vec<f64> = ok.iter().filter(|r| r.alpha.is_some()).map(|r| r.timing.cdgd_secs).collect();
    let timing = AggregateTiming {
        total_secs,
        mean_cdgd_secs: if cdgd.is_empty() { 0.0 } else { cdgd.iter().sum::<f64>() / cdgd.len() as f64 },
        max_cdgd_secs: cdgd.iter().copied().fold(0.0, f64::max),
    };
    let successes = ok.len();
    let failures = runs.len() - successes;
    AggregateReport { config, methods, successes, failures, runs, timing }
}

fn load_files(cfg: &ExperimentConfig) -> Result<Option<(Dataset, Dataset)>> {
    match &cfg.dataset {
        DatasetSpec::Spheres { .. } => Ok(None),
        DatasetSpec::Files { noisy, clean } => {
            let n = load_dataset(noisy, Format::from_path(noisy))?;
            let c = load_dataset(clean, Format::from_path(clean))?;
            if n.dim() != c.dim() {
                return Err(CliError::usage(format!("noisy set has {} features, clean set {}", n.dim(), c.dim())));
            }
            Ok(Some((n, c)))
        }
    }
}

/// The data of repetition `seed`.
pub fn repetition_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    match cfg.dataset {
        DatasetSpec::Spheres { d, n, noise_fraction, n_clean } => {
            if n_clean == 0 || n_clean >= n {
                return Err(CliError::usage(format!("n_clean {n_clean} must lie in [1, {n})")));
            }
            Ok(sphere_problem(d, n - n_clean, n_clean, noise_fraction, derive(seed, DATA_STREAM))?)
        }
        DatasetSpec::Files { .. } => load_files(cfg)?.ok_or_else(|| CliError::usage("no dataset files")),
    }
}

fn run_once(cfg: &ExperimentConfig, data: &(Dataset, Dataset), repetition: usize, seed: u64) -> RunRecord {
    let start = Instant::now();
    let (noisy, clean) = data;
    let truth = noisy.truth_mask();
    let mut rec = RunRecord {
        repetition,
        seed,
        error: None,
        reports: Vec::new(),
        truth: truth.clone(),
        alpha: None,
        outer_history: None,
        peak_segments: None,
        timing: RunTiming::default(),
    };
    let model = cfg.model.spec(noisy.dim(), noisy.num_classes.max(clean.num_classes));
    let mut metadata = BTreeMap::new();
    metadata.insert("seed".to_string(), seed.to_string());
    metadata.insert("repetition".to_string(), repetition.to_string());
    metadata.insert("mode".to_string(), cfg.mode.to_string());

    let outcome: Result<()> = (|| {
        model.validate()?;
        if cfg.needs_alpha() {
            let t = Instant::now();
            let run = run_cdgd(noisy, clean, &model, &cfg.inner, &cfg.outer, cfg.mode.0, derive(seed, CDGD_STREAM))
                .map_err(|a| CliError::Core(a.into()))?;
            rec.timing.cdgd_secs = t.elapsed().as_secs_f64();
            rec.peak_segments = Some(run.peak_segments);
            rec.outer_history = Some(run.history);
            rec.alpha = Some(run.alpha);
        }
        let train_seed = derive(seed, TRAIN_STREAM);
        for &m in &cfg.methods {
            let (method, mask) = match m {
                MethodName::CdgdAlpha => {
                    let alpha = rec.alpha.as_deref().expect("weights were fitted");
                    (Method::CdgdAlpha { tau: cfg.tau }, cdgd_alpha(alpha, cfg.tau))
                }
                MethodName::CdgdT => {
                    let alpha = rec.alpha.as_deref().expect("weights were fitted");
                    (Method::CdgdT, cdgd_t(noisy, alpha, clean, &model, &cfg.train, train_seed)?)
                }
                MethodName::Sn => (Method::SnBaseline, sn_baseline(noisy, clean, &model, &cfg.train, train_seed)?),
                MethodName::Sc => {
                    (Method::ScBaseline, sc_baseline(clean, noisy, &model, &cfg.train, derive(seed, CLEAN_TRAIN_STREAM))?)
                }
            };
            let mut report = DetectionReport::new(method, mask, &truth)?;
            report.metadata = metadata.clone();
            rec.reports.push(report);
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        rec.error = Some(e.to_string());
    }
    rec.timing.total_secs = start.elapsed().as_secs_f64();
    rec
}

/// Worker count: `CDGD_THREADS` if set, else the available cores, capped by `jobs`.
pub fn worker_count(jobs: usize) -> usize {
    let default = std::thread::available_parallelism().map_or(1, |n| n.get());
    let wanted = std::env::var("CDGD_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0).unwrap_or(default);
    wanted.min(jobs).max(1)
}

/// Runs `job(i)` for every `i < jobs` on `threads` workers; results keep index order.
pub fn parallel_map<T: Send>(jobs: usize, threads: usize, job: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..jobs).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs {
                    break;
                }
                let out = job(i);
                slots.lock().expect("no worker panicked")[i] = Some(out);
            });
        }
    });
    slots.into_inner().expect("no worker panicked").into_iter().map(|v| v.expect("every job ran")).collect()
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<AggregateReport> {
    run_experiment_with(cfg, worker_count(cfg.repetitions))
}

pub fn run_experiment_with(cfg: &ExperimentConfig, threads: usize) -> Result<AggregateReport> {
    cfg.validate()?;
    let start = Instant::now();
    let files = load_files(cfg)?;
    let runs = parallel_map(cfg.repetitions, threads, |r| {
        let seed = derive(cfg.master_seed, r as u64);
        let data = match &files {
            Some(d) => Ok(d.clone()),
            None => repetition_data(cfg, seed),
        };
        match data {
            Ok(data) => run_once(cfg, &data, r, seed),
            Err(e) => RunRecord {
                repetition: r,
                seed,
                error: Some(e.to_string()),
                reports: Vec::new(),
                truth: Vec::new(),
                alpha: None,
                outer_history: None,
                peak_segments: None,
                timing: RunTiming::default(),
            },
        }
    });
    Ok(aggregate(cfg.clone(), runs, start.elapsed().as_secs_f64()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    NoiseFraction,
    D,
    NClean,
    Tau,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::NoiseFraction => "noise-fraction",
            SweepAxis::D => "d",
            SweepAxis::NClean => "n-clean",
            SweepAxis::Tau => "tau",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        [SweepAxis::NoiseFraction, SweepAxis::D, SweepAxis::NClean, SweepAxis::Tau]
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| CliError::usage(format!("unknown sweep axis `{s}` (noise-fraction, d, n-clean, tau)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub reports: Vec<AggregateReport>,
}

fn with_axis(cfg: &ExperimentConfig, axis: SweepAxis, v: f64) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    let count = |v: f64| {
        if v >= 0.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(CliError::usage(format!("{} takes whole numbers, got {v}", axis.as_str())))
        }
    };
    match (&mut c.dataset, axis) {
        (DatasetSpec::Spheres { noise_fraction, .. }, SweepAxis::NoiseFraction) => *noise_fraction = v,
        (DatasetSpec::Spheres { d, .. }, SweepAxis::D) => *d = count(v)?,
        (DatasetSpec::Spheres { n_clean, .. }, SweepAxis::NClean) => *n_clean = count(v)?,
        (_, SweepAxis::Tau) => c.tau = v,
        (DatasetSpec::Files { .. }, _) => {
            return Err(CliError::usage(format!("axis {} needs a generated sphere dataset", axis.as_str())))
        }
    }
    c.validate()?;
    Ok(c)
}

/// Re-scores the weight-threshold verdicts of `report` at `tau` without refitting.
pub fn rethreshold(report: &AggregateReport, tau: f64) -> Result<AggregateReport> {
    let mut cfg = report.config.clone();
    cfg.tau = tau;
    let mut runs = report.runs.clone();
    for run in &mut runs {
        let (Some(alpha), None) = (&run.alpha, &run.error) else { continue };
        for rep in &mut run.reports {
            if let Method::CdgdAlpha { .. } = rep.method {
                let metadata = std::mem::take(&mut rep.metadata);
                *rep = DetectionReport::new(Method::CdgdAlpha { tau }, cdgd_alpha(alpha, tau), &run.truth)?;
                rep.metadata = metadata;
            }
        }
    }
    Ok(aggregate(cfg, runs, report.timing.total_secs))
}

/// One aggregate per axis value. A threshold sweep fits the weights once and
/// only re-thresholds them.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<SweepReport> {
    let mut reports = Vec::with_capacity(values.len());
    if axis == SweepAxis::Tau && !values.is_empty() {
        for &v in values {
            with_axis(cfg, axis, v)?;
        }
        let base = run_experiment(cfg)?;
        for &v in values {
            reports.push(rethreshold(&base, v)?);
        }
    } else {
        for &v in values {
            reports.push(run_experiment(&with_axis(cfg, axis, v)?)?);
        }
    }
    Ok(SweepReport { axis, values: values.to_vec(), reports })
}
