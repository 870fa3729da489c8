//! Experiment configuration.
//!
//! A config is one TOML document. Every field has a default, and the
//! defaults describe the two-ring sphere benchmark: 120 points on circles
//! of radius 1 and 1.3, 20 of them kept clean, 40% of the rest flipped, a
//! 1000-unit ReLU network, 600 inner SGD steps at rate 1.4 and 250 outer
//! Adam steps starting at 0.2.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cdgd_core::bilevel::{InnerConfig, Mode, OuterConfig};
use cdgd_core::detect::TrainConfig;
use cdgd_core::modelzoo::{Activation, MlpSpec, OutputHead};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Spheres {
        d: usize,
        /// Total number of points, clean ones included.
        n: usize,
        noise_fraction: f64,
        n_clean: usize,
    },
    Files {
        noisy: PathBuf,
        clean: PathBuf,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Spheres { d: 2, n: 120, noise_fraction: 0.4, n_clean: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub output_head: OutputHead,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden_dims: vec![1000], activation: Activation::Relu, output_head: OutputHead::SigmoidBce }
    }
}

impl ModelConfig {
    pub fn spec(&self, input_dim: usize, num_classes: usize) -> MlpSpec {
        let output_dim = match self.output_head {
            OutputHead::SigmoidBce => 1,
            OutputHead::SoftmaxCe => num_classes,
        };
        MlpSpec { input_dim, hidden_dims: self.hidden_dims.clone(), output_dim, activation: self.activation, output_head: self.output_head }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    CdgdAlpha,
    CdgdT,
    Sn,
    Sc,
}

impl MethodName {
    pub const ALL: [MethodName; 4] = [MethodName::CdgdAlpha, MethodName::CdgdT, MethodName::Sn, MethodName::Sc];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodName::CdgdAlpha => "cdgd-alpha",
            MethodName::CdgdT => "cdgd-t",
            MethodName::Sn => "sn",
            MethodName::Sc => "sc",
        }
    }
}

impl FromStr for MethodName {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        MethodName::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| CliError::usage(format!("unknown method `{s}` (cdgd-alpha, cdgd-t, sn, sc)")))
    }
}

/// `full`, `trunc` (one epoch per window) or `trunc:W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ModeSpec(pub Mode);

impl fmt::Display for ModeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Mode::Full => f.write_str("full"),
            Mode::Truncated { window: None } => f.write_str("trunc"),
            Mode::Truncated { window: Some(w) } => write!(f, "trunc:{w}"),
        }
    }
}

impl FromStr for ModeSpec {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || CliError::usage(format!("mode `{s}` is not full, trunc or trunc:W"));
        match s.split_once(':') {
            None if s == "full" => Ok(ModeSpec(Mode::Full)),
            None if s == "trunc" => Ok(ModeSpec(Mode::Truncated { window: None })),
            Some(("trunc", w)) => {
                let w: usize = w.parse().map_err(|_| bad())?;
                if w == 0 {
                    return Err(bad());
                }
                Ok(ModeSpec(Mode::Truncated { window: Some(w) }))
            }
            _ => Err(bad()),
        }
    }
}

impl Serialize for ModeSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModeSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub repetitions: usize,
    pub methods: Vec<MethodName>,
    pub mode: ModeSpec,
    /// Weight threshold below which a sample is flagged.
    pub tau: f64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub inner: InnerConfig,
    pub outer: OuterConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            repetitions: 20,
            methods: MethodName::ALL.to_vec(),
            mode: ModeSpec(Mode::Full),
            tau: 0.5,
            output_dir: PathBuf::from("cdgd-out"),
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            inner: InnerConfig::default(),
            outer: OuterConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

pub const PRESETS: [&str; 4] = ["sphere-demo", "sphere-protocol", "sphere-quick", "memorization"];

impl ExperimentConfig {
    /// Named starting points.
    ///
    /// * `sphere-demo`: one run of the two-ring benchmark.
    /// * `sphere-protocol`: the same benchmark repeated 20 times.
    /// * `sphere-quick`: a small network and short loops for smoke tests.
    /// * `memorization`: 15-dimensional spheres with a large noisy set,
    ///   scaled down to run on a single core.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        match name {
            "sphere-demo" => Ok(Self { repetitions: 1, ..base }),
            "sphere-protocol" => Ok(base),
            "sphere-quick" => Ok(Self {
                repetitions: 2,
                model: ModelConfig { hidden_dims: vec![32], ..ModelConfig::default() },
                inner: InnerConfig { steps: 40, ..InnerConfig::default() },
                outer: OuterConfig { steps: 10, ..OuterConfig::default() },
                train: TrainConfig { epochs: 50, ..TrainConfig::default() },
                ..base
            }),
            "memorization" => Ok(Self {
                repetitions: 5,
                dataset: DatasetSpec::Spheres { d: 15, n: 1100, noise_fraction: 0.4, n_clean: 100 },
                model: ModelConfig { hidden_dims: vec![100], ..ModelConfig::default() },
                inner: InnerConfig { steps: 100, ..InnerConfig::default() },
                outer: OuterConfig { steps: 60, ..OuterConfig::default() },
                train: TrainConfig { epochs: 1000, ..TrainConfig::default() },
                ..base
            }),
            other => Err(CliError::usage(format!("unknown preset `{other}` ({})", PRESETS.join(", ")))),
        }
    }

    pub fn from_toml(path: &Path, text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let at = e.span().map_or_else(|| "document".into(), |s| format!("line {}", line_of(text, s.start)));
            CliError::parse(path, at, e.message())
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::from_toml(path, &text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(CliError::usage("repetitions must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(CliError::usage("at least one method is required"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(CliError::usage(format!("tau {} outside [0, 1]", self.tau)));
        }
        if let DatasetSpec::Spheres { d, n, noise_fraction, n_clean } = self.dataset {
            if d == 0 || n_clean == 0 || n_clean >= n || !(0.0..=1.0).contains(&noise_fraction) {
                return Err(CliError::usage(format!("invalid sphere dataset {:?}", self.dataset)));
            }
        }
        self.inner.validate()?;
        self.outer.validate()?;
        self.train.validate()?;
        if let Mode::Truncated { window: Some(w) } = self.mode.0 {
            if w > self.inner.steps {
                return Err(CliError::usage(format!("window {w} exceeds {} inner steps", self.inner.steps)));
            }
        }
        Ok(())
    }

    pub fn wants(&self, m: MethodName) -> bool {
        self.methods.contains(&m)
    }

    pub fn needs_alpha(&self) -> bool {
        self.wants(MethodName::CdgdAlpha) || self.wants(MethodName::CdgdT)
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}
