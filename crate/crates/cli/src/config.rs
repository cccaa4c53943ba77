//! Experiment configuration: a JSON file, per-experiment desk presets and
//! command-line overrides (flags win).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use teachnet::data::Distribution;
use teachnet::teacher::TeacherSpec;
use teachnet::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    FigConvergence,
    FigFanoutVsRho,
    FigSampleComplexity,
    FigSuccessRate,
    FigDynamics,
    FigAwareVsAgnostic,
    VerifyIdentities,
    Connectivity,
}

impl Experiment {
    pub const ALL: [Experiment; 8] = [
        Experiment::FigConvergence,
        Experiment::FigFanoutVsRho,
        Experiment::FigSampleComplexity,
        Experiment::FigSuccessRate,
        Experiment::FigDynamics,
        Experiment::FigAwareVsAgnostic,
        Experiment::VerifyIdentities,
        Experiment::Connectivity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::FigConvergence => "fig-convergence",
            Experiment::FigFanoutVsRho => "fig-fanout-vs-rho",
            Experiment::FigSampleComplexity => "fig-sample-complexity",
            Experiment::FigSuccessRate => "fig-success-rate",
            Experiment::FigDynamics => "fig-dynamics",
            Experiment::FigAwareVsAgnostic => "fig-aware-vs-agnostic",
            Experiment::VerifyIdentities => "verify-identities",
            Experiment::Connectivity => "connectivity",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| {
            let names: Vec<_> = Experiment::ALL.iter().map(|e| e.name()).collect();
            anyhow::anyhow!("unknown experiment {s:?}; expected one of {}", names.join(", "))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub distribution: Distribution,
    pub sigma: f64,
    pub n_train: usize,
    pub n_eval: usize,
    /// Base-set sizes for sweeps.
    pub sample_sizes: Vec<usize>,
    /// Band half-width for augmentation.
    pub aug_eps: f64,
    /// Constant `c` of the augmentation shift.
    pub aug_c: f64,
    /// Sample visits per training run in sweeps; epochs are scaled so that
    /// every dataset size gets the same number of SGD steps.
    pub visit_budget: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            distribution: Distribution::Gaussian,
            sigma: 1.0,
            n_train: 5000,
            n_eval: 5000,
            sample_sizes: vec![100, 200, 500, 1000],
            aug_eps: 0.5,
            aug_c: 0.01,
            visit_budget: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    /// Teacher recipe; its seed is replaced by the per-run seed.
    pub teacher: TeacherSpec,
    /// Student width per hidden layer = factor × teacher width.
    pub overrealization: usize,
    /// Factors swept by `fig-success-rate`.
    pub factors: Vec<usize>,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// ε for the weight-space alignment columns of reports.
    pub align_eps: f64,
    /// Correlation threshold for success rates and dynamics crossings.
    pub rho_threshold: f64,
    pub seeds: Vec<u64>,
    /// Output directory below the output root; defaults to the experiment name.
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::preset(Experiment::FigFanoutVsRho)
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults for each experiment.
    pub fn preset(experiment: Experiment) -> Self {
        let base = ExperimentConfig {
            experiment,
            teacher: TeacherSpec { layer_sizes: vec![20, 10, 20], ..TeacherSpec::default() },
            overrealization: 5,
            factors: vec![1, 2, 5, 10],
            train: TrainConfig::default(),
            data: DataConfig::default(),
            align_eps: 0.05,
            rho_threshold: 0.95,
            seeds: (0..16).collect(),
            out_dir: None,
        };
        match experiment {
            Experiment::FigConvergence | Experiment::Connectivity => ExperimentConfig {
                teacher: TeacherSpec { layer_sizes: vec![2, 2, 10], ..TeacherSpec::default() },
                overrealization: 3,
                // connectivity does not need the reference step size; halving it keeps
                // both endpoint runs stable at sigma 10
                train: TrainConfig {
                    epochs: 3000,
                    stop_when_g1_below: Some(1e-3),
                    learning_rate: if experiment == Experiment::Connectivity { 0.005 } else { 0.01 },
                    ..TrainConfig::default()
                },
                data: DataConfig { sigma: 10.0, ..DataConfig::default() },
                seeds: if experiment == Experiment::Connectivity { (0..10).collect() } else { (0..8).collect() },
                ..base
            },
            Experiment::FigFanoutVsRho => ExperimentConfig {
                train: TrainConfig { epochs: 30, ..TrainConfig::default() },
                ..base
            },
            Experiment::FigDynamics => ExperimentConfig {
                teacher: TeacherSpec { polarity: 1.5, ..base.teacher.clone() },
                ..base
            },
            Experiment::FigAwareVsAgnostic => ExperimentConfig { seeds: (0..10).collect(), ..base },
            Experiment::FigSampleComplexity => ExperimentConfig {
                data: DataConfig {
                    sample_sizes: vec![100, 500, 2000, 5000],
                    visit_budget: 500_000,
                    ..DataConfig::default()
                },
                seeds: (0..4).collect(),
                ..base
            },
            Experiment::FigSuccessRate => ExperimentConfig {
                data: DataConfig {
                    sample_sizes: vec![200, 1000, 5000],
                    visit_budget: 200_000,
                    ..DataConfig::default()
                },
                seeds: (0..4).collect(),
                ..base
            },
            Experiment::VerifyIdentities => ExperimentConfig {
                teacher: TeacherSpec { layer_sizes: vec![100, 50, 75, 100, 125, 50], ..TeacherSpec::default() },
                overrealization: 1,
                seeds: vec![0],
                ..base
            },
        }
    }

    /// Restores the full-scale sizes: d = 100, C = 50, N = 10000.
    pub fn full_profile(mut self) -> Self {
        let sizes = &mut self.teacher.layer_sizes;
        if sizes.len() >= 3 && self.experiment != Experiment::FigConvergence && self.experiment != Experiment::Connectivity {
            let last = sizes.len() - 1;
            sizes[0] = 100;
            sizes[last] = 50;
            self.data.n_train = 10_000;
            self.data.n_eval = 10_000;
        }
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Parses a possibly partial config; missing keys come from the preset of
    /// the named experiment, merged recursively.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: serde_json::Value = serde_json::from_str(text)?;
        let experiment = match user.get("experiment") {
            Some(serde_json::Value::String(name)) => name.parse()?,
            Some(_) => bail!("\"experiment\" must be a string"),
            None => bail!("config names no experiment"),
        };
        let mut merged = serde_json::to_value(Self::preset(experiment))?;
        merge(&mut merged, user);
        Ok(serde_json::from_value(merged)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("config lists no seeds");
        }
        if self.overrealization == 0 || self.factors.contains(&0) {
            bail!("over-realization factors must be >= 1");
        }
        if self.data.n_train == 0 || self.data.n_eval == 0 || self.data.sample_sizes.contains(&0) {
            bail!("dataset sizes must be >= 1");
        }
        if !(self.rho_threshold > 0.0 && self.rho_threshold < 1.0) {
            bail!("rho threshold must lie in (0, 1)");
        }
        self.teacher.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Student layer sizes for a teacher with the given sizes.
    pub fn student_sizes(&self, factor: usize) -> Vec<usize> {
        let t = &self.teacher.layer_sizes;
        let last = t.len() - 1;
        t.iter()
            .enumerate()
            .map(|(i, &s)| if i == 0 || i == last { s } else { s * factor })
            .collect()
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form. The
    /// output location is not part of a run's identity.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&ExperimentConfig { out_dir: None, ..self.clone() }).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    pub fn output_dir(&self, root: &Path) -> PathBuf {
        match &self.out_dir {
            Some(d) if d.is_absolute() => d.clone(),
            Some(d) => root.join(d),
            None => root.join(self.experiment.name()),
        }
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Per-seed stream seeds, so that teacher, data and students draw from
/// independent generators.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Teacher = 1,
    Calibration = 2,
    Train = 3,
    Eval = 4,
    Student = 5,
    SecondStudent = 6,
    Shuffle = 7,
    Probe = 8,
}

pub fn stream_seed(seed: u64, stream: Stream) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(stream as u64)
}
