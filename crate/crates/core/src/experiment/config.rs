//! TOML experiment configuration.
//!
//! ```toml
//! [stream]
//! source = "blobs"
//! scenario = "class_incremental"
//! num_tasks = 5
//! classes_per_task = 2
//! n_per_class = 100
//! n_test_per_class = 200
//! dim = 5
//! separation = 3.0
//! noise_sigma = 1.0
//!
//! [learner]
//! architecture = "mlp"
//! hidden_width = 32
//! learning_rate = 0.5
//! epochs_per_update = 20
//!
//! [cop2l]
//! omega = 25.0
//! buffer_capacity = 500
//! block_size = 4
//!
//! [baselines]
//! methods = ["finetune"]
//! epochs = 300
//!
//! [run]
//! seeds = [0, 1, 2]
//! output_dir = "out"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{BaselineConfig, BaselineKind};
use crate::continual::{CoP2LConfig, Hyperparameters};
use crate::error::{Error, Result};
use crate::model::{Architecture, HeadMode, LearnerConfig};
use crate::numerics::Probability;
use crate::tasks::{
    load_csv, load_idx, permute_features, rotate_2d, split_by_class, subsample_per_class, synthetic_blobs, BlobSpec,
    ClassOrder, Dataset, Scenario, TaskStream,
};

/// Environment variable that overrides `run.output_dir`.
pub const OUTPUT_ENV: &str = "COP2L_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub stream: StreamConfig,
    pub learner: LearnerSection,
    #[serde(default)]
    pub cop2l: CoP2LSection,
    #[serde(default)]
    pub baselines: BaselineSection,
    pub run: RunSection,
    /// Directory that relative data paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum StreamConfig {
    /// Gaussian blobs, regenerated from each run's seed.
    Blobs {
        scenario: Scenario,
        num_tasks: usize,
        classes_per_task: usize,
        n_per_class: usize,
        n_test_per_class: usize,
        dim: usize,
        separation: f64,
        noise_sigma: f64,
        #[serde(default)]
        domain: Option<DomainShift>,
    },
    /// IDX image/label files (MNIST layout).
    Idx {
        scenario: Scenario,
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        classes_per_task: Option<usize>,
        #[serde(default)]
        train_per_class: Option<usize>,
        #[serde(default)]
        test_per_class: Option<usize>,
        #[serde(default)]
        domain: Option<DomainShift>,
    },
    /// CSV files with columns `x0..x{d-1},label`.
    Csv {
        scenario: Scenario,
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        classes_per_task: Option<usize>,
        #[serde(default)]
        domain: Option<DomainShift>,
    },
}

/// Input transformation defining the tasks of a domain-incremental stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shift", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainShift {
    Permute { num_tasks: usize },
    Rotate { angles: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSection {
    #[serde(default = "default_architecture")]
    pub architecture: String,
    #[serde(default)]
    pub hidden_width: Option<usize>,
    pub learning_rate: f64,
    pub epochs_per_update: usize,
}

fn default_architecture() -> String {
    "softmax".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoP2LSection {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_omega")]
    pub omega: f64,
    #[serde(default = "default_capacity")]
    pub buffer_capacity: usize,
    #[serde(default = "default_block")]
    pub block_size: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub max_iterations: Option<usize>,
    #[serde(default = "default_true")]
    pub early_stopping: bool,
}

fn default_gamma() -> f64 {
    -(0.5f64).ln()
}
fn default_omega() -> f64 {
    25.0
}
fn default_capacity() -> usize {
    500
}
fn default_block() -> usize {
    4
}
fn default_delta() -> f64 {
    0.05
}
fn default_true() -> bool {
    true
}

impl Default for CoP2LSection {
    fn default() -> Self {
        CoP2LSection {
            gamma: default_gamma(),
            omega: default_omega(),
            buffer_capacity: default_capacity(),
            block_size: default_block(),
            delta: default_delta(),
            max_iterations: None,
            early_stopping: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    #[serde(default)]
    pub methods: Vec<BaselineKind>,
    /// Gradient steps per task; defaults to the learner's steps per update.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    /// Replay capacity; defaults to the CoP2L buffer capacity.
    #[serde(default)]
    pub buffer_capacity: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_true")]
    pub cop2l: bool,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// A method evaluated in one experiment cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    CoP2L,
    Baseline(BaselineKind),
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::CoP2L => "cop2l",
            Method::Baseline(kind) => kind.name(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Reads a config; relative data paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg = ExperimentConfig::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    fn data_path(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Validates everything that can be checked without reading data.
    fn check(&self) -> Result<()> {
        if self.run.seeds.is_empty() {
            return Err(Error::Config("run.seeds must list at least one seed".into()));
        }
        let mut seen = self.run.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.run.seeds.len() {
            return Err(Error::Config("run.seeds contains duplicates".into()));
        }
        if self.methods().is_empty() {
            return Err(Error::Config("no method to run".into()));
        }
        let mut kinds = self.baselines.methods.clone();
        kinds.sort_by_key(|k| k.name());
        kinds.dedup();
        if kinds.len() != self.baselines.methods.len() {
            return Err(Error::Config("baselines.methods contains duplicates".into()));
        }
        if let StreamConfig::Blobs {
            scenario,
            num_tasks,
            classes_per_task,
            n_per_class,
            n_test_per_class,
            dim,
            separation,
            noise_sigma,
            domain,
        } = &self.stream
        {
            BlobSpec {
                num_tasks: *num_tasks,
                classes_per_task: *classes_per_task,
                n_per_class: *n_per_class,
                n_test_per_class: *n_test_per_class,
                dim: *dim,
                separation: *separation,
                noise_sigma: *noise_sigma,
                seed: 0,
            }
            .validate()?;
            if *n_test_per_class == 0 {
                return Err(Error::Config("n_test_per_class must be positive".into()));
            }
            if (*scenario == Scenario::DomainIncremental) != domain.is_some() {
                return Err(Error::Config("a domain shift is required exactly for domain-incremental streams".into()));
            }
        }
        for seed in &self.run.seeds {
            self.hyperparameters(*seed, self.task_count_hint().unwrap_or(1), 1, 2)?.validate()?;
        }
        Ok(())
    }

    fn task_count_hint(&self) -> Option<usize> {
        match &self.stream {
            StreamConfig::Blobs { num_tasks, .. } => Some(*num_tasks),
            _ => None,
        }
    }

    pub fn scenario(&self) -> Scenario {
        match &self.stream {
            StreamConfig::Blobs { scenario, .. }
            | StreamConfig::Idx { scenario, .. }
            | StreamConfig::Csv { scenario, .. } => *scenario,
        }
    }

    pub fn methods(&self) -> Vec<Method> {
        let mut out = Vec::new();
        if self.run.cop2l {
            out.push(Method::CoP2L);
        }
        out.extend(self.baselines.methods.iter().map(|&k| Method::Baseline(k)));
        out
    }

    /// Hex SHA-256 of the canonical JSON encoding, excluding the output
    /// directory so relocated runs stay byte-identical.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.run.output_dir = PathBuf::new();
        canonical.base_dir = None;
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Output directory after applying `--out` and then `COP2L_OUT`.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        match std::env::var_os(OUTPUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.run.output_dir.clone(),
        }
    }

    /// Builds the task stream of the run with the given seed.
    pub fn build_stream(&self, seed: u64) -> Result<TaskStream> {
        match &self.stream {
            StreamConfig::Blobs {
                scenario,
                num_tasks,
                classes_per_task,
                n_per_class,
                n_test_per_class,
                dim,
                separation,
                noise_sigma,
                domain,
            } => {
                let spec = BlobSpec {
                    num_tasks: *num_tasks,
                    classes_per_task: *classes_per_task,
                    n_per_class: *n_per_class,
                    n_test_per_class: *n_test_per_class,
                    dim: *dim,
                    separation: *separation,
                    noise_sigma: *noise_sigma,
                    seed,
                };
                match domain {
                    None => synthetic_blobs(&spec, *scenario),
                    Some(shift) => {
                        let base = BlobSpec {
                            num_tasks: 1,
                            classes_per_task: *classes_per_task,
                            ..spec
                        };
                        domain_stream(&base.dataset()?, shift, seed)
                    }
                }
            }
            StreamConfig::Idx {
                scenario,
                train_images,
                train_labels,
                test_images,
                test_labels,
                classes_per_task,
                train_per_class,
                test_per_class,
                domain,
            } => {
                let mut train = load_idx(&self.data_path(train_images), &self.data_path(train_labels))?;
                let mut test = load_idx(&self.data_path(test_images), &self.data_path(test_labels))?;
                if let Some(max) = train_per_class {
                    train = subsample_per_class(train, *max);
                }
                if let Some(max) = test_per_class {
                    test = subsample_per_class(test, *max);
                }
                split_or_shift(Dataset::new(train, test)?, *scenario, *classes_per_task, domain.as_ref(), seed)
            }
            StreamConfig::Csv {
                scenario,
                train,
                test,
                classes_per_task,
                domain,
            } => split_or_shift(
                Dataset::new(load_csv(&self.data_path(train))?, load_csv(&self.data_path(test))?)?,
                *scenario,
                *classes_per_task,
                domain.as_ref(),
                seed,
            ),
        }
    }

    /// CoP2L hyperparameters of one run.
    pub fn hyperparameters(&self, seed: u64, task_count: usize, input_dim: usize, class_count: usize) -> Result<Hyperparameters> {
        let architecture = match self.learner.architecture.as_str() {
            "softmax" => Architecture::Softmax,
            "mlp" => Architecture::Mlp {
                hidden_width: self
                    .learner
                    .hidden_width
                    .ok_or_else(|| Error::Config("learner.hidden_width is required for mlp".into()))?,
            },
            other => return Err(Error::Config(format!("unknown architecture '{other}'"))),
        };
        let head_mode = if self.scenario() == Scenario::TaskIncremental {
            HeadMode::PerTask { heads: task_count }
        } else {
            HeadMode::Single
        };
        let c = &self.cop2l;
        Ok(Hyperparameters {
            learner: LearnerConfig {
                architecture,
                input_dim,
                class_count,
                learning_rate: self.learner.learning_rate,
                epochs_per_update: self.learner.epochs_per_update,
                init_seed: seed,
                head_mode,
            },
            cop2l: CoP2LConfig {
                gamma: c.gamma,
                omega: c.omega,
                buffer_capacity: c.buffer_capacity,
                block_size: c.block_size,
                delta: Probability::new(c.delta).map_err(|_| Error::Config(format!("delta {} outside [0, 1]", c.delta)))?,
                max_iterations: c.max_iterations,
                early_stopping: c.early_stopping,
                seed,
            },
        })
    }

    /// Hyperparameters matched to an already built stream.
    pub fn hyperparameters_for(&self, stream: &TaskStream, seed: u64) -> Result<Hyperparameters> {
        let h = self.hyperparameters(seed, stream.task_count(), stream.input_dim, stream.total_class_count)?;
        h.validate()?;
        Ok(h)
    }

    pub fn baseline(&self, kind: BaselineKind, seed: u64) -> BaselineConfig {
        BaselineConfig {
            kind,
            buffer_capacity: self.baselines.buffer_capacity.unwrap_or(self.cop2l.buffer_capacity),
            epochs: self.baselines.epochs.unwrap_or(self.learner.epochs_per_update),
            learning_rate: self.baselines.learning_rate.unwrap_or(self.learner.learning_rate),
            seed,
        }
    }
}

fn domain_stream(base: &Dataset, shift: &DomainShift, seed: u64) -> Result<TaskStream> {
    match shift {
        DomainShift::Permute { num_tasks } => permute_features(base, *num_tasks, seed),
        DomainShift::Rotate { angles } => rotate_2d(base, angles),
    }
}

fn split_or_shift(
    dataset: Dataset,
    scenario: Scenario,
    classes_per_task: Option<usize>,
    domain: Option<&DomainShift>,
    seed: u64,
) -> Result<TaskStream> {
    match (scenario, domain) {
        (Scenario::DomainIncremental, Some(shift)) => domain_stream(&dataset, shift, seed),
        (Scenario::DomainIncremental, None) => Err(Error::Config("domain-incremental streams need a domain shift".into())),
        (_, Some(_)) => Err(Error::Config("a domain shift only applies to domain-incremental streams".into())),
        (_, None) => {
            let per_task = classes_per_task.ok_or_else(|| Error::Config("classes_per_task is required".into()))?;
            split_by_class(&dataset, scenario, per_task, ClassOrder::Identity)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
[stream]
source = "blobs"
scenario = "class_incremental"
num_tasks = 2
classes_per_task = 2
n_per_class = 10
n_test_per_class = 10
dim = 3
separation = 3.0
noise_sigma = 1.0

[learner]
learning_rate = 0.5
epochs_per_update = 5

[cop2l]
omega = 25.0
block_size = 4
buffer_capacity = 2000

[baselines]
methods = ["finetune", "replay"]

[run]
seeds = [1, 2]
"#;

    #[test]
    fn parses_and_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.cop2l.gamma, -(0.5f64).ln());
        assert_eq!(cfg.cop2l.delta, 0.05);
        assert_eq!(
            cfg.methods(),
            vec![
                Method::CoP2L,
                Method::Baseline(BaselineKind::Finetune),
                Method::Baseline(BaselineKind::Replay)
            ]
        );
        let stream = cfg.build_stream(1).unwrap();
        let h = cfg.hyperparameters_for(&stream, 1).unwrap();
        assert_eq!(h.cop2l.omega, 25.0);
        assert_eq!(h.cop2l.block_size, 4);
        assert_eq!(h.cop2l.buffer_capacity, 2000);
    }

    #[test]
    fn hash_tracks_hyperparameters() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let b = ExperimentConfig::from_toml(&MINIMAL.replace("omega = 25.0", "omega = 24.0")).unwrap();
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.run.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), c.hash());
    }

    #[test]
    fn rejects_invalid_configs() {
        for bad in [
            MINIMAL.replace("seeds = [1, 2]", "seeds = []"),
            MINIMAL.replace("seeds = [1, 2]", "seeds = [1, 1]"),
            MINIMAL.replace("omega = 25.0", "omega = 0.5"),
            MINIMAL.replace("block_size = 4", "block_size = 0"),
            MINIMAL.replace("[cop2l]", "[cop2l]\ndelta = 2.0"),
            MINIMAL.replace("dim = 3", "dim = 3\nunknown = 1"),
            MINIMAL.replace("learning_rate = 0.5", "learning_rate = 0.5\narchitecture = \"mlp\""),
            MINIMAL.replace("scenario = \"class_incremental\"", "scenario = \"domain_incremental\""),
        ] {
            assert!(ExperimentConfig::from_toml(&bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn domain_blobs() {
        let text = MINIMAL.replace(
            "scenario = \"class_incremental\"",
            "scenario = \"domain_incremental\"\ndomain = { shift = \"permute\", num_tasks = 3 }",
        );
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        let stream = cfg.build_stream(4).unwrap();
        assert_eq!(stream.task_count(), 3);
        assert_eq!(stream.total_class_count, 2);
    }
}
