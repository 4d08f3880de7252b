//! Reference learners: naive finetuning and experience replay.

use serde::{Deserialize, Serialize};

use crate::continual::sample_without_replacement;
use crate::error::{Error, Result};
use crate::metrics::{accuracy_row, AccuracyMatrix};
use crate::model::{Example, Learner, LearnerConfig, ParameterVector, WeightedExample};
use crate::rng;
use crate::tasks::TaskStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Finetune,
    Replay,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Finetune => "finetune",
            BaselineKind::Replay => "replay",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    /// Buffer capacity `m`; ignored by finetuning.
    #[serde(default)]
    pub buffer_capacity: usize,
    /// Gradient steps per task.
    pub epochs: usize,
    pub learning_rate: f64,
    /// Seed of the buffer-sampling streams.
    pub seed: u64,
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind == BaselineKind::Replay && self.buffer_capacity == 0 {
            return Err(Error::Config("replay needs a positive buffer capacity".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub params: ParameterVector,
    pub accuracy: AccuracyMatrix,
}

/// Trains sequentially on each task. Replay minimizes the mean loss on the
/// task plus the mean loss on the buffer, which is filled with `⌊m/t⌋`
/// uniformly drawn points per task.
pub fn run_baseline(stream: &TaskStream, learner_config: &LearnerConfig, cfg: &BaselineConfig) -> Result<BaselineRun> {
    stream.validate()?;
    cfg.validate()?;
    let learner = Learner::new(learner_config.clone())?;
    let mut params = learner.init_params();
    let mut accuracy = AccuracyMatrix::new(stream.task_count());
    let mut pools: Vec<Vec<&Example>> = Vec::new();

    for task in &stream.tasks {
        let t = task.task_id;
        let buffered: Vec<&Example> = pools.iter().flatten().copied().collect();
        let examples: Vec<WeightedExample<'_>> = if buffered.is_empty() {
            task.train.iter().map(|ex| WeightedExample::new(ex, 1.0)).collect()
        } else {
            let total = (task.train.len() + buffered.len()) as f64;
            let fresh_weight = total / task.train.len() as f64;
            let replay_weight = total / buffered.len() as f64;
            task.train
                .iter()
                .map(|ex| WeightedExample::new(ex, fresh_weight))
                .chain(buffered.iter().map(|ex| WeightedExample::new(ex, replay_weight)))
                .collect()
        };
        params = learner.train(&params, &examples, cfg.learning_rate, cfg.epochs)?;

        if cfg.kind == BaselineKind::Replay {
            let quota = cfg.buffer_capacity / t;
            let mut stream_rng = rng::stream(cfg.seed, "baseline-buffer", t as u64);
            let all: Vec<&Example> = task.train.iter().collect();
            let fresh = sample_without_replacement(&all, quota, &mut stream_rng);
            for pool in pools.iter_mut() {
                *pool = sample_without_replacement(pool, quota, &mut stream_rng);
            }
            pools.push(fresh);
        }
        accuracy.set_row(t, accuracy_row(&learner, &params, &stream.tasks[..t])?)?;
    }
    Ok(BaselineRun { params, accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::average_forgetting;
    use crate::model::{Architecture, HeadMode};
    use crate::tasks::{synthetic_blobs, BlobSpec, Scenario};

    fn stream(num_tasks: usize) -> TaskStream {
        synthetic_blobs(
            &BlobSpec {
                num_tasks,
                classes_per_task: 2,
                n_per_class: 40,
                n_test_per_class: 50,
                dim: 2,
                separation: 4.0,
                noise_sigma: 0.7,
                seed: 0,
            },
            Scenario::ClassIncremental,
        )
        .unwrap()
    }

    fn learner(s: &TaskStream) -> LearnerConfig {
        LearnerConfig {
            architecture: Architecture::Softmax,
            input_dim: s.input_dim,
            class_count: s.total_class_count,
            learning_rate: 0.5,
            epochs_per_update: 1,
            init_seed: 5,
            head_mode: HeadMode::Single,
        }
    }

    fn cfg(kind: BaselineKind, m: usize) -> BaselineConfig {
        BaselineConfig {
            kind,
            buffer_capacity: m,
            epochs: 300,
            learning_rate: 0.5,
            seed: 3,
        }
    }

    #[test]
    fn finetuning_forgets() {
        let s = stream(2);
        let run = run_baseline(&s, &learner(&s), &cfg(BaselineKind::Finetune, 0)).unwrap();
        assert!(run.accuracy.get(1, 1).unwrap() > 0.9, "{:?}", run.accuracy);
        assert!(run.accuracy.get(2, 1).unwrap() < 0.2, "{:?}", run.accuracy);
    }

    #[test]
    fn full_replay_forgets_less() {
        let s = stream(2);
        let total: usize = s.tasks.iter().map(|t| t.train.len()).sum();
        let ft = run_baseline(&s, &learner(&s), &cfg(BaselineKind::Finetune, 0)).unwrap();
        let rp = run_baseline(&s, &learner(&s), &cfg(BaselineKind::Replay, total)).unwrap();
        assert!(average_forgetting(&rp.accuracy, 2).unwrap() < average_forgetting(&ft.accuracy, 2).unwrap());
    }

    #[test]
    fn single_task_baselines_agree() {
        let s = stream(1);
        let ft = run_baseline(&s, &learner(&s), &cfg(BaselineKind::Finetune, 0)).unwrap();
        let rp = run_baseline(&s, &learner(&s), &cfg(BaselineKind::Replay, 30)).unwrap();
        assert!(ft.params.bit_eq(&rp.params));
    }

    #[test]
    fn replay_requires_capacity() {
        let s = stream(1);
        assert!(run_baseline(&s, &learner(&s), &cfg(BaselineKind::Replay, 0)).is_err());
    }
}
