//! Continual Pick-to-Learn.
//!
//! [`cop2l_train`] runs the instrumented training loop: one mP2L call per
//! task on the fresh data plus a weighted replay buffer, bookkeeping of the
//! two compression sets per task (`Si`: points that shaped the model,
//! `Sj`: points that did so but were later evicted from the buffer) and the
//! messages `μ1` (eviction task of each `Sj` point) and `μ2` (iteration
//! counts). [`reconstruct`] replays the run from that record alone.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::{Certificate, CertificateInputs};
use crate::error::{Error, Result};
use crate::metrics::{accuracy_row, AccuracyMatrix};
use crate::model::{ExampleKey, Learner, LearnerConfig, ParameterVector, WeightedExample};
use crate::numerics::Probability;
use crate::p2l::{mp2l, mp2l_fixed_iterations, IterationTrace, MP2LConfig};
use crate::rng;
use crate::tasks::TaskStream;

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoP2LConfig {
    /// Stopping threshold on the worst weighted cross-entropy.
    pub gamma: f64,
    /// Weight of replayed points.
    pub omega: f64,
    /// Total buffer capacity `m`.
    pub buffer_capacity: usize,
    /// Points selected per mP2L iteration.
    pub block_size: usize,
    pub delta: Probability,
    #[serde(default)]
    pub max_iterations: Option<usize>,
    #[serde(default = "default_true")]
    pub early_stopping: bool,
    /// Base seed of the buffer-sampling streams.
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl CoP2LConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 1.0 && self.omega.is_finite()) {
            return Err(Error::Config(format!("omega must be a finite value >= 1, got {}", self.omega)));
        }
        if self.buffer_capacity == 0 {
            return Err(Error::Config("buffer capacity must be positive".into()));
        }
        if !self.gamma.is_finite() {
            return Err(Error::Config("gamma must be finite".into()));
        }
        self.mp2l().validate()
    }

    pub fn mp2l(&self) -> MP2LConfig {
        MP2LConfig {
            gamma: self.gamma,
            block_size: self.block_size,
            max_iterations: self.max_iterations,
            delta: self.delta,
            early_stopping: self.early_stopping,
        }
    }
}

/// Everything that determines a run besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub learner: LearnerConfig,
    pub cop2l: CoP2LConfig,
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        self.learner.validate()?;
        self.cop2l.validate()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("hyperparameters serialize");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Hex SHA-256 over the training data of every task.
pub fn stream_fingerprint(stream: &TaskStream) -> String {
    let mut hasher = Sha256::new();
    hasher.update((stream.tasks.len() as u64).to_le_bytes());
    for task in &stream.tasks {
        hasher.update((task.task_id as u64).to_le_bytes());
        hasher.update((task.train.len() as u64).to_le_bytes());
        for ex in &task.train {
            hasher.update((ex.global_index as u64).to_le_bytes());
            hasher.update((ex.y as u64).to_le_bytes());
            for v in &ex.x {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
    }
    hex::encode(hasher.finalize())
}

/// Uniform size-`count` subset of `pool` (seeded Fisher–Yates prefix),
/// returned in the pool's original order.
pub fn sample_without_replacement<T: Clone, R: Rng + ?Sized>(pool: &[T], count: usize, rng: &mut R) -> Vec<T> {
    if count >= pool.len() {
        return pool.to_vec();
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    for i in 0..count {
        let j = rng.random_range(i..pool.len());
        idx.swap(i, j);
    }
    let mut chosen = idx[..count].to_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| pool[i].clone()).collect()
}

/// Replay buffer: one pool of keys per finished task.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub capacity: usize,
    pub omega: f64,
    seed: u64,
    pools: BTreeMap<usize, Vec<ExampleKey>>,
}

/// Pool keys removed by a resampling step, ascending.
pub type Evicted = Vec<ExampleKey>;

impl Buffer {
    pub fn new(capacity: usize, omega: f64, seed: u64) -> Self {
        Buffer {
            capacity,
            omega,
            seed,
            pools: BTreeMap::new(),
        }
    }

    pub fn pools(&self) -> &BTreeMap<usize, Vec<ExampleKey>> {
        &self.pools
    }

    pub fn len(&self) -> usize {
        self.pools.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All buffered keys in ascending order.
    pub fn keys(&self) -> Vec<ExampleKey> {
        self.pools.values().flatten().copied().collect()
    }

    /// After task `t`: draws task `t`'s pool from `candidates` (ascending),
    /// then shrinks every earlier pool to `⌊m/t⌋`. Returns the evicted keys.
    pub fn admit(&mut self, task_id: usize, candidates: &[ExampleKey]) -> Evicted {
        let quota = self.capacity / task_id;
        let mut stream = rng::stream(self.seed, "buffer", task_id as u64);
        let fresh = sample_without_replacement(candidates, quota, &mut stream);
        let mut evicted = Vec::new();
        for pool in self.pools.values_mut() {
            let kept = sample_without_replacement(pool, quota, &mut stream);
            let kept_set: BTreeSet<ExampleKey> = kept.iter().copied().collect();
            evicted.extend(pool.iter().filter(|k| !kept_set.contains(k)).copied());
            *pool = kept;
        }
        self.pools.insert(task_id, fresh);
        evicted.sort_unstable();
        evicted
    }
}

/// Compression sets and removal messages of one task, as global indices
/// into that task's training set.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: usize,
    pub n_t: usize,
    pub si: BTreeSet<usize>,
    pub sj: BTreeSet<usize>,
    /// Task after which each `sj` point was evicted from the buffer.
    pub mu1: BTreeMap<usize, usize>,
}

/// Portable certificate payload: enough to rebuild the final predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionRecord {
    pub engine_version: String,
    pub config_hash: String,
    pub hyperparameters: Hyperparameters,
    pub stream_fingerprint: String,
    pub tasks: Vec<TaskRecord>,
    /// Iteration count of the selected checkpoint at each task.
    pub mu2: Vec<u64>,
    pub params_checksum: String,
}

impl CompressionRecord {
    /// Checks the structural invariants of the sets and messages.
    pub fn validate(&self) -> Result<()> {
        let total = self.tasks.len();
        if self.mu2.len() != total {
            return Err(Error::Incompatible(format!("{} iteration counts for {total} tasks", self.mu2.len())));
        }
        for (pos, task) in self.tasks.iter().enumerate() {
            if task.task_id != pos + 1 {
                return Err(Error::Incompatible(format!("task record {} out of order", task.task_id)));
            }
            if let Some(i) = task.si.intersection(&task.sj).next() {
                return Err(Error::Incompatible(format!("index {i} of task {} is in both sets", task.task_id)));
            }
            if task.si.iter().chain(&task.sj).any(|&i| i >= task.n_t) {
                return Err(Error::Incompatible(format!("index out of range in task {}", task.task_id)));
            }
            if task.mu1.len() != task.sj.len() || task.mu1.keys().any(|k| !task.sj.contains(k)) {
                return Err(Error::Incompatible(format!(
                    "removal messages of task {} do not match its second set",
                    task.task_id
                )));
            }
            if task.mu1.values().any(|&r| r <= task.task_id || r > total) {
                return Err(Error::Incompatible(format!("removal task out of range in task {}", task.task_id)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Output of one CoP2L run.
#[derive(Debug, Clone)]
pub struct CoP2LRun {
    pub params: ParameterVector,
    /// Certificates for every task `≤ t` after every task `t`.
    pub certificates: Vec<Certificate>,
    pub accuracy: AccuracyMatrix,
    pub record: CompressionRecord,
    /// mP2L trace of each task.
    pub traces: Vec<Vec<IterationTrace>>,
}

fn check_stream(stream: &TaskStream, hyper: &Hyperparameters) -> Result<Learner> {
    stream.validate()?;
    hyper.validate()?;
    if stream.task_count() == 0 {
        return Err(Error::EmptyExamples);
    }
    if hyper.learner.input_dim != stream.input_dim {
        return Err(Error::DimensionMismatch {
            expected: hyper.learner.input_dim,
            actual: stream.input_dim,
        });
    }
    Learner::new(hyper.learner.clone())
}

/// Per-task sets as they stand at one checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Sets {
    si: Vec<BTreeSet<usize>>,
    sj: Vec<BTreeSet<usize>>,
}

impl Sets {
    fn push_task(&mut self) {
        self.si.push(BTreeSet::new());
        self.sj.push(BTreeSet::new());
    }

    fn fold(&mut self, selected: &[ExampleKey]) {
        for key in selected {
            self.si[key.task_id - 1].insert(key.global_index);
        }
    }

    fn evict(&mut self, key: ExampleKey) -> bool {
        let slot = key.task_id - 1;
        if self.si[slot].remove(&key.global_index) {
            self.sj[slot].insert(key.global_index);
            true
        } else {
            false
        }
    }
}

fn certificates_at(
    learner: &Learner,
    params: &ParameterVector,
    stream: &TaskStream,
    sets: &Sets,
    mu2: &[u64],
    delta: Probability,
) -> Result<Vec<Certificate>> {
    let checkpoint = mu2.len();
    (0..checkpoint)
        .map(|slot| {
            let task = &stream.tasks[slot];
            let (si, sj) = (&sets.si[slot], &sets.sj[slot]);
            let complement: Vec<_> = task
                .train
                .iter()
                .filter(|ex| !si.contains(&ex.global_index) && !sj.contains(&ex.global_index))
                .collect();
            let errors = complement
                .par_iter()
                .map(|ex| learner.zero_one_loss(params, ex).map(usize::from))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .sum::<usize>();
            Certificate::compute_or_vacuous(CertificateInputs {
                task_id: task.task_id,
                n_t: task.train.len(),
                i_size: si.len(),
                j_size: sj.len(),
                mu2: mu2.to_vec(),
                complement_loss: Probability::ratio(errors, complement.len()),
                delta,
                task_count: checkpoint,
            })
        })
        .collect()
}

fn weighted<'a>(stream: &'a TaskStream, keys: &[ExampleKey], weight: f64) -> Vec<WeightedExample<'a>> {
    keys.iter()
        .map(|k| WeightedExample::new(&stream.tasks[k.task_id - 1].train[k.global_index], weight))
        .collect()
}

/// Trains CoP2L over the stream, producing certificates after every task.
pub fn cop2l_train(stream: &TaskStream, hyper: &Hyperparameters) -> Result<CoP2LRun> {
    let learner = check_stream(stream, hyper)?;
    let cfg = &hyper.cop2l;
    let mp2l_cfg = cfg.mp2l();
    let total = stream.task_count();

    let mut params = learner.init_params();
    let mut buffer = Buffer::new(cfg.buffer_capacity, cfg.omega, cfg.seed);
    let mut sets = Sets::default();
    let mut mu1: Vec<BTreeMap<usize, usize>> = Vec::new();
    let mut mu2 = Vec::new();
    let mut certificates = Vec::new();
    let mut accuracy = AccuracyMatrix::new(total);
    let mut traces = Vec::new();

    for task in &stream.tasks {
        let t = task.task_id;
        sets.push_task();
        mu1.push(BTreeMap::new());

        let fresh: Vec<WeightedExample<'_>> = task.train.iter().map(|ex| WeightedExample::new(ex, 1.0)).collect();
        let replay = weighted(stream, &buffer.keys(), cfg.omega);
        let outcome = mp2l(&learner, &params, &fresh, &replay, &mp2l_cfg)?;
        params = outcome.params;
        mu2.push(outcome.selected_iteration as u64);
        sets.fold(&outcome.compression_set);
        traces.push(outcome.trace);

        let selected: BTreeSet<ExampleKey> = outcome.compression_set.iter().copied().collect();
        let candidates: Vec<ExampleKey> = task
            .train
            .iter()
            .map(|ex| ex.key())
            .filter(|k| !selected.contains(k))
            .collect();
        for key in buffer.admit(t, &candidates) {
            if sets.evict(key) {
                mu1[key.task_id - 1].insert(key.global_index, t);
            }
        }

        let tasks_so_far = &stream.tasks[..t];
        accuracy.set_row(t, accuracy_row(&learner, &params, tasks_so_far)?)?;
        certificates.extend(certificates_at(&learner, &params, stream, &sets, &mu2, cfg.delta)?);
    }

    let tasks = stream
        .tasks
        .iter()
        .enumerate()
        .map(|(slot, task)| TaskRecord {
            task_id: task.task_id,
            n_t: task.train.len(),
            si: sets.si[slot].clone(),
            sj: sets.sj[slot].clone(),
            mu1: mu1[slot].clone(),
        })
        .collect();
    let record = CompressionRecord {
        engine_version: ENGINE_VERSION.to_string(),
        config_hash: hyper.hash(),
        hyperparameters: hyper.clone(),
        stream_fingerprint: stream_fingerprint(stream),
        tasks,
        mu2,
        params_checksum: params.checksum(),
    };
    Ok(CoP2LRun {
        params,
        certificates,
        accuracy,
        record,
        traces,
    })
}

/// Result of replaying a record.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub params: ParameterVector,
    /// Parameters after each task.
    pub checkpoints: Vec<ParameterVector>,
    /// Certificates recomputed from the replayed parameters, in the same
    /// order as [`CoP2LRun::certificates`].
    pub certificates: Vec<Certificate>,
}

/// Checks that `record` was produced under `hyper` on `stream`.
pub fn check_compatibility(record: &CompressionRecord, stream: &TaskStream, hyper: &Hyperparameters) -> Result<()> {
    let expected = hyper.hash();
    if record.config_hash != expected {
        return Err(Error::Incompatible(format!(
            "config hash {} does not match {expected}",
            record.config_hash
        )));
    }
    if record.hyperparameters.hash() != record.config_hash {
        return Err(Error::Incompatible("recorded hyperparameters do not match the recorded hash".into()));
    }
    if record.stream_fingerprint != stream_fingerprint(stream) {
        return Err(Error::Incompatible("training data differs from the recorded stream".into()));
    }
    if record.tasks.len() != stream.task_count() {
        return Err(Error::Incompatible(format!(
            "record covers {} tasks, stream has {}",
            record.tasks.len(),
            stream.task_count()
        )));
    }
    for (task, data) in record.tasks.iter().zip(&stream.tasks) {
        if task.n_t != data.train.len() {
            return Err(Error::Incompatible(format!("task {} size differs", task.task_id)));
        }
    }
    record.validate()
}

/// Rebuilds the predictor from the compression sets and messages only,
/// without consuming any randomness.
pub fn reconstruct(record: &CompressionRecord, stream: &TaskStream, hyper: &Hyperparameters) -> Result<Reconstruction> {
    check_compatibility(record, stream, hyper)?;
    let learner = check_stream(stream, hyper)?;
    let cfg = &hyper.cop2l;
    let mp2l_cfg = cfg.mp2l();

    let mut params = learner.init_params();
    let mut buffer: BTreeSet<ExampleKey> = BTreeSet::new();
    let mut sets = Sets::default();
    let mut checkpoints = Vec::new();
    let mut certificates = Vec::new();

    for (slot, task) in record.tasks.iter().enumerate() {
        let t = task.task_id;
        sets.push_task();
        let fresh_keys: Vec<ExampleKey> = task
            .si
            .iter()
            .map(|&g| ExampleKey {
                task_id: t,
                global_index: g,
            })
            .collect();
        let buffer_keys: Vec<ExampleKey> = buffer.iter().copied().collect();
        let fresh = weighted(stream, &fresh_keys, 1.0);
        let replay = weighted(stream, &buffer_keys, cfg.omega);
        let outcome = mp2l_fixed_iterations(&learner, &params, &fresh, &replay, &mp2l_cfg, record.mu2[slot] as usize)?;
        params = outcome.params;
        sets.fold(&outcome.compression_set);

        let selected: BTreeSet<usize> = outcome
            .compression_set
            .iter()
            .filter(|k| k.task_id == t)
            .map(|k| k.global_index)
            .collect();
        for &g in task.si.iter().chain(&task.sj) {
            if !selected.contains(&g) {
                buffer.insert(ExampleKey {
                    task_id: t,
                    global_index: g,
                });
            }
        }
        for earlier in &record.tasks[..=slot] {
            for (&g, _) in earlier.mu1.iter().filter(|(_, &removal)| removal == t) {
                let key = ExampleKey {
                    task_id: earlier.task_id,
                    global_index: g,
                };
                buffer.remove(&key);
                if !sets.evict(key) {
                    return Err(Error::Incompatible(format!(
                        "point {g} of task {} evicted before it was selected",
                        earlier.task_id
                    )));
                }
            }
        }

        certificates.extend(certificates_at(
            &learner,
            &params,
            stream,
            &sets,
            &record.mu2[..=slot],
            cfg.delta,
        )?);
        checkpoints.push(params.clone());
    }

    Ok(Reconstruction {
        params,
        checkpoints,
        certificates,
    })
}
