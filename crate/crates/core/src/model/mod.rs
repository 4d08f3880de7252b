//! Small deterministic classifiers: multinomial softmax regression and a
//! one-hidden-layer tanh MLP, both with hand-written gradients.
//!
//! Training is full-batch gradient descent over a fixed example order, so a
//! replay of the same calls reproduces the same parameters bit for bit. The
//! compression/reconstruction scheme in [`crate::continual`] relies on that.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader};

/// Lower clamp on the predicted probability inside the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Softmax,
    Mlp { hidden_width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum HeadMode {
    /// One output head shared by every task (class- and domain-incremental).
    Single,
    /// One head per task; task `t` (1-based) uses head `t - 1`.
    PerTask { heads: usize },
}

impl HeadMode {
    pub fn head_count(self) -> usize {
        match self {
            HeadMode::Single => 1,
            HeadMode::PerTask { heads } => heads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub class_count: usize,
    pub learning_rate: f64,
    pub epochs_per_update: usize,
    pub init_seed: u64,
    pub head_mode: HeadMode,
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.input_dim == 0 {
            return bad("input_dim must be positive");
        }
        if self.class_count == 0 {
            return bad("class_count must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be a positive finite number");
        }
        if self.epochs_per_update == 0 {
            return bad("epochs_per_update must be at least 1");
        }
        if let Architecture::Mlp { hidden_width: 0 } = self.architecture {
            return bad("hidden_width must be positive");
        }
        if self.head_mode.head_count() == 0 {
            return bad("per-task head mode needs at least one head");
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout {
            architecture: self.architecture,
            input_dim: self.input_dim,
            class_count: self.class_count,
            head_count: self.head_mode.head_count(),
        }
    }
}

/// Binds slices of the flat parameter vector to layers.
///
/// Trunk (MLP only): `W1[hidden][input]`, `b1[hidden]`.
/// Each head: `W[class][features]`, `b[class]`, where `features` is the input
/// dimension for softmax and the hidden width for the MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub class_count: usize,
    pub head_count: usize,
}

impl Layout {
    fn hidden_width(&self) -> Option<usize> {
        match self.architecture {
            Architecture::Softmax => None,
            Architecture::Mlp { hidden_width } => Some(hidden_width),
        }
    }

    fn head_inputs(&self) -> usize {
        self.hidden_width().unwrap_or(self.input_dim)
    }

    fn trunk_len(&self) -> usize {
        self.hidden_width().map_or(0, |h| h * self.input_dim + h)
    }

    fn head_len(&self) -> usize {
        self.class_count * self.head_inputs() + self.class_count
    }

    fn head_offset(&self, head: usize) -> usize {
        self.trunk_len() + head * self.head_len()
    }

    pub fn param_count(&self) -> usize {
        self.trunk_len() + self.head_count * self.head_len()
    }
}

/// Flat vector of every learnable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: Layout,
}

impl ParameterVector {
    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.param_count() {
            return Err(Error::DimensionMismatch {
                expected: layout.param_count(),
                actual: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite parameter {v}")));
        }
        Ok(ParameterVector { values, layout })
    }

    pub fn zeros(layout: Layout) -> Self {
        ParameterVector {
            values: vec![0.0; layout.param_count()],
            layout,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn head_count(&self) -> usize {
        self.layout.head_count
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &ParameterVector) -> bool {
        self.layout == other.layout
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Hex SHA-256 of the little-endian parameter bytes.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for v in &self.values {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Identity of an example inside a continual run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExampleKey {
    pub task_id: usize,
    pub global_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
    /// 1-based task identifier.
    pub task_id: usize,
    /// Position within the task's training (or test) set.
    pub global_index: usize,
}

impl Example {
    pub fn key(&self) -> ExampleKey {
        ExampleKey {
            task_id: self.task_id,
            global_index: self.global_index,
        }
    }
}

/// An example paired with its loss weight (1 for the current task, ω for
/// replayed ones).
#[derive(Debug, Clone, Copy)]
pub struct WeightedExample<'a> {
    pub example: &'a Example,
    pub weight: f64,
}

impl<'a> WeightedExample<'a> {
    pub fn new(example: &'a Example, weight: f64) -> Self {
        WeightedExample { example, weight }
    }

    pub fn key(&self) -> ExampleKey {
        self.example.key()
    }
}

/// Index of the largest score, ties going to the smallest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy and 0-1 loss from a single forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub cross_entropy: f64,
    pub zero_one: u8,
}

struct Forward {
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Learner {
    config: LearnerConfig,
    layout: Layout,
}

impl Learner {
    pub fn new(config: LearnerConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        Ok(Learner { config, layout })
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Gaussian weights scaled by `1/sqrt(fan_in)`, zero biases; a pure
    /// function of the config and its `init_seed`.
    pub fn init_params(&self) -> ParameterVector {
        let mut rng = ChaCha8Rng::seed_from_u64(rng::derive_seed(self.config.init_seed, "init", 0));
        let layout = self.layout;
        let mut values = vec![0.0; layout.param_count()];
        let mut fill = |slice: &mut [f64], fan_in: usize| {
            let scale = 1.0 / (fan_in as f64).sqrt();
            for v in slice {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = z * scale;
            }
        };
        if let Some(h) = layout.hidden_width() {
            fill(&mut values[..h * layout.input_dim], layout.input_dim);
        }
        let inputs = layout.head_inputs();
        for head in 0..layout.head_count {
            let start = layout.head_offset(head);
            fill(&mut values[start..start + layout.class_count * inputs], inputs);
        }
        ParameterVector { values, layout }
    }

    fn check_params(&self, params: &ParameterVector) -> Result<()> {
        if params.layout != self.layout {
            return Err(Error::DimensionMismatch {
                expected: self.layout.param_count(),
                actual: params.len(),
            });
        }
        Ok(())
    }

    fn head_for(&self, task_id: Option<usize>) -> Result<usize> {
        match self.config.head_mode {
            HeadMode::Single => Ok(0),
            HeadMode::PerTask { heads } => {
                let task_id = task_id.ok_or(Error::MissingTaskId)?;
                if task_id == 0 || task_id > heads {
                    return Err(Error::UnknownHead {
                        task_id,
                        head_count: heads,
                    });
                }
                Ok(task_id - 1)
            }
        }
    }

    fn check_example(&self, example: &Example) -> Result<usize> {
        if example.x.len() != self.layout.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.layout.input_dim,
                actual: example.x.len(),
            });
        }
        if example.y >= self.layout.class_count {
            return Err(Error::LabelOutOfRange {
                label: example.y,
                class_count: self.layout.class_count,
            });
        }
        self.head_for(Some(example.task_id))
    }

    fn forward(&self, values: &[f64], x: &[f64], head: usize) -> Forward {
        let layout = &self.layout;
        let hidden = match layout.hidden_width() {
            None => Vec::new(),
            Some(h) => {
                let d = layout.input_dim;
                let (w1, rest) = values.split_at(h * d);
                let b1 = &rest[..h];
                (0..h)
                    .map(|j| {
                        let row = &w1[j * d..(j + 1) * d];
                        let z = row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b1[j];
                        z.tanh()
                    })
                    .collect()
            }
        };
        let features: &[f64] = if layout.hidden_width().is_some() { &hidden } else { x };
        let inputs = layout.head_inputs();
        let c = layout.class_count;
        let start = layout.head_offset(head);
        let w = &values[start..start + c * inputs];
        let b = &values[start + c * inputs..start + c * inputs + c];
        let logits = (0..c)
            .map(|k| {
                let row = &w[k * inputs..(k + 1) * inputs];
                row.iter().zip(features).map(|(w, f)| w * f).sum::<f64>() + b[k]
            })
            .collect();
        Forward { hidden, logits }
    }

    /// Class scores for `x`, under the head of `task_id` in per-task mode.
    pub fn logits(&self, params: &ParameterVector, x: &[f64], task_id: Option<usize>) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if x.len() != self.layout.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.layout.input_dim,
                actual: x.len(),
            });
        }
        let head = self.head_for(task_id)?;
        Ok(self.forward(&params.values, x, head).logits)
    }

    pub fn predict(&self, params: &ParameterVector, x: &[f64], task_id: Option<usize>) -> Result<usize> {
        Ok(argmax(&self.logits(params, x, task_id)?))
    }

    /// Clamped cross-entropy `-ln max(p(y|x), 1e-12)` and the argmax 0-1 loss.
    pub fn evaluate(&self, params: &ParameterVector, example: &Example) -> Result<Evaluation> {
        self.check_params(params)?;
        let head = self.check_example(example)?;
        let logits = self.forward(&params.values, &example.x, head).logits;
        let log_p = logits[example.y] - log_sum_exp(&logits);
        Ok(Evaluation {
            cross_entropy: (-log_p).min(-PROB_FLOOR.ln()),
            zero_one: u8::from(argmax(&logits) != example.y),
        })
    }

    pub fn per_example_loss(&self, params: &ParameterVector, example: &Example) -> Result<f64> {
        Ok(self.evaluate(params, example)?.cross_entropy)
    }

    pub fn zero_one_loss(&self, params: &ParameterVector, example: &Example) -> Result<u8> {
        Ok(self.evaluate(params, example)?.zero_one)
    }

    /// `(1/N) Σ w·CE` over `examples` (unclamped cross-entropy).
    pub fn weighted_objective(&self, params: &ParameterVector, examples: &[WeightedExample<'_>]) -> Result<f64> {
        self.check_params(params)?;
        if examples.is_empty() {
            return Err(Error::EmptyExamples);
        }
        let mut total = 0.0;
        for we in sorted(examples) {
            let head = self.check_example(we.example)?;
            let logits = self.forward(&params.values, &we.example.x, head).logits;
            total += we.weight * (log_sum_exp(&logits) - logits[we.example.y]);
        }
        Ok(total / examples.len() as f64)
    }

    /// Gradient of [`Learner::weighted_objective`], accumulated in ascending
    /// `(task_id, global_index)` order.
    pub fn gradient(&self, params: &ParameterVector, examples: &[WeightedExample<'_>]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if examples.is_empty() {
            return Err(Error::EmptyExamples);
        }
        let ordered = sorted(examples);
        for we in &ordered {
            self.check_example(we.example)?;
        }
        let mut grad = vec![0.0; params.len()];
        let scale = 1.0 / examples.len() as f64;
        for we in ordered {
            self.accumulate_gradient(&params.values, we, we.weight * scale, &mut grad);
        }
        Ok(grad)
    }

    fn accumulate_gradient(&self, values: &[f64], we: &WeightedExample<'_>, coeff: f64, grad: &mut [f64]) {
        let layout = &self.layout;
        let x = &we.example.x;
        let head = self.head_for(Some(we.example.task_id)).expect("validated");
        let fwd = self.forward(values, x, head);

        // dCE/dlogit = softmax - onehot
        let lse = log_sum_exp(&fwd.logits);
        let delta: Vec<f64> = fwd
            .logits
            .iter()
            .enumerate()
            .map(|(k, z)| ((z - lse).exp() - f64::from(u8::from(k == we.example.y))) * coeff)
            .collect();

        let features: &[f64] = if layout.hidden_width().is_some() { &fwd.hidden } else { x };
        let inputs = layout.head_inputs();
        let c = layout.class_count;
        let start = layout.head_offset(head);
        for k in 0..c {
            let row = &mut grad[start + k * inputs..start + (k + 1) * inputs];
            for (g, f) in row.iter_mut().zip(features) {
                *g += delta[k] * f;
            }
            grad[start + c * inputs + k] += delta[k];
        }

        if let Some(h) = layout.hidden_width() {
            let d = layout.input_dim;
            let w2 = &values[start..start + c * inputs];
            for j in 0..h {
                let upstream: f64 = (0..c).map(|k| delta[k] * w2[k * inputs + j]).sum();
                let dz = upstream * (1.0 - fwd.hidden[j] * fwd.hidden[j]);
                let row = &mut grad[j * d..(j + 1) * d];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += dz * xi;
                }
                grad[h * d + j] += dz;
            }
        }
    }

    /// `epochs_per_update` full-batch gradient steps on the weighted mean
    /// cross-entropy over `examples`.
    pub fn update(&self, params: &ParameterVector, examples: &[WeightedExample<'_>]) -> Result<ParameterVector> {
        self.train(params, examples, self.config.learning_rate, self.config.epochs_per_update)
    }

    /// Like [`Learner::update`] with an explicit step size and step count.
    pub fn train(
        &self,
        params: &ParameterVector,
        examples: &[WeightedExample<'_>],
        learning_rate: f64,
        steps: usize,
    ) -> Result<ParameterVector> {
        let mut next = params.clone();
        for _ in 0..steps {
            let grad = self.gradient(&next, examples)?;
            for (v, g) in next.values.iter_mut().zip(&grad) {
                *v -= learning_rate * g;
            }
        }
        Ok(next)
    }
}

fn sorted<'s, 'a>(examples: &'s [WeightedExample<'a>]) -> Vec<&'s WeightedExample<'a>> {
    let mut ordered: Vec<_> = examples.iter().collect();
    ordered.sort_by_key(|we| we.key());
    ordered
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn softmax_config(d: usize, c: usize) -> LearnerConfig {
        LearnerConfig {
            architecture: Architecture::Softmax,
            input_dim: d,
            class_count: c,
            learning_rate: 0.1,
            epochs_per_update: 1,
            init_seed: 1,
            head_mode: HeadMode::Single,
        }
    }

    fn mlp_config(d: usize, c: usize, h: usize) -> LearnerConfig {
        LearnerConfig {
            architecture: Architecture::Mlp { hidden_width: h },
            ..softmax_config(d, c)
        }
    }

    fn example(x: Vec<f64>, y: usize, task_id: usize, global_index: usize) -> Example {
        Example {
            x,
            y,
            task_id,
            global_index,
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, c: usize) -> Vec<Example> {
        (0..n)
            .map(|i| {
                let x = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                example(x, rng.random_range(0..c), 1, i)
            })
            .collect()
    }

    #[test]
    fn layout_arithmetic() {
        let learner = Learner::new(softmax_config(4, 3)).unwrap();
        assert_eq!(learner.init_params().len(), 15);
        let mlp = Learner::new(mlp_config(4, 3, 5)).unwrap();
        assert_eq!(mlp.init_params().len(), 4 * 5 + 5 + 5 * 3 + 3);
        let ti = Learner::new(LearnerConfig {
            head_mode: HeadMode::PerTask { heads: 2 },
            ..mlp_config(4, 3, 5)
        })
        .unwrap();
        assert_eq!(ti.init_params().len(), 25 + 2 * 18);
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = Learner::new(mlp_config(3, 2, 4)).unwrap().init_params();
        let b = Learner::new(mlp_config(3, 2, 4)).unwrap().init_params();
        assert!(a.bit_eq(&b));
        let c = Learner::new(LearnerConfig {
            init_seed: 2,
            ..mlp_config(3, 2, 4)
        })
        .unwrap()
        .init_params();
        assert!(!a.bit_eq(&c));
        // biases start at zero
        assert!(a.values()[12..16].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_invalid_configs() {
        assert!(Learner::new(LearnerConfig {
            learning_rate: 0.0,
            ..softmax_config(2, 2)
        })
        .is_err());
        assert!(Learner::new(LearnerConfig {
            epochs_per_update: 0,
            ..softmax_config(2, 2)
        })
        .is_err());
        assert!(Learner::new(mlp_config(2, 2, 0)).is_err());
    }

    #[test]
    fn uniform_predictor_loss_is_ln_c() {
        let learner = Learner::new(softmax_config(3, 4)).unwrap();
        let params = ParameterVector::zeros(*learner.layout());
        let ex = example(vec![1.0, -2.0, 0.5], 2, 1, 0);
        assert_abs_diff_eq!(learner.per_example_loss(&params, &ex).unwrap(), 4f64.ln(), epsilon = 1e-15);
        assert_eq!(learner.predict(&params, &ex.x, None).unwrap(), 0);
    }

    #[test]
    fn half_probability_loss() {
        let learner = Learner::new(softmax_config(1, 2)).unwrap();
        let params = ParameterVector::zeros(*learner.layout());
        let ex = example(vec![3.0], 1, 1, 0);
        assert_abs_diff_eq!(learner.per_example_loss(&params, &ex).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
        // exact tie: smaller index wins, so label 0 is correct and label 1 is not
        assert_eq!(learner.zero_one_loss(&params, &example(vec![3.0], 0, 1, 0)).unwrap(), 0);
        assert_eq!(learner.zero_one_loss(&params, &ex).unwrap(), 1);
    }

    #[test]
    fn confident_predictions() {
        let learner = Learner::new(softmax_config(2, 3)).unwrap();
        let mut params = ParameterVector::zeros(*learner.layout());
        // row for class 2 dominates on x = (1, 0)
        params.values_mut()[2 * 2] = 100.0;
        let right = example(vec![1.0, 0.0], 2, 1, 0);
        let wrong = example(vec![1.0, 0.0], 1, 1, 0);
        assert_eq!(learner.predict(&params, &right.x, None).unwrap(), 2);
        assert_eq!(learner.zero_one_loss(&params, &right).unwrap(), 0);
        assert_eq!(learner.zero_one_loss(&params, &wrong).unwrap(), 1);
        // clamped, still finite
        let ce = learner.per_example_loss(&params, &wrong).unwrap();
        assert_abs_diff_eq!(ce, -PROB_FLOOR.ln(), epsilon = 1e-9);
    }

    #[test]
    fn loss_matches_independent_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let learner = Learner::new(softmax_config(4, 3)).unwrap();
        for _ in 0..50 {
            let values: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
            let params = ParameterVector::from_values(*learner.layout(), values.clone()).unwrap();
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = rng.random_range(0..3);
            // naive softmax: W is row-major [class][input], then biases
            let scores: Vec<f64> = (0..3)
                .map(|k| (0..4).map(|i| values[k * 4 + i] * x[i]).sum::<f64>() + values[12 + k])
                .collect();
            let denom: f64 = scores.iter().map(|s| s.exp()).sum();
            let expected = -(scores[y].exp() / denom).ln();
            let got = learner.per_example_loss(&params, &example(x, y, 1, 0)).unwrap();
            assert_abs_diff_eq!(got, expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn predict_agrees_with_zero_one_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let learner = Learner::new(mlp_config(3, 4, 6)).unwrap();
        let params = learner.init_params();
        for ex in random_batch(&mut rng, 1000, 3, 4) {
            let pred = learner.predict(&params, &ex.x, None).unwrap();
            let zo = learner.zero_one_loss(&params, &ex).unwrap();
            assert_eq!(zo == 0, pred == ex.y);
        }
    }

    fn finite_difference_check(config: LearnerConfig, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let learner = Learner::new(config.clone()).unwrap();
        let n = learner.layout().param_count();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let params = ParameterVector::from_values(*learner.layout(), values).unwrap();
        let batch = random_batch(&mut rng, 5, config.input_dim, config.class_count);
        let weighted: Vec<_> = batch
            .iter()
            .enumerate()
            .map(|(i, e)| WeightedExample::new(e, if i % 2 == 0 { 1.0 } else { 3.0 }))
            .collect();
        let grad = learner.gradient(&params, &weighted).unwrap();
        let h = 1e-6;
        for i in 0..n {
            let mut plus = params.clone();
            plus.values_mut()[i] += h;
            let mut minus = params.clone();
            minus.values_mut()[i] -= h;
            let fd = (learner.weighted_objective(&plus, &weighted).unwrap()
                - learner.weighted_objective(&minus, &weighted).unwrap())
                / (2.0 * h);
            let tol = 1e-4 * fd.abs().max(grad[i].abs()).max(1e-3);
            assert!((fd - grad[i]).abs() <= tol, "param {i}: fd {fd} vs analytic {}", grad[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            finite_difference_check(softmax_config(3, 4), seed);
            finite_difference_check(mlp_config(3, 3, 4), 100 + seed);
        }
        finite_difference_check(
            LearnerConfig {
                head_mode: HeadMode::PerTask { heads: 1 },
                ..mlp_config(2, 2, 3)
            },
            999,
        );
    }

    #[test]
    fn single_example_step_moves_against_gradient() {
        let learner = Learner::new(softmax_config(2, 3)).unwrap();
        let params = learner.init_params();
        let ex = example(vec![0.5, -1.5], 1, 1, 0);
        let batch = [WeightedExample::new(&ex, 1.0)];
        let grad = learner.gradient(&params, &batch).unwrap();
        let next = learner.update(&params, &batch).unwrap();
        for i in 0..params.len() {
            assert_abs_diff_eq!(next.values()[i], params.values()[i] - 0.1 * grad[i], epsilon = 0.0);
        }
        assert!(learner.per_example_loss(&next, &ex).unwrap() < learner.per_example_loss(&params, &ex).unwrap());
    }

    #[test]
    fn update_is_deterministic_and_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let learner = Learner::new(LearnerConfig {
            epochs_per_update: 5,
            ..mlp_config(3, 3, 4)
        })
        .unwrap();
        let params = learner.init_params();
        let batch = random_batch(&mut rng, 20, 3, 3);
        let forward: Vec<_> = batch.iter().map(|e| WeightedExample::new(e, 1.0)).collect();
        let reversed: Vec<_> = batch.iter().rev().map(|e| WeightedExample::new(e, 1.0)).collect();
        let a = learner.update(&params, &forward).unwrap();
        let b = learner.update(&params, &forward).unwrap();
        let c = learner.update(&params, &reversed).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.bit_eq(&c));
    }

    #[test]
    fn weight_scaling_matches_learning_rate_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let learner = Learner::new(softmax_config(3, 3)).unwrap();
        let params = learner.init_params();
        let batch = random_batch(&mut rng, 8, 3, 3);
        let ones: Vec<_> = batch.iter().map(|e| WeightedExample::new(e, 1.0)).collect();
        // power-of-two weight: scaling is exact in binary floating point
        let heavy: Vec<_> = batch.iter().map(|e| WeightedExample::new(e, 16.0)).collect();
        let a = learner.train(&params, &ones, 0.4, 1).unwrap();
        let b = learner.train(&params, &heavy, 0.4 / 16.0, 1).unwrap();
        assert!(a.bit_eq(&b));
        let omega: Vec<_> = batch.iter().map(|e| WeightedExample::new(e, 25.0)).collect();
        let c = learner.train(&params, &omega, 0.4 / 25.0, 1).unwrap();
        for (x, y) in a.values().iter().zip(c.values()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-14);
        }
    }

    #[test]
    fn per_task_heads_are_routed_by_task_id() {
        let learner = Learner::new(LearnerConfig {
            head_mode: HeadMode::PerTask { heads: 2 },
            ..softmax_config(2, 2)
        })
        .unwrap();
        let params = learner.init_params();
        assert!(matches!(learner.predict(&params, &[1.0, 0.0], None), Err(Error::MissingTaskId)));
        assert!(matches!(
            learner.predict(&params, &[1.0, 0.0], Some(3)),
            Err(Error::UnknownHead { .. })
        ));
        let ex = example(vec![1.0, 2.0], 1, 2, 0);
        let next = learner.update(&params, &[WeightedExample::new(&ex, 1.0)]).unwrap();
        // only the second head moves
        assert_eq!(&next.values()[..6], &params.values()[..6]);
        assert_ne!(&next.values()[6..], &params.values()[6..]);
    }

    #[test]
    fn dimension_errors() {
        let learner = Learner::new(softmax_config(2, 2)).unwrap();
        let params = learner.init_params();
        let bad = example(vec![1.0], 0, 1, 0);
        assert!(matches!(learner.evaluate(&params, &bad), Err(Error::DimensionMismatch { .. })));
        assert!(learner.update(&params, &[WeightedExample::new(&bad, 1.0)]).is_err());
        assert!(matches!(learner.update(&params, &[]), Err(Error::EmptyExamples)));
        let other = Learner::new(softmax_config(3, 2)).unwrap().init_params();
        assert!(learner.predict(&other, &[1.0, 1.0], None).is_err());
    }
}
