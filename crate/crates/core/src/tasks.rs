//! Task streams: splitting labelled data into class-, task- or
//! domain-incremental sequences, synthetic Gaussian blobs, and IDX/CSV
//! ingestion.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Example;
use crate::rng;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    ClassIncremental,
    TaskIncremental,
    DomainIncremental,
}

/// A labelled input before it is assigned to a task.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub input_dim: usize,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(train: Vec<Sample>, test: Vec<Sample>) -> Result<Self> {
        let input_dim = train
            .first()
            .map(|s| s.x.len())
            .ok_or(Error::EmptyExamples)?;
        if let Some(bad) = train.iter().chain(&test).find(|s| s.x.len() != input_dim) {
            return Err(Error::DimensionMismatch {
                expected: input_dim,
                actual: bad.x.len(),
            });
        }
        let class_count = train.iter().chain(&test).map(|s| s.y + 1).max().unwrap_or(0);
        Ok(Dataset {
            train,
            test,
            input_dim,
            class_count,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: usize,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub label_set: Vec<usize>,
}

impl TaskDataset {
    pub fn n_train(&self) -> usize {
        self.train.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub scenario: Scenario,
    pub tasks: Vec<TaskDataset>,
    pub input_dim: usize,
    pub total_class_count: usize,
}

impl TaskStream {
    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, task_id: usize) -> &TaskDataset {
        &self.tasks[task_id - 1]
    }

    /// Checks the structural invariants: 1-based consecutive task ids,
    /// `global_index` equal to position, non-empty training sets, and
    /// disjoint (CI/TI) or identical (DI) label sets.
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("task stream is empty".into()));
        }
        for (pos, task) in self.tasks.iter().enumerate() {
            if task.task_id != pos + 1 {
                return Err(Error::Config(format!("task at position {pos} has id {}", task.task_id)));
            }
            if task.train.is_empty() {
                return Err(Error::Config(format!("task {} has no training data", task.task_id)));
            }
            for split in [&task.train, &task.test] {
                for (i, ex) in split.iter().enumerate() {
                    if ex.task_id != task.task_id || ex.global_index != i {
                        return Err(Error::Config(format!("task {} example {i} is mislabelled", task.task_id)));
                    }
                    if ex.x.len() != self.input_dim {
                        return Err(Error::DimensionMismatch {
                            expected: self.input_dim,
                            actual: ex.x.len(),
                        });
                    }
                }
            }
        }
        match self.scenario {
            Scenario::ClassIncremental | Scenario::TaskIncremental => {
                let mut seen = BTreeSet::new();
                for task in &self.tasks {
                    for &label in &task.label_set {
                        if !seen.insert(label) {
                            return Err(Error::Config(format!("label {label} appears in two tasks")));
                        }
                    }
                }
            }
            Scenario::DomainIncremental => {
                let first = &self.tasks[0].label_set;
                if self.tasks.iter().any(|t| &t.label_set != first) {
                    return Err(Error::Config("domain-incremental tasks must share labels".into()));
                }
            }
        }
        Ok(())
    }
}

fn to_examples<'a>(samples: impl Iterator<Item = &'a Sample>, task_id: usize) -> Vec<Example> {
    samples
        .enumerate()
        .map(|(i, s)| Example {
            x: s.x.clone(),
            y: s.y,
            task_id,
            global_index: i,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "order", rename_all = "snake_case")]
pub enum ClassOrder {
    Identity,
    Seeded { seed: u64 },
}

/// Groups classes into consecutive tasks of `classes_per_task` labels each,
/// after permuting the class order.
pub fn split_by_class(
    dataset: &Dataset,
    scenario: Scenario,
    classes_per_task: usize,
    order: ClassOrder,
) -> Result<TaskStream> {
    if scenario == Scenario::DomainIncremental {
        return Err(Error::Config("split_by_class builds class- or task-incremental streams".into()));
    }
    let classes = dataset.class_count;
    if classes_per_task == 0 || !classes.is_multiple_of(classes_per_task) {
        return Err(Error::Divisibility {
            classes,
            per_task: classes_per_task,
        });
    }
    let mut class_order: Vec<usize> = (0..classes).collect();
    if let ClassOrder::Seeded { seed } = order {
        class_order.shuffle(&mut rng::stream(seed, "class-order", 0));
    }
    let tasks = class_order
        .chunks(classes_per_task)
        .enumerate()
        .map(|(pos, group)| {
            let task_id = pos + 1;
            let train = to_examples(dataset.train.iter().filter(|s| group.contains(&s.y)), task_id);
            let test = to_examples(dataset.test.iter().filter(|s| group.contains(&s.y)), task_id);
            let mut labels = group.to_vec();
            labels.sort_unstable();
            TaskDataset {
                task_id,
                train,
                test,
                label_set: labels,
            }
        })
        .collect();
    Ok(TaskStream {
        scenario,
        tasks,
        input_dim: dataset.input_dim,
        total_class_count: classes,
    })
}

/// Parameters of a synthetic Gaussian-blob stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub n_per_class: usize,
    pub n_test_per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 || self.classes_per_task == 0 || self.n_per_class == 0 || self.dim == 0 {
            return Err(Error::Config("blob counts and dimension must be positive".into()));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::Config("separation must be finite and non-negative".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn class_count(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }

    fn means(&self) -> Vec<Vec<f64>> {
        let mut rng = rng::stream(self.seed, "blob-means", 0);
        (0..self.class_count())
            .map(|_| {
                let dir: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                dir.into_iter().map(|v| v / norm * self.separation).collect()
            })
            .collect()
    }

    fn draw(&self, means: &[Vec<f64>], classes: &[usize], per_class: usize, purpose: &str, index: u64) -> Vec<Sample> {
        let mut rng = rng::stream(self.seed, purpose, index);
        (0..per_class * classes.len())
            .map(|i| {
                let y = classes[i % classes.len()];
                let x = means[y]
                    .iter()
                    .map(|m| m + self.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Sample { x, y }
            })
            .collect()
    }

    /// All classes as one dataset (used as a domain-incremental base).
    pub fn dataset(&self) -> Result<Dataset> {
        self.validate()?;
        let means = self.means();
        let classes: Vec<usize> = (0..self.class_count()).collect();
        let train = self.draw(&means, &classes, self.n_per_class, "blob-train", 0);
        let test = self.draw(&means, &classes, self.n_test_per_class, "blob-test", 0);
        Dataset::new(train, test)
    }
}

/// Class-conditional isotropic Gaussians, `classes_per_task` new classes per
/// task. Each class mean lies on a seeded random direction at distance
/// `separation` from the origin.
pub fn synthetic_blobs(spec: &BlobSpec, scenario: Scenario) -> Result<TaskStream> {
    spec.validate()?;
    if scenario == Scenario::DomainIncremental {
        return Err(Error::Config("blob streams are class- or task-incremental".into()));
    }
    let means = spec.means();
    let tasks = (0..spec.num_tasks)
        .map(|pos| {
            let task_id = pos + 1;
            let classes: Vec<usize> = (pos * spec.classes_per_task..(pos + 1) * spec.classes_per_task).collect();
            let train = spec.draw(&means, &classes, spec.n_per_class, "blob-train", task_id as u64);
            let test = spec.draw(&means, &classes, spec.n_test_per_class, "blob-test", task_id as u64);
            TaskDataset {
                task_id,
                train: to_examples(train.iter(), task_id),
                test: to_examples(test.iter(), task_id),
                label_set: classes,
            }
        })
        .collect();
    Ok(TaskStream {
        scenario,
        tasks,
        input_dim: spec.dim,
        total_class_count: spec.class_count(),
    })
}

/// Feature permutation used for task `task_id`; task 1 keeps the identity.
pub fn task_permutation(dim: usize, task_id: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..dim).collect();
    if task_id > 1 {
        perm.shuffle(&mut rng::stream(seed, "feature-permutation", task_id as u64));
    }
    perm
}

/// `out[i] = x[perm[i]]`.
pub fn apply_permutation(x: &[f64], perm: &[usize]) -> Vec<f64> {
    perm.iter().map(|&p| x[p]).collect()
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

type Transform<'a> = Box<dyn Fn(&[f64]) -> Vec<f64> + 'a>;

fn domain_stream(base: &Dataset, transforms: Vec<Transform<'_>>) -> TaskStream {
    let labels: Vec<usize> = (0..base.class_count).collect();
    let tasks = transforms
        .iter()
        .enumerate()
        .map(|(pos, f)| {
            let task_id = pos + 1;
            let map = |samples: &[Sample]| -> Vec<Sample> {
                samples
                    .iter()
                    .map(|s| Sample {
                        x: f(&s.x),
                        y: s.y,
                    })
                    .collect()
            };
            TaskDataset {
                task_id,
                train: to_examples(map(&base.train).iter(), task_id),
                test: to_examples(map(&base.test).iter(), task_id),
                label_set: labels.clone(),
            }
        })
        .collect();
    TaskStream {
        scenario: Scenario::DomainIncremental,
        tasks,
        input_dim: base.input_dim,
        total_class_count: base.class_count,
    }
}

/// Domain-incremental stream: task `t` applies a fixed seeded permutation of
/// the input features (identity for task 1).
pub fn permute_features(base: &Dataset, num_tasks: usize, seed: u64) -> Result<TaskStream> {
    if num_tasks == 0 {
        return Err(Error::Config("num_tasks must be positive".into()));
    }
    let transforms = (1..=num_tasks)
        .map(|t| {
            let perm = task_permutation(base.input_dim, t, seed);
            Box::new(move |x: &[f64]| apply_permutation(x, &perm)) as Box<dyn Fn(&[f64]) -> Vec<f64>>
        })
        .collect();
    Ok(domain_stream(base, transforms))
}

/// Rotates a flattened square image by `degrees` counter-clockwise about its
/// centre with bilinear resampling; pixels sampled outside the grid are 0.
pub fn rotate_image(x: &[f64], degrees: f64) -> Result<Vec<f64>> {
    let side = (x.len() as f64).sqrt().round() as usize;
    if side * side != x.len() {
        return Err(Error::NonSquareInput(x.len()));
    }
    if degrees == 0.0 {
        return Ok(x.to_vec());
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let centre = (side as f64 - 1.0) / 2.0;
    let pixel = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= side as isize || c >= side as isize {
            0.0
        } else {
            x[r as usize * side + c as usize]
        }
    };
    let mut out = vec![0.0; x.len()];
    for r in 0..side {
        for c in 0..side {
            let (dy, dx) = (r as f64 - centre, c as f64 - centre);
            // inverse rotation gives the source location
            let sx = cos * dx - sin * dy + centre;
            let sy = sin * dx + cos * dy + centre;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            out[r * side + c] = (1.0 - fy) * ((1.0 - fx) * pixel(y0, x0) + fx * pixel(y0, x0 + 1))
                + fy * ((1.0 - fx) * pixel(y0 + 1, x0) + fx * pixel(y0 + 1, x0 + 1));
        }
    }
    Ok(out)
}

/// Domain-incremental stream: task `t` rotates every image by `angles[t-1]`
/// degrees.
pub fn rotate_2d(base: &Dataset, angles: &[f64]) -> Result<TaskStream> {
    if angles.is_empty() {
        return Err(Error::Config("at least one rotation angle is required".into()));
    }
    let side = (base.input_dim as f64).sqrt().round() as usize;
    if side * side != base.input_dim {
        return Err(Error::NonSquareInput(base.input_dim));
    }
    let transforms = angles
        .iter()
        .map(|&a| {
            Box::new(move |x: &[f64]| rotate_image(x, a).expect("square checked")) as Box<dyn Fn(&[f64]) -> Vec<f64>>
        })
        .collect();
    Ok(domain_stream(base, transforms))
}

/// Keeps the first `max_per_class` samples of each class, in order.
pub fn subsample_per_class(samples: Vec<Sample>, max_per_class: usize) -> Vec<Sample> {
    let mut counts = std::collections::HashMap::new();
    samples
        .into_iter()
        .filter(|s| {
            let c = counts.entry(s.y).or_insert(0usize);
            *c += 1;
            *c <= max_per_class
        })
        .collect()
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> IdxReader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let word = self.bytes.get(self.pos..end).ok_or_else(|| Error::Truncated {
            path: self.path.to_path_buf(),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(word.try_into().expect("4 bytes")))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| Error::Truncated {
            path: self.path.to_path_buf(),
        })?;
        let data = self.bytes.get(self.pos..end).ok_or_else(|| Error::Truncated {
            path: self.path.to_path_buf(),
        })?;
        self.pos = end;
        Ok(data)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(Error::BadMagic {
                path: self.path.to_path_buf(),
                found,
                expected,
            });
        }
        Ok(())
    }
}

/// Parses IDX image bytes into flattened pixel rows scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = IdxReader { bytes, pos: 0, path };
    r.magic(IDX_IMAGES_MAGIC)?;
    let count = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let pixels = rows * cols;
    (0..count)
        .map(|_| Ok(r.take(pixels)?.iter().map(|&b| f64::from(b) / 255.0).collect()))
        .collect()
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let mut r = IdxReader { bytes, pos: 0, path };
    r.magic(IDX_LABELS_MAGIC)?;
    let count = r.u32()? as usize;
    Ok(r.take(count)?.iter().map(|&b| usize::from(b)).collect())
}

/// Loads an IDX image/label file pair.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<Sample>> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::io(format!("reading {}", p.display()), e));
    let images = parse_idx_images(&read(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read(labels_path)?, labels_path)?;
    if images.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    Ok(images.into_iter().zip(labels).map(|(x, y)| Sample { x, y }).collect())
}

/// Reads CSV with header `x0,...,x{d-1},label`.
pub fn load_csv(path: &Path) -> Result<Vec<Sample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_csv(file)
}

pub fn parse_csv<R: std::io::Read>(input: R) -> Result<Vec<Sample>> {
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
    let dim = headers.len().checked_sub(1).filter(|&d| d > 0).ok_or_else(|| Error::Csv("need at least one feature column".into()))?;
    for (i, h) in headers.iter().enumerate() {
        let expected = if i == dim { "label".to_string() } else { format!("x{i}") };
        if h.trim() != expected {
            return Err(Error::Csv(format!("column {i} is '{h}', expected '{expected}'")));
        }
    }
    reader
        .records()
        .enumerate()
        .map(|(row, rec)| {
            let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
            let field = |i: usize| rec.get(i).map(str::trim).unwrap_or("");
            let x = (0..dim)
                .map(|i| {
                    field(i)
                        .parse::<f64>()
                        .map_err(|_| Error::Csv(format!("row {row}: bad value '{}'", field(i))))
                })
                .collect::<Result<Vec<_>>>()?;
            let y = field(dim)
                .parse::<usize>()
                .map_err(|_| Error::Csv(format!("row {row}: bad label '{}'", field(dim))))?;
            Ok(Sample { x, y })
        })
        .collect()
}
