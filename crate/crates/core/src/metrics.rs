//! Continual-learning evaluation: the lower-triangular accuracy matrix and
//! the average accuracy, average forgetting and plasticity derived from it.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bounds::Certificate;
use crate::error::{Error, Result};
use crate::model::{Learner, ParameterVector};
use crate::tasks::{Scenario, TaskDataset};

/// Reference values reported for CoP2L with an MLP on 5-task class-incremental
/// MNIST at full scale (percent). Used in reports only.
pub const MNIST_COP2L_MLP_AVG_ACCURACY: f64 = 95.12;
pub const MNIST_COP2L_MLP_AVG_FORGETTING: f64 = 3.35;

/// `A[T'][t]`: accuracy on task `t`'s test set after training through task
/// `T'`, stored for `t <= T'` (1-based on the public API).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    tasks: usize,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix {
            tasks,
            rows: vec![Vec::new(); tasks],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::new(rows.len());
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != i + 1 {
                return Err(Error::UndefinedMetric(format!("row {} has {} entries", i + 1, row.len())));
            }
            m.set_row(i + 1, row)?;
        }
        Ok(m)
    }

    pub fn dimension(&self) -> usize {
        self.tasks
    }

    /// Stores the accuracies of `θ_{checkpoint}` on tasks `1..=checkpoint`.
    pub fn set_row(&mut self, checkpoint: usize, row: Vec<f64>) -> Result<()> {
        if checkpoint == 0 || checkpoint > self.tasks {
            return Err(Error::UndefinedMetric(format!("checkpoint {checkpoint} outside 1..={}", self.tasks)));
        }
        if row.len() != checkpoint {
            return Err(Error::UndefinedMetric(format!(
                "row {checkpoint} needs {checkpoint} entries, got {}",
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows[checkpoint - 1] = row;
        Ok(())
    }

    pub fn get(&self, checkpoint: usize, task: usize) -> Option<f64> {
        self.rows.get(checkpoint.checked_sub(1)?)?.get(task.checked_sub(1)?).copied()
    }

    fn row(&self, checkpoint: usize) -> Result<&[f64]> {
        match checkpoint.checked_sub(1).and_then(|i| self.rows.get(i)) {
            Some(r) if r.len() == checkpoint => Ok(r),
            _ => Err(Error::UndefinedMetric(format!("row {checkpoint} is incomplete"))),
        }
    }

    fn diagonal(&self, upto: usize) -> Result<Vec<f64>> {
        (1..=upto)
            .map(|t| {
                self.get(t, t)
                    .ok_or_else(|| Error::UndefinedMetric(format!("diagonal entry {t} is missing")))
            })
            .collect()
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.is_empty())
            .map(|(i, r)| (i + 1, r.as_slice()))
    }
}

/// Mean accuracy over tasks `1..=checkpoint` after training through `checkpoint`.
pub fn average_accuracy(m: &AccuracyMatrix, checkpoint: usize) -> Result<f64> {
    let row = m.row(checkpoint)?;
    Ok(row.iter().sum::<f64>() / checkpoint as f64)
}

/// `(1/(T'−1)) Σ_{t<T'} (A[t][t] − A[T'][t])`; negative values mean backward
/// transfer.
pub fn average_forgetting(m: &AccuracyMatrix, checkpoint: usize) -> Result<f64> {
    if checkpoint < 2 {
        return Err(Error::UndefinedMetric("forgetting needs at least two tasks".into()));
    }
    let row = m.row(checkpoint)?;
    let diag = m.diagonal(checkpoint - 1)?;
    let total: f64 = diag.iter().zip(row).map(|(d, r)| d - r).sum();
    Ok(total / (checkpoint - 1) as f64)
}

/// Mean of the diagonal `A[t][t]` for `t <= checkpoint`.
pub fn plasticity(m: &AccuracyMatrix, checkpoint: usize) -> Result<f64> {
    let diag = m.diagonal(checkpoint)?;
    if diag.is_empty() {
        return Err(Error::UndefinedMetric("plasticity of zero tasks".into()));
    }
    Ok(diag.iter().sum::<f64>() / diag.len() as f64)
}

/// Test accuracy of `params` on one task; per-task heads are selected by the
/// example's task id in task-incremental streams.
pub fn task_accuracy(learner: &Learner, params: &ParameterVector, task: &TaskDataset) -> Result<f64> {
    if task.test.is_empty() {
        return Err(Error::UndefinedMetric(format!("task {} has no test data", task.task_id)));
    }
    let mut correct = 0usize;
    for ex in &task.test {
        correct += usize::from(learner.zero_one_loss(params, ex)? == 0);
    }
    Ok(correct as f64 / task.test.len() as f64)
}

/// Accuracies of `params` on tasks `1..=tasks.len()`.
pub fn accuracy_row(learner: &Learner, params: &ParameterVector, tasks: &[TaskDataset]) -> Result<Vec<f64>> {
    tasks.iter().map(|t| task_accuracy(learner, params, t)).collect()
}

/// Whether the scenario routes evaluation through per-task heads.
pub fn uses_task_identity(scenario: Scenario) -> bool {
    scenario == Scenario::TaskIncremental
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub checkpoint_task: usize,
    pub task: usize,
    pub accuracy: f64,
    pub certificate: Option<Certificate>,
}

pub const METRICS_HEADER: [&str; 7] = [
    "checkpoint_task",
    "task",
    "accuracy",
    "bound",
    "complement_loss",
    "i_size",
    "j_size",
];

/// Joins the accuracy matrix with the matching certificates (if any).
pub fn metrics_rows(matrix: &AccuracyMatrix, certificates: &[Certificate]) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for (checkpoint, accs) in matrix.rows() {
        for (i, &accuracy) in accs.iter().enumerate() {
            let task = i + 1;
            let certificate = certificates
                .iter()
                .find(|c| c.task_count == checkpoint && c.task_id == task)
                .cloned();
            rows.push(MetricsRow {
                checkpoint_task: checkpoint,
                task,
                accuracy,
                certificate,
            });
        }
    }
    rows
}

/// Writes the metrics CSV; `preamble` lines are emitted first as `# ` comments.
pub fn write_metrics_csv<W: Write>(mut out: W, preamble: &[String], rows: &[MetricsRow]) -> Result<()> {
    for line in preamble {
        writeln!(out, "# {line}").map_err(|e| Error::io("writing metrics", e))?;
    }
    let mut writer = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Csv(e.to_string());
    writer.write_record(METRICS_HEADER).map_err(csv_err)?;
    for row in rows {
        let (bound, loss, i, j) = match &row.certificate {
            Some(c) => (
                c.bound.get().to_string(),
                c.complement_loss.get().to_string(),
                c.i_size.to_string(),
                c.j_size.to_string(),
            ),
            None => Default::default(),
        };
        writer
            .write_record([
                row.checkpoint_task.to_string(),
                row.task.to_string(),
                row.accuracy.to_string(),
                bound,
                loss,
                i,
                j,
            ])
            .map_err(csv_err)?;
    }
    writer.flush().map_err(|e| Error::io("writing metrics", e))
}

/// A parsed metrics CSV row; bound columns are `None` for baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub checkpoint_task: usize,
    pub task: usize,
    pub accuracy: f64,
    pub bound: Option<f64>,
    pub complement_loss: Option<f64>,
    pub i_size: Option<usize>,
    pub j_size: Option<usize>,
}

pub fn read_metrics_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let headers = reader.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Csv(format!("missing column '{name}'")))
    };
    let cols: Vec<usize> = METRICS_HEADER.iter().map(|n| column(n)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
        let text = |k: usize| rec.get(cols[k]).unwrap_or("").trim().to_string();
        fn parse<T: std::str::FromStr>(row: usize, s: &str) -> Result<T> {
            s.parse().map_err(|_| Error::Csv(format!("row {row}: bad value '{s}'")))
        }
        let opt_f = |k: usize| -> Result<Option<f64>> {
            let s = text(k);
            if s.is_empty() { Ok(None) } else { parse(row, &s).map(Some) }
        };
        let opt_u = |k: usize| -> Result<Option<usize>> {
            let s = text(k);
            if s.is_empty() { Ok(None) } else { parse(row, &s).map(Some) }
        };
        out.push(MetricsRecord {
            checkpoint_task: parse(row, &text(0))?,
            task: parse(row, &text(1))?,
            accuracy: parse(row, &text(2))?,
            bound: opt_f(3)?,
            complement_loss: opt_f(4)?,
            i_size: opt_u(5)?,
            j_size: opt_u(6)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn accuracy_examples() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.9]]).unwrap();
        assert_abs_diff_eq!(average_accuracy(&m, 1).unwrap(), 0.9);
        let m = AccuracyMatrix::from_rows(vec![vec![1.0], vec![1.0, 0.0]]).unwrap();
        assert_abs_diff_eq!(average_accuracy(&m, 2).unwrap(), 0.5);
        let partial = AccuracyMatrix::new(3);
        assert!(average_accuracy(&partial, 2).is_err());
    }

    #[test]
    fn forgetting_examples() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.7]]).unwrap();
        assert_abs_diff_eq!(average_forgetting(&m, 2).unwrap(), 0.1, epsilon = 1e-15);
        let flat = AccuracyMatrix::from_rows(vec![vec![0.6], vec![0.6, 0.9], vec![0.6, 0.9, 0.4]]).unwrap();
        assert_eq!(average_forgetting(&flat, 3).unwrap(), 0.0);
        let gain = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.95, 0.5]]).unwrap();
        assert_abs_diff_eq!(average_forgetting(&gain, 2).unwrap(), -0.05, epsilon = 1e-15);
        assert!(matches!(average_forgetting(&m, 1), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn plasticity_examples() {
        let m = AccuracyMatrix::from_rows(vec![vec![1.0], vec![0.3, 0.8]]).unwrap();
        assert_abs_diff_eq!(plasticity(&m, 2).unwrap(), 0.9);
        assert_eq!(plasticity(&m, 1).unwrap(), 1.0);
        let zeros = AccuracyMatrix::from_rows(vec![vec![0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(plasticity(&zeros, 2).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_rows() {
        let mut m = AccuracyMatrix::new(2);
        assert!(m.set_row(1, vec![1.5]).is_err());
        assert!(m.set_row(2, vec![0.5]).is_err());
        assert!(m.set_row(3, vec![0.5, 0.5, 0.5]).is_err());
        assert!(AccuracyMatrix::from_rows(vec![vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn csv_round_trip_without_certificates() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.5], vec![0.25, 0.75]]).unwrap();
        let rows = metrics_rows(&m, &[]);
        let mut bytes = Vec::new();
        write_metrics_csv(&mut bytes, &["engine test".into()], &rows).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("# engine test\ncheckpoint_task,task,accuracy,bound,complement_loss,i_size,j_size\n"));
        let back = read_metrics_csv(bytes.as_slice()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[2].accuracy, 0.75);
        assert_eq!(back[2].bound, None);
        assert!(read_metrics_csv("task,accuracy\n1,0.5\n".as_bytes()).is_err());
    }
}
