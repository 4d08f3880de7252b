//! Executes every (method, seed) cell of an experiment and writes its
//! artifacts.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::render::render_bound_figure;
use crate::baselines::run_baseline;
use crate::bounds::Certificate;
use crate::continual::{cop2l_train, ENGINE_VERSION};
use crate::error::{Error, Result};
use crate::metrics::{average_accuracy, average_forgetting, metrics_rows, plasticity, write_metrics_csv, AccuracyMatrix};
use crate::model::{write_checkpoint, CheckpointHeader, ParameterVector};
use crate::tasks::Scenario;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CERTIFICATES_FILE: &str = "certificates.json";
pub const RECORD_FILE: &str = "record.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const FIGURE_FILE: &str = "bounds.svg";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const FAILED_MARKER: &str = "FAILED";
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

/// Contents of `certificates.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateFile {
    pub engine_version: String,
    pub config_hash: String,
    pub run_hash: String,
    pub certificates: Vec<Certificate>,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Worker threads for independent cells; `0` uses rayon's default.
    pub jobs: usize,
}

/// Final-checkpoint metrics of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub method: Method,
    pub seed: u64,
    pub average_accuracy: f64,
    pub average_forgetting: Option<f64>,
    pub plasticity: f64,
    /// Mean final certificate over tasks (CoP2L only).
    pub mean_bound: Option<f64>,
    pub dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub cells: Vec<CellSummary>,
    pub failures: Vec<(Method, u64, String)>,
}

impl ExperimentReport {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn cell_dir(out: &Path, method: Method, seed: u64) -> PathBuf {
    out.join(method.name()).join(format!("seed_{seed}"))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn preamble(cfg: &ExperimentConfig, config_hash: &str, method: Method, seed: u64, run_hash: Option<&str>) -> Vec<String> {
    let mut lines = vec![
        format!("cop2l {ENGINE_VERSION} config_hash={config_hash}"),
        format!("method={} seed={seed}", method.name()),
    ];
    if let Some(h) = run_hash {
        lines.push(format!("run_hash={h}"));
    }
    if cfg.scenario() == Scenario::DomainIncremental {
        lines.push("note: domain-incremental tasks are transforms of one sample; certificates assume independent task samples".into());
    }
    lines
}

fn write_params(path: &Path, params: &ParameterVector, init_seed: u64, config_hash: &str) -> Result<()> {
    let header = CheckpointHeader {
        layout: *params.layout(),
        init_seed,
        engine_version: ENGINE_VERSION.to_string(),
        config_hash: config_hash.to_string(),
    };
    let mut out = create(path)?;
    write_checkpoint(&mut out, params, &header)?;
    out.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn summarize(method: Method, seed: u64, accuracy: &AccuracyMatrix, mean_bound: Option<f64>, dir: PathBuf) -> Result<CellSummary> {
    let t = accuracy.dimension();
    Ok(CellSummary {
        method,
        seed,
        average_accuracy: average_accuracy(accuracy, t)?,
        average_forgetting: if t >= 2 { Some(average_forgetting(accuracy, t)?) } else { None },
        plasticity: plasticity(accuracy, t)?,
        mean_bound,
        dir,
    })
}

/// Runs one cell and writes its artifacts into `dir`.
pub fn run_cell(cfg: &ExperimentConfig, method: Method, seed: u64, dir: &Path) -> Result<CellSummary> {
    let config_hash = cfg.hash();
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let stream = cfg.build_stream(seed)?;
    let hyper = cfg.hyperparameters_for(&stream, seed)?;
    let summary = match method {
        Method::CoP2L => {
            let run = cop2l_train(&stream, &hyper)?;
            let run_hash = run.record.config_hash.clone();
            let lines = preamble(cfg, &config_hash, method, seed, Some(&run_hash));
            write_metrics_csv(
                create(&dir.join(METRICS_FILE))?,
                &lines,
                &metrics_rows(&run.accuracy, &run.certificates),
            )?;
            let file = CertificateFile {
                engine_version: ENGINE_VERSION.to_string(),
                config_hash: config_hash.clone(),
                run_hash,
                certificates: run.certificates.clone(),
            };
            write_file(&dir.join(CERTIFICATES_FILE), serde_json::to_string_pretty(&file)? + "\n")?;
            write_file(&dir.join(RECORD_FILE), run.record.to_json()? + "\n")?;
            write_params(&dir.join(PARAMS_FILE), &run.params, seed, &config_hash)?;
            render_bound_figure(&dir.join(METRICS_FILE), &dir.join(FIGURE_FILE))?;
            let t = stream.task_count();
            let finals: Vec<f64> = run
                .certificates
                .iter()
                .filter(|c| c.task_count == t)
                .map(|c| c.bound.get())
                .collect();
            let mean_bound = finals.iter().sum::<f64>() / finals.len() as f64;
            summarize(method, seed, &run.accuracy, Some(mean_bound), dir.to_path_buf())?
        }
        Method::Baseline(kind) => {
            let run = run_baseline(&stream, &hyper.learner, &cfg.baseline(kind, seed))?;
            let lines = preamble(cfg, &config_hash, method, seed, None);
            write_metrics_csv(create(&dir.join(METRICS_FILE))?, &lines, &metrics_rows(&run.accuracy, &[]))?;
            write_params(&dir.join(PARAMS_FILE), &run.params, seed, &config_hash)?;
            summarize(method, seed, &run.accuracy, None, dir.to_path_buf())?
        }
    };
    let marker = dir.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| Error::io(format!("removing {}", marker.display()), e))?;
    }
    Ok(summary)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn pct(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s)
}

/// Writes `summary.csv`: one row per method, mean and standard deviation
/// over its seeds.
pub fn write_summary(path: &Path, config_hash: &str, cells: &[CellSummary]) -> Result<()> {
    let mut out = format!("# cop2l {ENGINE_VERSION} config_hash={config_hash}\n");
    let mut writer = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Csv(e.to_string());
    writer
        .write_record([
            "method",
            "runs",
            "avg_accuracy_mean",
            "avg_accuracy_std",
            "avg_forgetting_mean",
            "avg_forgetting_std",
            "plasticity_mean",
            "plasticity_std",
            "mean_bound_mean",
            "mean_bound_std",
            "avg_accuracy_pct",
            "avg_forgetting_pct",
        ])
        .map_err(csv_err)?;
    let mut methods: Vec<Method> = cells.iter().map(|c| c.method).collect();
    methods.sort();
    methods.dedup();
    for method in methods {
        let group: Vec<&CellSummary> = cells.iter().filter(|c| c.method == method).collect();
        let acc: Vec<f64> = group.iter().map(|c| c.average_accuracy).collect();
        let fg: Option<Vec<f64>> = group.iter().map(|c| c.average_forgetting).collect();
        let pl: Vec<f64> = group.iter().map(|c| c.plasticity).collect();
        let bd: Option<Vec<f64>> = group.iter().map(|c| c.mean_bound).collect();
        let (am, asd) = mean_std(&acc);
        let (pm, psd) = mean_std(&pl);
        let pair = |v: &Option<Vec<f64>>| match v {
            Some(v) => {
                let (m, s) = mean_std(v);
                (m.to_string(), s.to_string())
            }
            None => (String::new(), String::new()),
        };
        let (fm, fsd) = pair(&fg);
        let (bm, bsd) = pair(&bd);
        writer
            .write_record([
                method.name().to_string(),
                group.len().to_string(),
                am.to_string(),
                asd.to_string(),
                fm,
                fsd,
                pm.to_string(),
                psd.to_string(),
                bm,
                bsd,
                pct(&acc),
                fg.as_deref().map(pct).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
    }
    let body = writer.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    out.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
    write_file(path, out)
}

/// Runs all cells (in parallel up to `jobs`), then writes the summary. Failed
/// cells get a `FAILED` marker and the run an `INCOMPLETE` marker.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport> {
    let config_hash = cfg.hash();
    let out = &opts.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let cells: Vec<(Method, u64)> = cfg
        .methods()
        .into_iter()
        .flat_map(|m| cfg.run.seeds.iter().map(move |&s| (m, s)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<CellSummary>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(method, seed)| run_cell(cfg, method, seed, &cell_dir(out, method, seed)))
            .collect()
    });

    let mut report = ExperimentReport {
        config_hash: config_hash.clone(),
        cells: Vec::new(),
        failures: Vec::new(),
    };
    for ((method, seed), result) in cells.into_iter().zip(results) {
        match result {
            Ok(summary) => report.cells.push(summary),
            Err(e) => {
                let dir = cell_dir(out, method, seed);
                if fs::create_dir_all(&dir).is_ok() {
                    let _ = fs::write(dir.join(FAILED_MARKER), format!("{e}\n"));
                }
                report.failures.push((method, seed, e.to_string()));
            }
        }
    }

    let incomplete = out.join(INCOMPLETE_MARKER);
    if report.is_complete() {
        write_summary(&out.join(SUMMARY_FILE), &config_hash, &report.cells)?;
        if incomplete.exists() {
            fs::remove_file(&incomplete).map_err(|e| Error::io(format!("removing {}", incomplete.display()), e))?;
        }
    } else {
        let lines: String = report
            .failures
            .iter()
            .map(|(m, s, e)| format!("{} seed {s}: {e}\n", m.name()))
            .collect();
        write_file(&incomplete, lines)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn mean_std_examples() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_abs_diff_eq!(m, 2.0);
        assert_abs_diff_eq!(s, 1.0);
        assert_eq!(mean_std(&[0.4]), (0.4, 0.0));
    }
}
