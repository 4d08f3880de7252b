//! Independent check of a stored run: rebuild the predictor from its
//! compression record, recompute every certificate and compare.

use std::fs;
use std::path::Path;

use super::config::ExperimentConfig;
use super::run::{CertificateFile, CERTIFICATES_FILE, PARAMS_FILE};
use crate::bounds::Certificate;
use crate::continual::{reconstruct, CompressionRecord};
use crate::error::{Error, Result};
use crate::model::read_checkpoint;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VerifyOutcome {
    Match,
    /// Field-level differences between stored and recomputed values.
    Mismatch(Vec<String>),
}

impl VerifyOutcome {
    pub fn exit_code(&self) -> i32 {
        match self {
            VerifyOutcome::Match => 0,
            VerifyOutcome::Mismatch(_) => 2,
        }
    }
}

fn diff_certificates(stored: &[Certificate], recomputed: &[Certificate]) -> Vec<String> {
    let mut diffs = Vec::new();
    if stored.len() != recomputed.len() {
        diffs.push(format!(
            "certificates: {} stored, {} recomputed",
            stored.len(),
            recomputed.len()
        ));
    }
    for (s, r) in stored.iter().zip(recomputed) {
        let label = format!("certificate[T={}, task={}]", r.task_count, r.task_id);
        let sv = serde_json::to_value(s).expect("certificate serializes");
        let rv = serde_json::to_value(r).expect("certificate serializes");
        if let (Some(so), Some(ro)) = (sv.as_object(), rv.as_object()) {
            for (key, rval) in ro {
                let sval = so.get(key).cloned().unwrap_or(serde_json::Value::Null);
                if &sval != rval {
                    diffs.push(format!("{label}.{key}: stored {sval} recomputed {rval}"));
                }
            }
        }
    }
    diffs
}

/// Verifies `record_path` against the experiment config. Errors are
/// configuration or I/O failures; any disagreement is a [`VerifyOutcome::Mismatch`].
///
/// A `certificates.json` and `params.bin` next to the record are compared
/// too when present.
pub fn verify_certificate(record_path: &Path, config_path: &Path) -> Result<VerifyOutcome> {
    let text = fs::read_to_string(record_path).map_err(|e| Error::io(format!("reading {}", record_path.display()), e))?;
    let record = CompressionRecord::from_json(&text)?;
    let cfg = ExperimentConfig::load(config_path)?;

    let seed = record.hyperparameters.cop2l.seed;
    if !cfg.run.seeds.contains(&seed) {
        return Ok(VerifyOutcome::Mismatch(vec![format!("seed {seed} is not part of the config")]));
    }
    let stream = cfg.build_stream(seed)?;
    let hyper = cfg.hyperparameters_for(&stream, seed)?;

    let replay = match reconstruct(&record, &stream, &hyper) {
        Ok(r) => r,
        Err(Error::Io { context, source }) => return Err(Error::Io { context, source }),
        Err(e) => return Ok(VerifyOutcome::Mismatch(vec![format!("reconstruction: {e}")])),
    };

    let mut diffs = Vec::new();
    let checksum = replay.params.checksum();
    if checksum != record.params_checksum {
        diffs.push(format!(
            "params_checksum: stored {} recomputed {checksum}",
            record.params_checksum
        ));
    }

    let dir = record_path.parent().unwrap_or(Path::new("."));
    let params_path = dir.join(PARAMS_FILE);
    if params_path.exists() {
        let file = fs::File::open(&params_path).map_err(|e| Error::io(format!("reading {}", params_path.display()), e))?;
        match read_checkpoint(std::io::BufReader::new(file)) {
            Ok((_, stored)) if stored.bit_eq(&replay.params) => {}
            Ok(_) => diffs.push(format!("{PARAMS_FILE}: parameters differ from the reconstruction")),
            Err(e) => diffs.push(format!("{PARAMS_FILE}: {e}")),
        }
    }

    let certs_path = dir.join(CERTIFICATES_FILE);
    if certs_path.exists() {
        let text = fs::read_to_string(&certs_path).map_err(|e| Error::io(format!("reading {}", certs_path.display()), e))?;
        match serde_json::from_str::<CertificateFile>(&text) {
            Ok(file) => {
                if file.run_hash != record.config_hash {
                    diffs.push(format!(
                        "{CERTIFICATES_FILE}.run_hash: stored {} record {}",
                        file.run_hash, record.config_hash
                    ));
                }
                if file.config_hash != cfg.hash() {
                    diffs.push(format!(
                        "{CERTIFICATES_FILE}.config_hash: stored {} config {}",
                        file.config_hash,
                        cfg.hash()
                    ));
                }
                diffs.extend(diff_certificates(&file.certificates, &replay.certificates));
            }
            Err(e) => diffs.push(format!("{CERTIFICATES_FILE}: {e}")),
        }
    }

    Ok(if diffs.is_empty() {
        VerifyOutcome::Match
    } else {
        VerifyOutcome::Mismatch(diffs)
    })
}
