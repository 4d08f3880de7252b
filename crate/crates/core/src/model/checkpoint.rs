//! Parameter checkpoints.
//!
//! Layout: the 8-byte magic `COP2LPV1`, a little-endian `u32` header length,
//! a JSON [`CheckpointHeader`], a little-endian `u64` value count, then the
//! raw little-endian `f64` values.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Layout, ParameterVector};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"COP2LPV1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub layout: Layout,
    pub init_seed: u64,
    #[serde(default)]
    pub engine_version: String,
    #[serde(default)]
    pub config_hash: String,
}

impl CheckpointHeader {
    pub fn new(params: &ParameterVector, init_seed: u64) -> Self {
        CheckpointHeader {
            layout: params.layout,
            init_seed,
            engine_version: String::new(),
            config_hash: String::new(),
        }
    }
}

pub fn write_checkpoint<W: Write>(mut out: W, params: &ParameterVector, header: &CheckpointHeader) -> Result<()> {
    if header.layout != params.layout {
        return Err(Error::Checkpoint("header layout does not match the parameters".into()));
    }
    let header = serde_json::to_vec(header)?;
    let io = |e| Error::io("writing checkpoint", e);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
    out.write_all(&header).map_err(io)?;
    out.write_all(&(params.values.len() as u64).to_le_bytes()).map_err(io)?;
    for v in &params.values {
        out.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    Ok(())
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of data".into()))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(CheckpointHeader, ParameterVector)> {
    let mut magic = [0u8; 8];
    read_exact(&mut input, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 4];
    read_exact(&mut input, &mut len)?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    read_exact(&mut input, &mut header)?;
    let header: CheckpointHeader = serde_json::from_slice(&header)?;

    let mut count = [0u8; 8];
    read_exact(&mut input, &mut count)?;
    let count = u64::from_le_bytes(count) as usize;
    if count != header.layout.param_count() {
        return Err(Error::Checkpoint(format!(
            "{count} values for a layout of {}",
            header.layout.param_count()
        )));
    }
    let mut values = Vec::with_capacity(count);
    let mut word = [0u8; 8];
    for _ in 0..count {
        read_exact(&mut input, &mut word)?;
        values.push(f64::from_le_bytes(word));
    }
    let params = ParameterVector::from_values(header.layout, values)?;
    Ok((header, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, HeadMode, Learner, LearnerConfig};
    use proptest::prelude::*;

    fn learner(seed: u64, hidden: usize) -> Learner {
        Learner::new(LearnerConfig {
            architecture: Architecture::Mlp { hidden_width: hidden },
            input_dim: 3,
            class_count: 2,
            learning_rate: 0.1,
            epochs_per_update: 1,
            init_seed: seed,
            head_mode: HeadMode::PerTask { heads: 2 },
        })
        .unwrap()
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), hidden in 1usize..6) {
            let params = learner(seed, hidden).init_params();
            let mut bytes = Vec::new();
            write_checkpoint(&mut bytes, &params, &CheckpointHeader::new(&params, seed)).unwrap();
            let (header, back) = read_checkpoint(bytes.as_slice()).unwrap();
            prop_assert_eq!(header.init_seed, seed);
            prop_assert!(back.bit_eq(&params));
        }
    }

    #[test]
    fn rejects_corrupt_input() {
        let params = learner(1, 2).init_params();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &params, &CheckpointHeader::new(&params, 1)).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
    }
}
