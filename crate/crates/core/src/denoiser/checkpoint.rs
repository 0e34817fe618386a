//! Checkpoint layout: one line of compact JSON ([`CheckpointHeader`]), a
//! `\n`, then `param_count` little-endian `f32` values.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, DenoiserModel};
use crate::error::{Error, Result};
use crate::schedule::ScheduleConfig;

const FORMAT: &str = "microdiff-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    pub step: u64,
    pub param_count: usize,
}

impl CheckpointHeader {
    pub fn new(model: &DenoiserModel, schedule: ScheduleConfig, seed: u64, step: u64) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            architecture: model.architecture().clone(),
            schedule,
            seed,
            step,
            param_count: model.param_count(),
        }
    }
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    model: &DenoiserModel,
    schedule: &ScheduleConfig,
    seed: u64,
    step: u64,
) -> Result<()> {
    let header = CheckpointHeader::new(model, schedule.clone(), seed, step);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(model.param_count() * 4);
    for &p in model.params() {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<(CheckpointHeader, DenoiserModel)> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint format {} v{}",
            header.format, header.version
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != header.param_count * 4 {
        return Err(Error::Format(format!(
            "checkpoint payload has {} bytes, header promises {} parameters",
            payload.len(),
            header.param_count
        )));
    }
    let params = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let model = DenoiserModel::from_params(header.architecture.clone(), params)
        .map_err(|e| Error::Format(format!("checkpoint architecture: {e}")))?;
    Ok((header, model))
}

pub fn save_checkpoint(
    path: &Path,
    model: &DenoiserModel,
    schedule: &ScheduleConfig,
    seed: u64,
    step: u64,
) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), model, schedule, seed, step)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, DenoiserModel)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
