//! Per-step checkpoint directories.
//!
//! ```text
//! <out>/step_<k>/params.bin      student parameters
//! <out>/step_<k>/memory.json     memory manifest
//! <out>/step_<k>/optimizer.json  ADAM moments
//! <out>/step_<k>/state.json      step groups and recall rows so far
//! <out>/step_<k>/runlog.jsonl    run log up to this step
//! <out>/step_<k>/config.json     config echo
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AdamState, Resume, RunLog, StepState, StepView, TrainError};
use crate::data::{DomainDataset, Sample};
use crate::encoder::{load_params, save_params, EncoderConfig};
use crate::eval::RecallMatrix;
use crate::memory::{MemoryBank, MemoryManifest};

pub const PARAMS_FILE: &str = "params.bin";
pub const MEMORY_FILE: &str = "memory.json";
pub const OPTIMIZER_FILE: &str = "optimizer.json";
pub const STATE_FILE: &str = "state.json";
pub const LOG_FILE: &str = "runlog.jsonl";
pub const CONFIG_FILE: &str = "config.json";

/// Protocol position stored next to the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepManifest {
    pub step: usize,
    /// Domain ids trained at each step of the protocol.
    pub groups: Vec<Vec<u32>>,
    pub labels: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn step_dir(out: &Path, step: usize) -> PathBuf {
    out.join(format!("step_{step}"))
}

fn fail(path: &Path, reason: impl ToString) -> TrainError {
    TrainError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), TrainError> {
    fs::write(path, contents).map_err(|e| fail(path, e))
}

fn json<T: Serialize + ?Sized>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("checkpoint data serializes")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, TrainError> {
    let text = fs::read_to_string(path).map_err(|e| fail(path, e))?;
    serde_json::from_str(&text).map_err(|e| fail(path, e))
}

pub fn write_step(
    out: &Path,
    view: &StepView<'_>,
    domains: &[DomainDataset],
    config_echo: &serde_json::Value,
) -> Result<PathBuf, TrainError> {
    let dir = step_dir(out, view.step);
    fs::create_dir_all(&dir).map_err(|e| fail(&dir, e))?;
    save_params(&view.state.student, &dir.join(PARAMS_FILE))?;
    write(&dir.join(MEMORY_FILE), json(&view.state.memory.manifest()))?;
    write(&dir.join(OPTIMIZER_FILE), json(&view.state.optimizer))?;
    let manifest = StepManifest {
        step: view.step,
        groups: view
            .groups
            .iter()
            .map(|g| g.iter().map(|&d| domains[d].domain_id).collect())
            .collect(),
        labels: view.matrix.labels.clone(),
        rows: view.matrix.rows().to_vec(),
    };
    write(&dir.join(STATE_FILE), json(&manifest))?;
    write(&dir.join(LOG_FILE), view.log.to_jsonl())?;
    write(&dir.join(CONFIG_FILE), json(config_echo))?;
    Ok(dir)
}

pub fn read_step_manifest(dir: &Path) -> Result<StepManifest, TrainError> {
    read_json(&dir.join(STATE_FILE))
}

/// Restores the state saved in `dir`. Memory entries are resolved against
/// the train splits of `domains`.
pub fn read_step(
    dir: &Path,
    domains: &[DomainDataset],
    encoder: &EncoderConfig,
) -> Result<(Resume, RunLog), TrainError> {
    let manifest = read_step_manifest(dir)?;
    let student = load_params(&dir.join(PARAMS_FILE), Some(encoder))?;
    let optimizer: AdamState = read_json(&dir.join(OPTIMIZER_FILE))?;
    if optimizer.len() != student.len() {
        return Err(fail(&dir.join(OPTIMIZER_FILE), "moment length differs from parameters"));
    }
    let memory_manifest: MemoryManifest = read_json(&dir.join(MEMORY_FILE))?;
    let by_id: HashMap<(u32, u64), &Sample> = domains
        .iter()
        .flat_map(|d| d.train.iter().map(move |s| ((d.domain_id, s.sample_id), s)))
        .collect();
    let memory = MemoryBank::from_manifest(&memory_manifest, |d, id| by_id.get(&(d, id)).map(|s| (*s).clone()))?;
    let matrix = RecallMatrix::from_rows(manifest.labels.clone(), manifest.rows.clone())?;
    let log_path = dir.join(LOG_FILE);
    let log_text = fs::read_to_string(&log_path).map_err(|e| fail(&log_path, e))?;
    let log = RunLog::from_jsonl(&log_text).map_err(|e| fail(&log_path, e))?;
    let state = StepState {
        student,
        teacher: None,
        memory,
        optimizer,
        completed_steps: manifest.step,
    };
    Ok((Resume { state, matrix }, log))
}
