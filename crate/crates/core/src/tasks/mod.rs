//! Downstream trajectory tasks: next sub-trajectory prediction (NSP),
//! destination prediction (DP) and trajectory-user association (TUA).
//!
//! Every task becomes sequence classification over the `[CLS]` output of
//! the encoder.

mod build;
mod finetune;
mod metrics;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use build::{build_dp, build_nsp, build_tua, DestClasses};
pub use finetune::{
    balanced_split, compare_inits, fine_tune, predict, CompareReport, EpochMetrics, FineTuneConfig, FineTuneResult,
    FINETUNE_METRICS_HEADER,
};
pub use metrics::{evaluate_f1, mean_gap};

use crate::error::{Error, Result};
use crate::subhash::{CLS_ID, SEP_ID};

pub const DEFAULT_TASK_EXAMPLES: usize = 2_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Nsp,
    Dp,
    Tua,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Nsp, Task::Dp, Task::Tua];

    pub fn name(self) -> &'static str {
        match self {
            Task::Nsp => "nsp",
            Task::Dp => "dp",
            Task::Tua => "tua",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nsp" => Ok(Task::Nsp),
            "dp" => Ok(Task::Dp),
            "tua" => Ok(Task::Tua),
            _ => Err(Error::input(format!("unknown task {s:?} (expected nsp, dp or tua)"))),
        }
    }
}

/// Two token sequences with a binary label (1 = related).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairExample {
    pub ids_a: Vec<u32>,
    pub ids_b: Vec<u32>,
    pub label: u8,
}

/// Trajectory prefix with the class id of its final cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DestExample {
    pub prefix_ids: Vec<u32>,
    pub label: usize,
}

/// Packed classifier input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassExample {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    pub label: usize,
}

impl PairExample {
    /// `[CLS] A [SEP] B [SEP]`, segment 0 up to the first `[SEP]`.
    pub fn pack(&self) -> ClassExample {
        let mut ids = Vec::with_capacity(self.ids_a.len() + self.ids_b.len() + 3);
        ids.push(CLS_ID);
        ids.extend_from_slice(&self.ids_a);
        ids.push(SEP_ID);
        let first = ids.len();
        ids.extend_from_slice(&self.ids_b);
        ids.push(SEP_ID);
        let mut segments = vec![0u8; first];
        segments.resize(ids.len(), 1);
        ClassExample {
            ids,
            segments,
            label: self.label as usize,
        }
    }
}

impl DestExample {
    /// `[CLS] prefix [SEP]`.
    pub fn pack(&self) -> ClassExample {
        let mut ids = Vec::with_capacity(self.prefix_ids.len() + 2);
        ids.push(CLS_ID);
        ids.extend_from_slice(&self.prefix_ids);
        ids.push(SEP_ID);
        ClassExample {
            segments: vec![0; ids.len()],
            ids,
            label: self.label,
        }
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for it in items {
        serde_json::to_writer(&mut w, it).expect("task example serializes");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            what: "task dataset",
            msg: format!("{}:{}: {e}", path.display(), n + 1),
        })?);
    }
    Ok(out)
}
