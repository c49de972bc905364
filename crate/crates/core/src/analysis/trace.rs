//! Recorded expert selections and their JSON-lines file format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Arch, ForwardOptions, Model, TraceMode};
use crate::tensor::{Graph, Scalar};

/// One feedforward routing decision: the experts chosen for the token at
/// `position` of sequence `sequence` when layer step `layer_step` ran.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub sequence: usize,
    pub layer_step: usize,
    /// Group member that was applied at this layer step.
    pub member: usize,
    pub position: usize,
    pub token_id: usize,
    /// Sorted ascending.
    pub experts: Vec<usize>,
}

/// Collection of selection records plus the expert count of the traced layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelectionTrace {
    pub n_experts: usize,
    pub records: Vec<SelectionRecord>,
}

impl SelectionTrace {
    pub fn new(n_experts: usize) -> Self {
        Self {
            n_experts,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: SelectionRecord) -> Result<()> {
        if let Some(&bad) = record.experts.iter().find(|&&e| e >= self.n_experts) {
            return Err(Error::Data(format!(
                "expert id {bad} out of range for {} experts",
                self.n_experts
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorted distinct layer steps present in the trace.
    pub fn layer_steps(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.records.iter().map(|r| r.layer_step).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a trace file. `n_experts` of `None` infers the count from the largest id.
    pub fn read_jsonl(path: &Path, n_experts: Option<usize>) -> Result<Self> {
        let records = stream_jsonl(path)?.collect::<Result<Vec<_>>>()?;
        let inferred = records
            .iter()
            .flat_map(|r| r.experts.iter().copied())
            .max()
            .map_or(0, |m| m + 1);
        let n = n_experts.unwrap_or(inferred);
        let mut trace = Self::new(n);
        for r in records {
            trace.push(r)?;
        }
        Ok(trace)
    }
}

/// Runs `model` over each sequence and records the feedforward selections of the
/// layer steps chosen by `mode`. Record `sequence` fields are indices into `sequences`.
pub fn collect_trace<T: Scalar>(model: &Model<T>, sequences: &[Vec<usize>], mode: TraceMode) -> Result<SelectionTrace> {
    if model.config().arch != Arch::Moeut {
        return Err(Error::Config("selection traces need a MoE model".into()));
    }
    let opts = ForwardOptions {
        trace: mode,
        ..ForwardOptions::default()
    };
    let mut trace = SelectionTrace::new(model.config().n_experts);
    for (i, seq) in sequences.iter().enumerate() {
        let mut g = Graph::new();
        let out = model.forward(&mut g, seq, &opts)?;
        for mut r in out.trace {
            r.sequence = i;
            trace.push(r)?;
        }
    }
    Ok(trace)
}

/// Lazily reads records from a trace file, one line at a time.
pub fn stream_jsonl(path: &Path) -> Result<impl Iterator<Item = Result<SelectionRecord>>> {
    let reader = BufReader::new(File::open(path)?);
    let name = path.display().to_string();
    Ok(reader.lines().enumerate().filter_map(move |(i, line)| {
        let line = match line {
            Ok(l) => l,
            Err(e) => return Some(Err(e.into())),
        };
        if line.trim().is_empty() {
            return None;
        }
        Some(
            serde_json::from_str::<SelectionRecord>(&line)
                .map(|mut r| {
                    r.experts.sort_unstable();
                    r
                })
                .map_err(|e| Error::Data(format!("{name}:{}: {e}", i + 1))),
        )
    }))
}
