//! Training report: an ordered list of records serialised as JSON lines.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::MixtureFit;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    Adaptive,
    Finetune,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Warmup => "warmup",
            Stage::Adaptive => "adaptive",
            Stage::Finetune => "finetune",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub fused_accuracy: f64,
    pub macro_f1: f64,
    pub unimodal_accuracy_a: f64,
    pub unimodal_accuracy_v: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Global epoch counter across all stages of one run.
    pub epoch: usize,
    pub stage: Stage,
    pub stage_epoch: usize,
    pub train_loss: f64,
    /// Validation-split metrics after the epoch.
    #[serde(flatten)]
    pub metrics: Metrics,
    /// Batches whose gradient norm exceeded the clip threshold.
    pub clipped_batches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn edges(&self) -> Vec<f64> {
        let n = self.counts.len();
        (0..=n)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / n as f64)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub fit: MixtureFit,
    pub histogram: Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Run { config_hash: String },
    Epoch(EpochRecord),
    Step(StepRecord),
    Eval {
        label: String,
        split: String,
        #[serde(flatten)]
        metrics: Metrics,
    },
    Selection {
        threshold: f64,
        retained: usize,
        total: usize,
        retained_fraction: f64,
    },
    Event { message: String },
    Ablation(AblationRow),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<Record>,
}

impl TrainReport {
    pub fn push(&mut self, record: Record) {
        self.records.push(record);
    }

    pub fn extend(&mut self, other: TrainReport) {
        self.records.extend(other.records);
    }

    pub fn event(&mut self, message: impl Into<String>) {
        self.push(Record::Event {
            message: message.into(),
        });
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Epoch(e) => Some(e),
            _ => None,
        })
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn ablations(&self) -> impl Iterator<Item = &AblationRow> {
        self.records.iter().filter_map(|r| match r {
            Record::Ablation(a) => Some(a),
            _ => None,
        })
    }

    /// The last evaluation with the given label.
    pub fn eval(&self, label: &str) -> Option<Metrics> {
        self.records.iter().rev().find_map(|r| match r {
            Record::Eval {
                label: l, metrics, ..
            } if l == label => Some(*metrics),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let line = serde_json::to_string(r).expect("report records serialize");
            writeln!(out, "{line}").unwrap();
        }
        out
    }

    pub fn from_jsonl(text: &str, context: &str) -> Result<TrainReport> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r = serde_json::from_str(line)
                .map_err(|e| Error::format(context, format!("line {}: {e}", n + 1)))?;
            records.push(r);
        }
        Ok(TrainReport { records })
    }

    pub fn load(path: &Path) -> Result<TrainReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainReport::from_jsonl(&text, &path.display().to_string())
    }
}
