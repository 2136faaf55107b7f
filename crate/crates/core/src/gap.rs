//! Per-sample modality gap: correct-class probability difference or the
//! difference of each modality's KL divergence from the uniform distribution.
//!
//! Sign convention: positive means modality `a` is the more confident one.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fusion::{FusionModel, ForwardRecord};
use crate::nn::{check_label, log_softmax};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapMetricKind {
    ProbGap,
    KlGap,
}

impl std::fmt::Display for GapMetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GapMetricKind::ProbGap => "prob_gap",
            GapMetricKind::KlGap => "kl_gap",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapSet {
    pub metric: GapMetricKind,
    pub snapshot_epoch: usize,
    /// Dataset sample ids, aligned with `gaps`.
    pub sample_ids: Vec<usize>,
    pub gaps: Vec<f64>,
}

impl GapSet {
    pub fn from_values(metric: GapMetricKind, gaps: Vec<f64>) -> Self {
        GapSet {
            metric,
            snapshot_epoch: 0,
            sample_ids: (0..gaps.len()).collect(),
            gaps,
        }
    }

    pub fn len(&self) -> usize {
        self.gaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaps.is_empty()
    }

    /// Histogram over `[lo, hi)` with `bins` equal bins; values outside are
    /// clamped into the edge bins.
    pub fn histogram(&self, lo: f64, hi: f64, bins: usize) -> Vec<usize> {
        let mut counts = vec![0; bins];
        let width = (hi - lo) / bins as f64;
        for &g in &self.gaps {
            let idx = ((g - lo) / width).floor();
            let idx = if idx < 0.0 { 0 } else { (idx as usize).min(bins - 1) };
            counts[idx] += 1;
        }
        counts
    }
}

pub fn prob_gap(record: &ForwardRecord, label: usize) -> Result<f64> {
    check_label(label, record.num_classes())?;
    Ok(record.scores_a[label] - record.scores_v[label])
}

/// `KL(s ‖ u)` for the uniform `u_j = 1/M`, with `0·ln 0 = 0`.
pub fn kl_from_uniform(s: &[f64]) -> f64 {
    let ln_m = (s.len() as f64).ln();
    s.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * (p.max(1e-300).ln() + ln_m))
        .sum()
}

fn kl_from_uniform_logits(logits: &[f64]) -> f64 {
    let ln_m = (logits.len() as f64).ln();
    log_softmax(logits)
        .into_iter()
        .map(|lp| lp.exp() * (lp + ln_m))
        .sum()
}

/// Label-free gap `KL(s_a ‖ u) − KL(s_v ‖ u)`, computed from the logits.
pub fn kl_gap(record: &ForwardRecord) -> f64 {
    kl_from_uniform_logits(&record.logits_a) - kl_from_uniform_logits(&record.logits_v)
}

pub fn gap(record: &ForwardRecord, label: usize, metric: GapMetricKind) -> Result<f64> {
    match metric {
        GapMetricKind::ProbGap => prob_gap(record, label),
        GapMetricKind::KlGap => {
            check_label(label, record.num_classes())?;
            Ok(kl_gap(record))
        }
    }
}

/// d s[label] / d logits = s[label]·(onehot − s)
fn prob_grad(logits: &[f64], label: usize) -> Vec<f64> {
    let lp = log_softmax(logits);
    let sy = lp[label].exp();
    lp.iter()
        .enumerate()
        .map(|(k, l)| {
            let sk = l.exp();
            let delta = if k == label { 1.0 } else { 0.0 };
            sy * (delta - sk)
        })
        .collect()
}

/// d KL(softmax(z) ‖ u) / dz_k = s_k·(ln s_k − Σ_j s_j ln s_j)
fn kl_grad(logits: &[f64]) -> Vec<f64> {
    let lp = log_softmax(logits);
    let neg_entropy: f64 = lp.iter().map(|l| l.exp() * l).sum();
    lp.iter().map(|l| l.exp() * (l - neg_entropy)).collect()
}

/// Gradient of the gap with respect to the unimodal logits `(l_a, l_v)`.
pub fn gap_logit_grads(
    record: &ForwardRecord,
    label: usize,
    metric: GapMetricKind,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_label(label, record.num_classes())?;
    let (ga, mut gv) = match metric {
        GapMetricKind::ProbGap => (
            prob_grad(&record.logits_a, label),
            prob_grad(&record.logits_v, label),
        ),
        GapMetricKind::KlGap => (kl_grad(&record.logits_a), kl_grad(&record.logits_v)),
    };
    gv.iter_mut().for_each(|g| *g = -*g);
    Ok((ga, gv))
}

/// Gaps for the given dataset rows with the model frozen, in the order given.
pub fn collect_gaps(
    model: &FusionModel,
    dataset: &Dataset,
    indices: &[usize],
    metric: GapMetricKind,
    snapshot_epoch: usize,
) -> Result<GapSet> {
    let mut gaps = Vec::with_capacity(indices.len());
    // Chunked only to bound temporary allocation; results are per-row.
    for chunk in indices.chunks(256) {
        let (xa, xv) = dataset.batch(chunk)?;
        let (records, _) = model.forward_batch(&xa, &xv)?;
        for (rec, &i) in records.iter().zip(chunk) {
            gaps.push(gap(rec, dataset.samples[i].label, metric)?);
        }
    }
    if gaps.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            stage: "gap collection".into(),
            epoch: snapshot_epoch,
            batch: 0,
            detail: "gap is not finite".into(),
        });
    }
    Ok(GapSet {
        metric,
        snapshot_epoch,
        sample_ids: indices.iter().map(|&i| dataset.samples[i].id).collect(),
        gaps,
    })
}
