//! Warm-up and adaptive objectives together with their logit gradients.
//!
//! Adaptive per-sample loss:
//!
//! ```text
//! total = α·w0·CE(y, f) + λ·( β·g² + γ·w1·(g − μ0)² + CE(y, l_a) + CE(y, l_v) )
//! ```
//!
//! Gradients flow through every CE term and through the gap `g` (and so
//! through both unimodal softmaxes). `w0`, `w1`, `μ0` and `λ` are constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{ForwardRecord, LogitGrads};
use crate::gap::{gap, gap_logit_grads, GapMetricKind};
use crate::mixture::{MixtureFamily, Posterior};
use crate::nn::{cross_entropy, cross_entropy_grad};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub anneal_base: f64,
    pub gap_metric: GapMetricKind,
    pub mixture_family: MixtureFamily,
    /// Ablation: force `w0 = w1 = 1`.
    pub disable_posterior_weights: bool,
    /// Ablation: drop the two unimodal CE terms.
    pub disable_unimodal_losses: bool,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            anneal_base: 0.96,
            gap_metric: GapMetricKind::ProbGap,
            mixture_family: MixtureFamily::Gaussian,
            disable_posterior_weights: false,
            disable_unimodal_losses: false,
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("adaptive.alpha", self.alpha),
            ("adaptive.beta", self.beta),
            ("adaptive.gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a finite value >= 0"));
            }
        }
        if !(self.anneal_base > 0.0 && self.anneal_base <= 1.0) {
            return Err(Error::config("adaptive.anneal_base", "must lie in (0, 1]"));
        }
        Ok(())
    }

    fn effective_weights(&self, p: Posterior) -> Posterior {
        if self.disable_posterior_weights {
            Posterior { w0: 1.0, w1: 1.0 }
        } else {
            p
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerSampleLossTerms {
    pub loss_mm: f64,
    pub loss_a: f64,
    pub loss_v: f64,
    pub gap: f64,
    pub w0: f64,
    pub w1: f64,
    pub total: f64,
}

/// `base^epoch`, with `epoch` counted from the start of the adaptive stage.
pub fn lambda_t(epoch: usize, anneal_base: f64) -> f64 {
    anneal_base.powi(epoch as i32)
}

pub fn warmup_loss(record: &ForwardRecord, label: usize) -> Result<f64> {
    Ok(cross_entropy(&record.fused_logits, label)?
        + cross_entropy(&record.logits_a, label)?
        + cross_entropy(&record.logits_v, label)?)
}

pub fn warmup_loss_grads(record: &ForwardRecord, label: usize) -> Result<LogitGrads> {
    Ok(LogitGrads {
        fused: cross_entropy_grad(&record.fused_logits, label)?,
        a: cross_entropy_grad(&record.logits_a, label)?,
        v: cross_entropy_grad(&record.logits_v, label)?,
    })
}

pub fn adaptive_loss(
    record: &ForwardRecord,
    label: usize,
    posterior: Posterior,
    mu0: f64,
    cfg: &AdaptiveConfig,
    lambda: f64,
) -> Result<PerSampleLossTerms> {
    let w = cfg.effective_weights(posterior);
    let loss_mm = cross_entropy(&record.fused_logits, label)?;
    let loss_a = cross_entropy(&record.logits_a, label)?;
    let loss_v = cross_entropy(&record.logits_v, label)?;
    let g = gap(record, label, cfg.gap_metric)?;
    let unimodal = if cfg.disable_unimodal_losses {
        0.0
    } else {
        loss_a + loss_v
    };
    let total = cfg.alpha * w.w0 * loss_mm
        + lambda * (cfg.beta * g * g + cfg.gamma * w.w1 * (g - mu0).powi(2) + unimodal);
    Ok(PerSampleLossTerms {
        loss_mm,
        loss_a,
        loss_v,
        gap: g,
        w0: w.w0,
        w1: w.w1,
        total,
    })
}

/// Gradient of [`adaptive_loss`]'s total with respect to the three logit vectors.
pub fn adaptive_loss_grads(
    record: &ForwardRecord,
    label: usize,
    posterior: Posterior,
    mu0: f64,
    cfg: &AdaptiveConfig,
    lambda: f64,
) -> Result<LogitGrads> {
    let w = cfg.effective_weights(posterior);
    let m = record.num_classes();
    let mut out = LogitGrads::zeros(m);

    let scale_mm = cfg.alpha * w.w0;
    if scale_mm != 0.0 {
        out.fused = cross_entropy_grad(&record.fused_logits, label)?;
        out.fused.iter_mut().for_each(|g| *g *= scale_mm);
    }

    if !cfg.disable_unimodal_losses {
        let ga = cross_entropy_grad(&record.logits_a, label)?;
        let gv = cross_entropy_grad(&record.logits_v, label)?;
        for k in 0..m {
            out.a[k] += lambda * ga[k];
            out.v[k] += lambda * gv[k];
        }
    }

    if cfg.beta != 0.0 || (cfg.gamma != 0.0 && w.w1 != 0.0) {
        let g = gap(record, label, cfg.gap_metric)?;
        let d_penalty = 2.0 * cfg.beta * g + 2.0 * cfg.gamma * w.w1 * (g - mu0);
        let (dga, dgv) = gap_logit_grads(record, label, cfg.gap_metric)?;
        for k in 0..m {
            out.a[k] += lambda * d_penalty * dga[k];
            out.v[k] += lambda * d_penalty * dgv[k];
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub mean: f64,
    pub terms: Vec<PerSampleLossTerms>,
    /// Per-sample gradients already divided by the batch size.
    pub grads: Vec<LogitGrads>,
}

fn check_lengths(records: usize, labels: usize, posteriors: Option<usize>) -> Result<()> {
    if records != labels || posteriors.is_some_and(|p| p != records) {
        return Err(Error::Shape(format!(
            "batch lengths differ: {records} records, {labels} labels, {posteriors:?} posteriors"
        )));
    }
    Ok(())
}

pub fn batch_warmup_loss(records: &[ForwardRecord], labels: &[usize]) -> Result<(f64, Vec<LogitGrads>)> {
    check_lengths(records.len(), labels.len(), None)?;
    let n = records.len().max(1) as f64;
    let mut sum = 0.0;
    let mut grads = Vec::with_capacity(records.len());
    for (rec, &y) in records.iter().zip(labels) {
        sum += warmup_loss(rec, y)?;
        let mut g = warmup_loss_grads(rec, y)?;
        g.scale(1.0 / n);
        grads.push(g);
    }
    Ok((sum / n, grads))
}

/// Mean adaptive loss over a batch; `epoch` indexes the adaptive stage.
pub fn batch_adaptive_loss(
    records: &[ForwardRecord],
    labels: &[usize],
    posteriors: &[Posterior],
    mu0: f64,
    cfg: &AdaptiveConfig,
    epoch: usize,
) -> Result<BatchLoss> {
    check_lengths(records.len(), labels.len(), Some(posteriors.len()))?;
    let lambda = lambda_t(epoch, cfg.anneal_base);
    let n = records.len().max(1) as f64;
    let mut terms = Vec::with_capacity(records.len());
    let mut grads = Vec::with_capacity(records.len());
    for ((rec, &y), &p) in records.iter().zip(labels).zip(posteriors) {
        terms.push(adaptive_loss(rec, y, p, mu0, cfg, lambda)?);
        let mut g = adaptive_loss_grads(rec, y, p, mu0, cfg, lambda)?;
        g.scale(1.0 / n);
        grads.push(g);
    }
    let mean = terms.iter().map(|t| t.total).sum::<f64>() / n;
    Ok(BatchLoss { mean, terms, grads })
}
