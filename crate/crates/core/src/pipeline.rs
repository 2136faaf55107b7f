//! Two-stage training: warm-up, then alternating mixture fits and adaptive
//! epochs; plus evaluation, subset fine-tuning and the ablation harness.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ResetPolicy, RunConfig};
use crate::data::{generate, split, Dataset, Split};
use crate::error::{Error, Result};
use crate::fusion::{argmax, FusionModel, ForwardRecord, LogitGrads};
use crate::gap::{collect_gaps, gap, GapMetricKind, GapSet};
use crate::loss::{batch_adaptive_loss, batch_warmup_loss, AdaptiveConfig};
use crate::mixture::{fit_or_collapse, FitOptions, MixtureFit};
use crate::optim::{clip_global_norm, OptimizerState};
use crate::report::{AblationRow, EpochRecord, Histogram, Metrics, Record, Stage, StepRecord, TrainReport};

const MODEL_SALT: u64 = 0x6d6f_6465_6c00;
const EVAL_CHUNK: usize = 256;

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: FusionModel,
    pub optimizer: OptimizerState,
    /// Adaptive epochs completed so far; the exponent of the annealing factor.
    pub adaptive_epoch: usize,
    /// Epochs completed across all stages.
    pub epoch: usize,
    pub warmup_epochs_done: usize,
}

/// Shuffled visiting order for one epoch. Seeded only by `(seed, stage,
/// epoch)` so a resumed run visits batches exactly as an uninterrupted one.
pub fn epoch_order(indices: &[usize], seed: u64, stage: Stage, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = match stage {
        Stage::Warmup => 1u64,
        Stage::Adaptive => 2,
        Stage::Finetune => 3,
    };
    rng.set_stream((tag << 40) | epoch as u64);
    let mut order = indices.to_vec();
    order.shuffle(&mut rng);
    order
}

/// Fused / unimodal accuracy and macro-F1 over `indices`.
pub fn evaluate(model: &FusionModel, dataset: &Dataset, indices: &[usize]) -> Result<Metrics> {
    if indices.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let m = model.num_classes();
    let mut tp = vec![0usize; m];
    let mut predicted = vec![0usize; m];
    let mut actual = vec![0usize; m];
    let (mut hits_a, mut hits_v) = (0usize, 0usize);
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (xa, xv) = dataset.batch(chunk)?;
        let (records, _) = model.forward_batch(&xa, &xv)?;
        for (rec, &i) in records.iter().zip(chunk) {
            let y = dataset.samples[i].label;
            let p = argmax(&rec.fused_logits);
            predicted[p] += 1;
            actual[y] += 1;
            if p == y {
                tp[y] += 1;
            }
            hits_a += usize::from(argmax(&rec.logits_a) == y);
            hits_v += usize::from(argmax(&rec.logits_v) == y);
        }
    }
    let n = indices.len() as f64;
    let f1_sum: f64 = (0..m)
        .map(|k| {
            let denom = predicted[k] + actual[k];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[k] as f64 / denom as f64
            }
        })
        .sum();
    Ok(Metrics {
        fused_accuracy: tp.iter().sum::<usize>() as f64 / n,
        macro_f1: f1_sum / m as f64,
        unimodal_accuracy_a: hits_a as f64 / n,
        unimodal_accuracy_v: hits_v as f64 / n,
    })
}

/// Histogram range wide enough for every value the metric can take.
pub fn gap_range(metric: GapMetricKind, num_classes: usize) -> (f64, f64) {
    match metric {
        GapMetricKind::ProbGap => (-1.0, 1.0),
        GapMetricKind::KlGap => {
            let l = (num_classes as f64).ln();
            (-l, l)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Dataset row indices, in the order they were given.
    pub indices: Vec<usize>,
    pub retained_fraction: f64,
    pub threshold: f64,
}

/// Keeps rows whose balanced-component posterior is at least `tau`
/// (clamped to `[0, 1]`). `indices[i]` is the row whose gap is `gaps[i]`.
pub fn select_high_quality(
    indices: &[usize],
    gaps: &[f64],
    fit: &MixtureFit,
    tau: f64,
) -> Result<Selection> {
    if indices.len() != gaps.len() {
        return Err(Error::Shape(format!(
            "{} indices but {} gaps",
            indices.len(),
            gaps.len()
        )));
    }
    let tau = tau.clamp(0.0, 1.0);
    let kept: Vec<usize> = indices
        .iter()
        .zip(gaps)
        .filter(|(_, &g)| fit.posterior(g).w0 >= tau)
        .map(|(&i, _)| i)
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptySubset { threshold: tau });
    }
    Ok(Selection {
        retained_fraction: kept.len() as f64 / indices.len() as f64,
        indices: kept,
        threshold: tau,
    })
}

fn loss_error(stage: Stage, epoch: usize, batch: usize, detail: String) -> Error {
    Error::NonFinite {
        stage: stage.to_string(),
        epoch,
        batch,
        detail,
    }
}

/// Shared data and configuration for one seeded run.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub cfg: RunConfig,
    pub dataset: Dataset,
    pub split: Split,
}

impl Experiment {
    pub fn new(cfg: RunConfig, dataset: Dataset) -> Result<Self> {
        cfg.validate()?;
        let split = split(&dataset, cfg.schedule.split, cfg.schedule.seed)?;
        if split.train.is_empty() {
            return Err(Error::config("schedule.split", "training split is empty"));
        }
        if cfg.schedule.batch_size > dataset.len() {
            return Err(Error::config(
                "schedule.batch_size",
                format!("exceeds dataset size {}", dataset.len()),
            ));
        }
        Ok(Experiment {
            cfg,
            dataset,
            split,
        })
    }

    /// Generates the synthetic dataset described by `cfg.data`.
    pub fn generate(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = generate(&cfg.data)?;
        Experiment::new(cfg, dataset)
    }

    /// Evaluation split used for held-out numbers; falls back to validation
    /// and then training rows when the test split is empty.
    pub fn test_indices(&self) -> &[usize] {
        [&self.split.test, &self.split.val, &self.split.train]
            .into_iter()
            .find(|s| !s.is_empty())
            .expect("train split is non-empty")
    }

    fn monitor_indices(&self) -> &[usize] {
        if self.split.val.is_empty() {
            &self.split.train
        } else {
            &self.split.val
        }
    }

    pub fn init_state(&self) -> TrainState {
        let (da, dv) = self.dataset.feature_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.schedule.seed ^ MODEL_SALT);
        let model = FusionModel::new(
            da,
            dv,
            self.dataset.num_classes(),
            &self.cfg.model,
            &mut rng,
        );
        TrainState {
            model,
            optimizer: OptimizerState::new(self.cfg.optimizer),
            adaptive_epoch: 0,
            epoch: 0,
            warmup_epochs_done: 0,
        }
    }

    /// One pass over `order` in mini-batches. `loss` maps a batch to its mean
    /// loss and per-sample logit gradients (already divided by batch size).
    fn run_epoch<F>(
        &self,
        model: &mut FusionModel,
        optimizer: &mut OptimizerState,
        order: &[usize],
        stage: Stage,
        epoch: usize,
        mut loss: F,
    ) -> Result<(f64, usize)>
    where
        F: FnMut(&[ForwardRecord], &[usize]) -> Result<(f64, Vec<LogitGrads>, String)>,
    {
        let clip = self.cfg.schedule.grad_clip;
        let mut total = 0.0;
        let mut clipped = 0;
        for (b, chunk) in order.chunks(self.cfg.schedule.batch_size).enumerate() {
            let (xa, xv) = self.dataset.batch(chunk)?;
            let labels = self.dataset.labels(chunk);
            let (records, trace) = model.forward_batch(&xa, &xv)?;
            let (mean, grads, detail) = loss(&records, &labels)?;
            if !mean.is_finite() {
                return Err(loss_error(stage, epoch, b, detail));
            }
            let mut g = model.backward(&trace, &grads)?;
            if clip > 0.0 {
                let norm = clip_global_norm(&mut g, clip);
                if !norm.is_finite() {
                    return Err(loss_error(stage, epoch, b, format!("gradient norm {norm}")));
                }
                if norm > clip {
                    clipped += 1;
                }
            }
            optimizer.step(model, &g)?;
            if !model.all_finite() {
                return Err(loss_error(stage, epoch, b, "parameters became non-finite".into()));
            }
            total += mean * chunk.len() as f64;
        }
        Ok((total / order.len().max(1) as f64, clipped))
    }

    fn record_epoch(
        &self,
        model: &FusionModel,
        epoch: usize,
        stage: Stage,
        stage_epoch: usize,
        train_loss: f64,
        clipped_batches: usize,
        report: &mut TrainReport,
    ) -> Result<()> {
        let metrics = evaluate(model, &self.dataset, self.monitor_indices())?;
        report.push(Record::Epoch(EpochRecord {
            epoch,
            stage,
            stage_epoch,
            train_loss,
            metrics,
            clipped_batches,
        }));
        Ok(())
    }

    /// Warm-up epochs on the fused + unimodal cross-entropies. Continues from
    /// `state.warmup_epochs_done`, so it is a no-op on a finished warm-up.
    pub fn run_warmup(&self, state: &mut TrainState, report: &mut TrainReport) -> Result<()> {
        let seed = self.cfg.schedule.seed;
        while state.warmup_epochs_done < self.cfg.schedule.warmup_epochs {
            let e = state.warmup_epochs_done;
            let order = epoch_order(&self.split.train, seed, Stage::Warmup, e);
            let (train_loss, clipped) = self.run_epoch(
                &mut state.model,
                &mut state.optimizer,
                &order,
                Stage::Warmup,
                e,
                |records, labels| {
                    let (mean, grads) = batch_warmup_loss(records, labels)?;
                    Ok((mean, grads, format!("warm-up loss {mean}")))
                },
            )?;
            self.record_epoch(&state.model, state.epoch, Stage::Warmup, e, train_loss, clipped, report)?;
            state.epoch += 1;
            state.warmup_epochs_done += 1;
        }
        Ok(())
    }

    /// Fits the gap mixture on the training split with the model frozen.
    pub fn fit_gaps(
        &self,
        model: &FusionModel,
        adaptive: &AdaptiveConfig,
        snapshot_epoch: usize,
        step: usize,
    ) -> Result<(GapSet, MixtureFit)> {
        let gaps = collect_gaps(
            model,
            &self.dataset,
            &self.split.train,
            adaptive.gap_metric,
            snapshot_epoch,
        )?;
        let opts = FitOptions {
            seed: self.cfg.mixture.seed.wrapping_add(step as u64),
            ..self.cfg.mixture
        };
        let fit = fit_or_collapse(&gaps.gaps, adaptive.mixture_family, &opts)?;
        Ok((gaps, fit))
    }

    /// The alternating stage: per step, refit the mixture and train
    /// `adaptive_epochs` epochs against the frozen fit.
    pub fn run_adaptive(&self, state: &mut TrainState, report: &mut TrainReport) -> Result<()> {
        self.run_adaptive_with(state, &self.cfg.adaptive, report)
    }

    pub fn run_adaptive_with(
        &self,
        state: &mut TrainState,
        adaptive: &AdaptiveConfig,
        report: &mut TrainReport,
    ) -> Result<()> {
        self.run_adaptive_observed(state, adaptive, report, &mut |_, _, _| Ok(()))
    }

    /// As [`Experiment::run_adaptive_with`], calling `on_step` with each
    /// step's gap snapshot and fit before training against it.
    pub fn run_adaptive_observed(
        &self,
        state: &mut TrainState,
        adaptive: &AdaptiveConfig,
        report: &mut TrainReport,
        on_step: &mut dyn FnMut(usize, &GapSet, &MixtureFit) -> Result<()>,
    ) -> Result<()> {
        adaptive.validate()?;
        if self.cfg.schedule.optimizer_policy == ResetPolicy::Reset {
            state.optimizer.reset();
        }
        let sched = &self.cfg.schedule;
        let (lo, hi) = gap_range(adaptive.gap_metric, self.dataset.num_classes());
        for step in 0..sched.adaptive_steps {
            let (gaps, fit) = self.fit_gaps(&state.model, adaptive, state.epoch, step)?;
            if fit.collapsed {
                report.event(format!(
                    "step {step}: gaps are degenerate; all samples treated as balanced"
                ));
            }
            on_step(step, &gaps, &fit)?;
            report.push(Record::Step(StepRecord {
                step,
                fit: fit.clone(),
                histogram: Histogram {
                    lo,
                    hi,
                    counts: gaps.histogram(lo, hi, sched.histogram_bins),
                },
            }));
            let mu0 = fit.mu[0];
            for _ in 0..sched.adaptive_epochs {
                let e = state.adaptive_epoch;
                let order = epoch_order(&self.split.train, sched.seed, Stage::Adaptive, e);
                let (train_loss, clipped) = self.run_epoch(
                    &mut state.model,
                    &mut state.optimizer,
                    &order,
                    Stage::Adaptive,
                    e,
                    |records, labels| {
                        let posteriors = records
                            .iter()
                            .zip(labels)
                            .map(|(r, &y)| Ok(fit.posterior(gap(r, y, adaptive.gap_metric)?)))
                            .collect::<Result<Vec<_>>>()?;
                        let out = batch_adaptive_loss(records, labels, &posteriors, mu0, adaptive, e)?;
                        let n = out.terms.len().max(1) as f64;
                        let sum = |f: fn(&crate::loss::PerSampleLossTerms) -> f64| {
                            out.terms.iter().map(f).sum::<f64>() / n
                        };
                        let detail = format!(
                            "total {} (mm {}, a {}, v {}, mean gap {})",
                            out.mean,
                            sum(|t| t.loss_mm),
                            sum(|t| t.loss_a),
                            sum(|t| t.loss_v),
                            sum(|t| t.gap)
                        );
                        Ok((out.mean, out.grads, detail))
                    },
                )?;
                self.record_epoch(&state.model, state.epoch, Stage::Adaptive, e, train_loss, clipped, report)?;
                state.epoch += 1;
                state.adaptive_epoch += 1;
            }
        }
        Ok(())
    }

    /// Warm-up-loss training on `subset` from `model` with a fresh optimizer.
    pub fn finetune(
        &self,
        model: &FusionModel,
        subset: &[usize],
        epochs: usize,
        report: &mut TrainReport,
    ) -> Result<FusionModel> {
        if subset.is_empty() {
            return Err(Error::EmptySubset {
                threshold: self.cfg.finetune.threshold,
            });
        }
        let mut model = model.clone();
        let mut optimizer = OptimizerState::new(self.cfg.optimizer);
        for e in 0..epochs {
            let order = epoch_order(subset, self.cfg.schedule.seed, Stage::Finetune, e);
            let (train_loss, clipped) =
                self.run_epoch(&mut model, &mut optimizer, &order, Stage::Finetune, e, |records, labels| {
                    let (mean, grads) = batch_warmup_loss(records, labels)?;
                    Ok((mean, grads, format!("fine-tune loss {mean}")))
                })?;
            self.record_epoch(&model, e, Stage::Finetune, e, train_loss, clipped, report)?;
        }
        Ok(model)
    }

    /// Fits the mixture on the warm-up model's training gaps, keeps rows with
    /// `w0 >= tau` and fine-tunes on them.
    pub fn finetune_high_quality(
        &self,
        warm: &FusionModel,
        tau: f64,
        report: &mut TrainReport,
    ) -> Result<(FusionModel, Selection)> {
        let (gaps, fit) = self.fit_gaps(warm, &self.cfg.adaptive, 0, 0)?;
        let selection = select_high_quality(&self.split.train, &gaps.gaps, &fit, tau)?;
        report.push(Record::Selection {
            threshold: selection.threshold,
            retained: selection.indices.len(),
            total: self.split.train.len(),
            retained_fraction: selection.retained_fraction,
        });
        let model = self.finetune(warm, &selection.indices, self.cfg.finetune.epochs, report)?;
        Ok((model, selection))
    }

    pub fn evaluate_test(&self, model: &FusionModel, label: &str, report: &mut TrainReport) -> Result<Metrics> {
        let metrics = evaluate(model, &self.dataset, self.test_indices())?;
        report.push(Record::Eval {
            label: label.into(),
            split: "test".into(),
            metrics,
        });
        Ok(metrics)
    }

    /// Warm-up followed by the adaptive stage, with held-out evaluations
    /// labelled `warmup` and `adaptive`.
    pub fn run(&self) -> Result<RunOutcome> {
        let mut report = TrainReport::default();
        report.push(Record::Run {
            config_hash: self.cfg.hash(),
        });
        let mut state = self.init_state();
        self.run_warmup(&mut state, &mut report)?;
        self.evaluate_test(&state.model, "warmup", &mut report)?;
        let warm = state.clone();
        self.run_adaptive(&mut state, &mut report)?;
        self.evaluate_test(&state.model, "adaptive", &mut report)?;
        Ok(RunOutcome {
            warm,
            trained: state,
            report,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// State right after warm-up.
    pub warm: TrainState,
    pub trained: TrainState,
    pub report: TrainReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoFusedTerm,
    NoGapPenalty,
    NoCenterPenalty,
    UnitWeights,
    NoUnimodal,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoFusedTerm,
        Variant::NoGapPenalty,
        Variant::NoCenterPenalty,
        Variant::UnitWeights,
        Variant::NoUnimodal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFusedTerm => "alpha=0",
            Variant::NoGapPenalty => "beta=0",
            Variant::NoCenterPenalty => "gamma=0",
            Variant::UnitWeights => "w=1",
            Variant::NoUnimodal => "no_unimodal",
        }
    }

    pub fn apply(self, base: &AdaptiveConfig) -> AdaptiveConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoFusedTerm => c.alpha = 0.0,
            Variant::NoGapPenalty => c.beta = 0.0,
            Variant::NoCenterPenalty => c.gamma = 0.0,
            Variant::UnitWeights => c.disable_posterior_weights = true,
            Variant::NoUnimodal => c.disable_unimodal_losses = true,
        }
        c
    }
}

/// Runs every variant on every seed; one warm-up per seed is shared by all
/// variants. Rows are emitted seed-major in [`Variant::ALL`] order.
pub fn run_ablation_suite(base: &RunConfig, seeds: &[u64]) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    report.push(Record::Run {
        config_hash: base.hash(),
    });
    for &seed in seeds {
        let exp = Experiment::generate(base.clone().with_seed(seed))?;
        let mut warm = exp.init_state();
        let mut scratch = TrainReport::default();
        exp.run_warmup(&mut warm, &mut scratch)?;
        for variant in Variant::ALL {
            let mut state = warm.clone();
            exp.run_adaptive_with(&mut state, &variant.apply(&base.adaptive), &mut scratch)?;
            let metrics = evaluate(&state.model, &exp.dataset, exp.test_indices())?;
            report.push(Record::Ablation(AblationRow {
                variant: variant.name().into(),
                seed,
                metrics,
            }));
        }
    }
    Ok(report)
}

/// Mean held-out metrics per variant, in [`Variant::ALL`] order.
pub fn ablation_means(report: &TrainReport) -> Vec<(String, Metrics, usize)> {
    Variant::ALL
        .iter()
        .filter_map(|v| {
            let rows: Vec<&AblationRow> = report.ablations().filter(|r| r.variant == v.name()).collect();
            if rows.is_empty() {
                return None;
            }
            let n = rows.len() as f64;
            let mean = |f: fn(&Metrics) -> f64| rows.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
            Some((
                v.name().to_string(),
                Metrics {
                    fused_accuracy: mean(|m| m.fused_accuracy),
                    macro_f1: mean(|m| m.macro_f1),
                    unimodal_accuracy_a: mean(|m| m.unimodal_accuracy_a),
                    unimodal_accuracy_v: mean(|m| m.unimodal_accuracy_v),
                },
                rows.len(),
            ))
        })
        .collect()
}
