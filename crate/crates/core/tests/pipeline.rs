mod common;

use common::small_config;
use modgap::checkpoint::Checkpoint;
use modgap::config::{ResetPolicy, RunConfig};
use modgap::data::{generate, Dataset, MultimodalSample, SynthConfig};
use modgap::fusion::FusionModel;
use modgap::loss::AdaptiveConfig;
use modgap::mixture::{fit_values, FitOptions, MixtureFamily, MixtureFit};
use modgap::optim::OptimizerState;
use modgap::pipeline::{evaluate, select_high_quality, Experiment, Variant};
use modgap::report::{Record, TrainReport};
use modgap::tensor::Tensor2;
use modgap::Error;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn warmed(cfg: RunConfig) -> (Experiment, modgap::pipeline::TrainState) {
    let exp = Experiment::generate(cfg).unwrap();
    let mut state = exp.init_state();
    exp.run_warmup(&mut state, &mut TrainReport::default()).unwrap();
    (exp, state)
}

#[test]
fn identical_config_gives_identical_report() {
    let a = Experiment::generate(small_config(4)).unwrap().run().unwrap();
    let b = Experiment::generate(small_config(4)).unwrap().run().unwrap();
    assert_eq!(a.report.to_jsonl(), b.report.to_jsonl());
    assert_eq!(a.trained, b.trained);
    let c = Experiment::generate(small_config(5)).unwrap().run().unwrap();
    assert_ne!(a.report.to_jsonl(), c.report.to_jsonl());
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let cfg = small_config(2);
    let (exp, warm) = warmed(cfg.clone());

    let mut straight = warm.clone();
    let mut report_a = TrainReport::default();
    exp.run_adaptive(&mut straight, &mut report_a).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck").join("warmup.ckpt");
    Checkpoint::new(cfg.hash(), warm).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.config_hash, cfg.hash());
    // A fresh experiment (re-generated data) resumes the same way.
    let exp2 = Experiment::generate(cfg).unwrap();
    let mut resumed = loaded.state;
    let mut report_b = TrainReport::default();
    exp2.run_warmup(&mut resumed, &mut report_b).unwrap();
    assert!(report_b.records.is_empty(), "warm-up must not repeat");
    exp2.run_adaptive(&mut resumed, &mut report_b).unwrap();

    assert_eq!(resumed, straight);
    assert_eq!(report_a.to_jsonl(), report_b.to_jsonl());
}

#[test]
fn reset_policy_first_update_matches_fresh_optimizer() {
    let mut cfg = small_config(3);
    cfg.schedule.adaptive_steps = 1;
    cfg.schedule.adaptive_epochs = 1;
    // One batch per epoch, so the adaptive stage is exactly one update.
    cfg.schedule.batch_size = 240;
    let (exp, warm) = warmed(cfg.clone());
    assert!(warm.optimizer.step_count() > 0);

    let mut carried = warm.clone();
    exp.run_adaptive(&mut carried, &mut TrainReport::default()).unwrap();
    let mut fresh = warm.clone();
    fresh.optimizer = OptimizerState::new(cfg.optimizer);
    exp.run_adaptive(&mut fresh, &mut TrainReport::default()).unwrap();
    assert_eq!(carried.model, fresh.model);

    let mut same_cfg = cfg;
    same_cfg.schedule.optimizer_policy = ResetPolicy::Same;
    let same_exp = Experiment::new(same_cfg, exp.dataset.clone()).unwrap();
    let mut same = warm.clone();
    same_exp.run_adaptive(&mut same, &mut TrainReport::default()).unwrap();
    assert_ne!(same.model, fresh.model);
}

#[test]
fn zero_adaptive_epochs_only_records_the_snapshot() {
    let mut cfg = small_config(1);
    cfg.schedule.adaptive_steps = 1;
    cfg.schedule.adaptive_epochs = 0;
    let (exp, warm) = warmed(cfg);
    let mut state = warm.clone();
    let mut report = TrainReport::default();
    exp.run_adaptive(&mut state, &mut report).unwrap();
    assert_eq!(state.model, warm.model);
    assert_eq!(report.steps().count(), 1);
    assert_eq!(report.epochs().count(), 0);
}

#[test]
fn one_snapshot_per_step_in_order() {
    let mut cfg = small_config(6);
    cfg.schedule.adaptive_steps = 3;
    let out = Experiment::generate(cfg).unwrap().run().unwrap();
    let steps: Vec<usize> = out.report.steps().map(|s| s.step).collect();
    assert_eq!(steps, vec![0, 1, 2]);
    for s in out.report.steps() {
        assert_eq!(s.histogram.counts.iter().sum::<usize>(), 240);
    }
    for e in out.report.epochs() {
        for acc in [e.metrics.fused_accuracy, e.metrics.unimodal_accuracy_a, e.metrics.unimodal_accuracy_v] {
            assert!((0.0..=1.0).contains(&acc));
        }
    }
    assert_eq!(out.trained.adaptive_epoch, 6);
}

#[test]
fn zero_counts_are_rejected() {
    for key in ["warmup_epochs", "adaptive_steps", "batch_size"] {
        let mut cfg = small_config(1);
        match key {
            "warmup_epochs" => cfg.schedule.warmup_epochs = 0,
            "adaptive_steps" => cfg.schedule.adaptive_steps = 0,
            _ => cfg.schedule.batch_size = 0,
        }
        let err = Experiment::generate(cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains(key), "{err}");
    }
    let mut cfg = small_config(1);
    cfg.schedule.batch_size = 301;
    assert_eq!(Experiment::generate(cfg).unwrap_err().exit_code(), 2);
}

#[test]
fn degenerate_gaps_proceed_as_balanced() {
    let cfg = small_config(1);
    let exp = Experiment::generate(cfg).unwrap();
    let mut state = exp.init_state();
    // Zero weights give identical unimodal scores, hence all gaps are 0.
    state.model = state.model.zeros_like();
    let mut report = TrainReport::default();
    exp.run_adaptive(&mut state, &mut report).unwrap();
    assert!(report.steps().all(|s| s.fit.collapsed));
    let events = report
        .records
        .iter()
        .filter(|r| matches!(r, Record::Event { message } if message.contains("degenerate")))
        .count();
    assert_eq!(events, 2);
}

#[test]
fn exploding_updates_abort_with_numeric_error() {
    let mut cfg = small_config(1);
    cfg.optimizer.learning_rate = 1e300;
    cfg.schedule.grad_clip = 0.0;
    let exp = Experiment::generate(cfg).unwrap();
    let err = exp.run().unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("warmup"), "{err}");
}

#[test]
fn selection_threshold_semantics() {
    let (exp, warm) = warmed(small_config(8));
    let (gaps, fit) = exp.fit_gaps(&warm.model, &exp.cfg.adaptive, 0, 0).unwrap();
    let train = &exp.split.train;
    let all = select_high_quality(train, &gaps.gaps, &fit, 0.0).unwrap();
    assert_eq!(&all.indices, train);
    assert_eq!(all.retained_fraction, 1.0);
    assert_eq!(select_high_quality(train, &gaps.gaps, &fit, -3.0).unwrap().threshold, 0.0);

    let mut last = 1.0;
    for k in 0..=20 {
        let tau = k as f64 / 20.0;
        let frac = match select_high_quality(train, &gaps.gaps, &fit, tau) {
            Ok(s) => {
                // Original order preserved.
                assert!(s.indices.windows(2).all(|w| {
                    train.iter().position(|&i| i == w[0]) < train.iter().position(|&i| i == w[1])
                }));
                s.retained_fraction
            }
            Err(e) => {
                assert_eq!(e.exit_code(), 4);
                0.0
            }
        };
        assert!(frac <= last, "tau {tau}: {frac} > {last}");
        last = frac;
    }
    assert!(select_high_quality(train, &gaps.gaps[1..], &fit, 0.5).is_err());
}

#[test]
fn empty_selection_is_an_error() {
    // Every point sits on the imbalanced component.
    let fit = MixtureFit::gaussian(0.9, [0.0, 1.0], [0.01, 0.01]);
    let err = select_high_quality(&[0, 1, 2], &[1.0, 1.0, 1.0], &fit, 0.5).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    let (exp, warm) = warmed(small_config(1));
    let err = exp.finetune(&warm.model, &[], 1, &mut TrainReport::default()).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn planted_mixture_retention_at_half() {
    let truth = MixtureFit::gaussian(0.85, [0.0056, 0.6966], [0.05, 0.10]);
    let idx: Vec<usize> = (0..5000).collect();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = truth.sample(5000, &mut rng);
        let fit = fit_values(&xs, MixtureFamily::Gaussian, &FitOptions::default()).unwrap();
        let s = select_high_quality(&idx, &xs, &fit, 0.5).unwrap();
        assert!((s.retained_fraction - 0.85).abs() <= 0.03, "seed {seed}: {}", s.retained_fraction);
    }
}

#[test]
fn finetune_on_everything_extends_warmup() {
    let mut cfg = small_config(5);
    // Full-batch updates make the visiting order irrelevant up to rounding.
    cfg.schedule.batch_size = 240;
    let (exp, warm) = warmed(cfg.clone());
    let tuned = exp
        .finetune(&warm.model, &exp.split.train, 4, &mut TrainReport::default())
        .unwrap();

    let mut longer = cfg;
    longer.schedule.warmup_epochs += 4;
    let mut extended = warm.clone();
    extended.optimizer = OptimizerState::new(longer.optimizer);
    let exp2 = Experiment::new(longer, exp.dataset.clone()).unwrap();
    exp2.run_warmup(&mut extended, &mut TrainReport::default()).unwrap();

    let a = modgap::optim::ParamSet::buffers(&tuned).concat();
    let b = modgap::optim::ParamSet::buffers(&extended.model).concat();
    let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-9, "max parameter difference {worst:e}");
}

fn one_hot_dataset(m: usize, per_class: usize) -> Dataset {
    let config = SynthConfig {
        num_classes: m,
        num_samples: m * per_class,
        feature_dim: m,
        ..SynthConfig::default()
    };
    let samples = (0..m * per_class)
        .map(|id| {
            let label = id % m;
            let mut x = vec![0.0; m];
            x[label] = 1.0;
            MultimodalSample {
                id,
                label,
                planted_imbalanced: false,
                x_a: x.clone(),
                x_v: x,
            }
        })
        .collect();
    Dataset { config, samples }
}

fn linear_model(head_a: Tensor2, head_v: Tensor2, bias: Vec<f64>) -> FusionModel {
    FusionModel::from_parts(vec![], vec![], head_a, head_v, bias).unwrap()
}

#[test]
fn evaluate_closed_form_oracles() {
    for m in [2, 3, 6] {
        let data = one_hot_dataset(m, 5);
        let idx: Vec<usize> = (0..data.len()).collect();

        let mut bias = vec![0.0; m];
        bias[0] = 1.0;
        let constant = linear_model(Tensor2::zeros(m, m), Tensor2::zeros(m, m), bias);
        let got = evaluate(&constant, &data, &idx).unwrap();
        assert!((got.fused_accuracy - 1.0 / m as f64).abs() < 1e-12);
        let f1 = (2.0 / (m as f64 + 1.0)) / m as f64;
        assert!((got.macro_f1 - f1).abs() < 1e-12, "M={m}: {}", got.macro_f1);

        let mut eye = Tensor2::identity(m);
        eye.data_mut().iter_mut().for_each(|v| *v *= 4.0);
        let perfect = linear_model(eye, Tensor2::zeros(m, m), vec![0.0; m]);
        let got = evaluate(&perfect, &data, &idx).unwrap();
        assert_eq!(got.fused_accuracy, 1.0);
        assert_eq!(got.macro_f1, 1.0);
        assert_eq!(got.unimodal_accuracy_a, 1.0);
        assert!(got.unimodal_accuracy_v <= 1.0 / m as f64 + 1e-12);
    }
    let data = one_hot_dataset(3, 2);
    let model = linear_model(Tensor2::zeros(3, 3), Tensor2::zeros(3, 3), vec![0.0; 3]);
    assert!(evaluate(&model, &data, &[]).is_err());
}

#[test]
fn evaluate_ignores_order() {
    let (exp, warm) = warmed(small_config(9));
    let mut idx: Vec<usize> = (0..exp.dataset.len()).collect();
    let base = evaluate(&warm.model, &exp.dataset, &idx).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..3 {
        idx.shuffle(&mut rng);
        assert_eq!(evaluate(&warm.model, &exp.dataset, &idx).unwrap(), base);
    }
}

fn field_diff(a: &AdaptiveConfig, b: &AdaptiveConfig) -> Vec<String> {
    let (a, b) = (serde_json::to_value(a).unwrap(), serde_json::to_value(b).unwrap());
    let (a, b) = (a.as_object().unwrap(), b.as_object().unwrap());
    let mut keys: Vec<String> = a.keys().filter(|k| a[*k] != b[*k]).cloned().collect();
    keys.sort();
    keys
}

#[test]
fn ablation_variants_change_one_field_each() {
    assert_eq!(Variant::ALL.len(), 6);
    let base = AdaptiveConfig::default();
    let expected = [
        (Variant::Full, vec![]),
        (Variant::NoFusedTerm, vec!["alpha"]),
        (Variant::NoGapPenalty, vec!["beta"]),
        (Variant::NoCenterPenalty, vec!["gamma"]),
        (Variant::UnitWeights, vec!["disable_posterior_weights"]),
        (Variant::NoUnimodal, vec!["disable_unimodal_losses"]),
    ];
    for (v, fields) in expected {
        assert_eq!(field_diff(&base, &v.apply(&base)), fields, "{}", v.name());
    }
    let mut names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
    names.dedup();
    assert_eq!(names.len(), 6);
}

#[test]
fn ablation_suite_emits_every_variant_per_seed() {
    let report = modgap::pipeline::run_ablation_suite(&small_config(1), &[1, 2]).unwrap();
    let rows: Vec<(String, u64)> = report.ablations().map(|r| (r.variant.clone(), r.seed)).collect();
    assert_eq!(rows.len(), 12);
    assert_eq!(rows[0], ("full".to_string(), 1));
    assert_eq!(rows[11], ("no_unimodal".to_string(), 2));
    let means = modgap::pipeline::ablation_means(&report);
    assert_eq!(means.len(), 6);
    assert!(means.iter().all(|(_, _, n)| *n == 2));
}

#[test]
fn warmup_leaves_dominant_modality_ahead() {
    let cfg = RunConfig::default();
    let (exp, warm) = warmed(cfg);
    let m = evaluate(&warm.model, &exp.dataset, exp.test_indices()).unwrap();
    assert!(m.unimodal_accuracy_a > m.unimodal_accuracy_v, "{m:?}");
}

#[test]
fn generated_data_matches_experiment_data() {
    let cfg = small_config(3);
    let exp = Experiment::generate(cfg.clone()).unwrap();
    assert_eq!(exp.dataset, generate(&cfg.data).unwrap());
}
