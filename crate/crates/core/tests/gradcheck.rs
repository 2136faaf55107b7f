//! Backprop against central finite differences on small two-layer models.

mod common;

use common::fd::{check, problem, Objective, Problem, SEEDS, TOL};
use modgap::gap::GapMetricKind;
use modgap::loss::AdaptiveConfig;
use modgap::mixture::Posterior;
use modgap::optim::ParamSet;

fn run_all(objective: &Objective) {
    for seed in 0..SEEDS {
        let p = problem(seed);
        let total = p.model.buffers().iter().map(|b| b.len()).sum::<usize>();
        let (worst, checked) = check(&p, objective);
        assert!(checked * 10 >= total * 9, "seed {seed}: only {checked}/{total} checked");
        assert!(worst < TOL, "seed {seed}: relative error {worst:e}");
    }
}

#[test]
fn warmup_loss_gradients() {
    run_all(&Objective::Warmup);
}

#[test]
fn adaptive_loss_gradients_prob_gap() {
    run_all(&Objective::Adaptive(AdaptiveConfig {
        alpha: 0.8,
        beta: 1.5,
        gamma: 2.0,
        ..AdaptiveConfig::default()
    }));
}

#[test]
fn adaptive_loss_gradients_kl_gap() {
    run_all(&Objective::Adaptive(AdaptiveConfig {
        alpha: 1.2,
        beta: 0.7,
        gamma: 1.3,
        gap_metric: GapMetricKind::KlGap,
        ..AdaptiveConfig::default()
    }));
}

#[test]
fn penalty_only_gradients() {
    // Isolate the g² and (g − μ0)² paths.
    for metric in [GapMetricKind::ProbGap, GapMetricKind::KlGap] {
        run_all(&Objective::Adaptive(AdaptiveConfig {
            alpha: 0.0,
            beta: 1.0,
            gamma: 3.0,
            gap_metric: metric,
            disable_unimodal_losses: true,
            ..AdaptiveConfig::default()
        }));
    }
}

#[test]
fn weights_and_centre_are_constants() {
    // Gradients are affine in w0 (through α·w0·CE only) and never pick up a
    // term from differentiating the posterior or μ0 themselves.
    let p = problem(7);
    let cfg = AdaptiveConfig::default();
    let grads = |posteriors: Vec<Posterior>, mu0: f64| {
        let q = Problem {
            model: p.model.clone(),
            xa: p.xa.clone(),
            xv: p.xv.clone(),
            labels: p.labels.clone(),
            posteriors,
            mu0,
        };
        Objective::Adaptive(cfg.clone()).loss_and_grads(&q, &q.model).1.buffers().concat()
    };
    let n = p.labels.len();
    let ones = vec![Posterior { w0: 1.0, w1: 0.0 }; n];
    let halves = vec![Posterior { w0: 0.5, w1: 0.0 }; n];
    let zeros = vec![Posterior { w0: 0.0, w1: 0.0 }; n];
    let (g1, gh, g0) = (grads(ones, 0.2), grads(halves, 0.2), grads(zeros, 0.2));
    for ((a, b), c) in g1.iter().zip(&gh).zip(&g0) {
        assert!((b - 0.5 * (a + c)).abs() < 1e-12);
    }
    // With w1 = 0 the centre only enters the loss value, never the gradient.
    let shifted = grads(vec![Posterior { w0: 0.5, w1: 0.0 }; n], -0.7);
    assert_eq!(gh, shifted);
}
