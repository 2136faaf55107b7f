//! Central finite-difference checks of backprop on small two-layer models.

use modgap::fusion::{FusionModel, ModelConfig};
use modgap::loss::{batch_adaptive_loss, batch_warmup_loss, AdaptiveConfig};
use modgap::mixture::Posterior;
use modgap::optim::ParamSet;
use modgap::tensor::Tensor2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;
// Relative error uses max(|analytic|, |numeric|, FLOOR) as denominator so
// that exactly-zero gradients (dead units) compare cleanly.
pub const FLOOR: f64 = 1e-6;
pub const SEEDS: u64 = 24;

pub struct Problem {
    pub model: FusionModel,
    pub xa: Tensor2,
    pub xv: Tensor2,
    pub labels: Vec<usize>,
    pub posteriors: Vec<Posterior>,
    pub mu0: f64,
}

pub fn problem(seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (da, dv, m, n) = (3, 4, 3 + (seed % 3) as usize, 6);
    let model = FusionModel::new(da, dv, m, &ModelConfig { hidden: vec![5, 4] }, &mut rng);
    let mut randn = |r: usize, c: usize| {
        let data = (0..r * c)
            .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor2::from_vec(r, c, data).unwrap()
    };
    let xa = randn(n, da);
    let xv = randn(n, dv);
    let labels = (0..n).map(|_| rng.random_range(0..m)).collect();
    let posteriors = (0..n)
        .map(|_| {
            let w0: f64 = rng.random();
            Posterior { w0, w1: 1.0 - w0 }
        })
        .collect();
    Problem {
        model,
        xa,
        xv,
        labels,
        posteriors,
        mu0: rng.random_range(-0.5..0.5),
    }
}

pub enum Objective {
    Warmup,
    Adaptive(AdaptiveConfig),
}

impl Objective {
    pub fn loss_and_grads(&self, p: &Problem, model: &FusionModel) -> (f64, FusionModel) {
        let (records, trace) = model.forward_batch(&p.xa, &p.xv).unwrap();
        let (mean, grads) = match self {
            Objective::Warmup => batch_warmup_loss(&records, &p.labels).unwrap(),
            Objective::Adaptive(cfg) => {
                let out = batch_adaptive_loss(&records, &p.labels, &p.posteriors, p.mu0, cfg, 3).unwrap();
                (out.mean, out.grads)
            }
        };
        (mean, model.backward(&trace, &grads).unwrap())
    }
}

/// Returns (max relative error, parameters checked).
pub fn check(p: &Problem, objective: &Objective) -> (f64, usize) {
    let (_, analytic) = objective.loss_and_grads(p, &p.model);
    let analytic: Vec<f64> = analytic.buffers().concat();
    let base_pattern = p.model.activation_pattern(&p.xa, &p.xv).unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (j, &a) in analytic.iter().enumerate() {
        let shifted = |delta: f64| {
            let mut m = p.model.clone();
            let mut flat = 0;
            'outer: for buf in m.buffers_mut() {
                for v in buf.iter_mut() {
                    if flat == j {
                        *v += delta;
                        break 'outer;
                    }
                    flat += 1;
                }
            }
            m
        };
        let (plus, minus) = (shifted(H), shifted(-H));
        // A ReLU changing state inside the stencil breaks the Taylor argument.
        if plus.activation_pattern(&p.xa, &p.xv).unwrap() != base_pattern
            || minus.activation_pattern(&p.xa, &p.xv).unwrap() != base_pattern
        {
            continue;
        }
        let lp = objective.loss_and_grads(p, &plus).0;
        let lm = objective.loss_and_grads(p, &minus).0;
        let numeric = (lp - lm) / (2.0 * H);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max(rel);
        checked += 1;
    }
    (worst, checked)
}
