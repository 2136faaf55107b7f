//! Two-component 1-D mixtures fitted by EM, with Bayes posteriors.
//!
//! Component 0 is the "balanced" component: after fitting, components are
//! ordered so that it carries the larger mixing weight (ties go to the
//! component whose mean is nearer zero).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gap::GapSet;

pub const MIN_POINTS: usize = 10;
/// Lower bound on component scales, in gap units.
pub const SIGMA_FLOOR: f64 = 1e-4;
const DEGENERATE_SPREAD: f64 = 1e-9;
const WEIGHT_TIE: f64 = 1e-6;
const MIN_WEIGHT: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureFamily {
    Gaussian,
    StudentT,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    /// Degrees of freedom for the Student-t family (held fixed).
    pub nu: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 200,
            tol: 1e-6,
            seed: 0,
            nu: 4.0,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::config("mixture.max_iter", "must be >= 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::config("mixture.tol", "must be > 0"));
        }
        if !(self.nu > 2.0) {
            return Err(Error::config("mixture.nu", "must be > 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureFit {
    pub family: MixtureFamily,
    pub pi: [f64; 2],
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
    #[serde(default)]
    pub nu: Option<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set on the all-balanced sentinel used when the gaps are degenerate.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub collapsed: bool,
    /// Log-likelihood after initialisation and after every EM iteration.
    #[serde(skip)]
    pub loglik_trace: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub w0: f64,
    pub w1: f64,
}

fn log_normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * (2.0 * PI).ln() - sigma.ln() - 0.5 * z * z
}

fn log_student_t_pdf(x: f64, mu: f64, sigma: f64, nu: f64) -> f64 {
    let z = (x - mu) / sigma;
    libm::lgamma((nu + 1.0) / 2.0) - libm::lgamma(nu / 2.0) - 0.5 * (nu * PI).ln() - sigma.ln()
        - (nu + 1.0) / 2.0 * (z * z / nu).ln_1p()
}

fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl MixtureFit {
    /// All-balanced sentinel: every posterior is `(1, 0)`.
    pub fn collapsed(family: MixtureFamily, centre: f64) -> Self {
        MixtureFit {
            family,
            pi: [1.0, 0.0],
            mu: [centre, centre],
            sigma: [SIGMA_FLOOR, SIGMA_FLOOR],
            nu: None,
            loglik: 0.0,
            iterations: 0,
            converged: false,
            collapsed: true,
            loglik_trace: Vec::new(),
        }
    }

    /// Builds an (unfitted) parameter set, e.g. for evaluating posteriors.
    pub fn gaussian(pi0: f64, mu: [f64; 2], sigma: [f64; 2]) -> Self {
        MixtureFit {
            family: MixtureFamily::Gaussian,
            pi: [pi0, 1.0 - pi0],
            mu,
            sigma,
            nu: None,
            loglik: 0.0,
            iterations: 0,
            converged: false,
            collapsed: false,
            loglik_trace: Vec::new(),
        }
    }

    pub fn component_log_pdf(&self, k: usize, x: f64) -> f64 {
        match self.family {
            MixtureFamily::Gaussian => log_normal_pdf(x, self.mu[k], self.sigma[k]),
            MixtureFamily::StudentT => {
                log_student_t_pdf(x, self.mu[k], self.sigma[k], self.nu.unwrap_or(4.0))
            }
        }
    }

    /// `ln(π_k · pdf_k(x))` for both components.
    fn weighted_log_pdfs(&self, x: f64) -> [f64; 2] {
        [
            self.pi[0].ln() + self.component_log_pdf(0, x),
            self.pi[1].ln() + self.component_log_pdf(1, x),
        ]
    }

    /// Mixture density `p(x)`.
    pub fn density(&self, x: f64) -> f64 {
        let [a, b] = self.weighted_log_pdfs(x);
        log_sum_exp2(a, b).exp()
    }

    pub fn log_likelihood(&self, xs: &[f64]) -> f64 {
        xs.iter()
            .map(|&x| {
                let [a, b] = self.weighted_log_pdfs(x);
                log_sum_exp2(a, b)
            })
            .sum()
    }

    pub fn posterior(&self, g: f64) -> Posterior {
        if self.collapsed {
            return Posterior { w0: 1.0, w1: 0.0 };
        }
        let [a, b] = self.weighted_log_pdfs(g);
        let lse = log_sum_exp2(a, b);
        if !lse.is_finite() {
            // both densities underflowed: fall back to the nearer component
            let near0 = (g - self.mu[0]).abs() / self.sigma[0] <= (g - self.mu[1]).abs() / self.sigma[1];
            return if near0 {
                Posterior { w0: 1.0, w1: 0.0 }
            } else {
                Posterior { w0: 0.0, w1: 1.0 }
            };
        }
        Posterior {
            w0: (a - lse).exp(),
            w1: (b - lse).exp(),
        }
    }

    pub fn posterior_all(&self, gaps: &[f64]) -> Vec<Posterior> {
        gaps.iter().map(|&g| self.posterior(g)).collect()
    }

    /// Draws `n` points from the mixture.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let t = self.nu.and_then(|nu| StudentT::new(nu).ok());
        (0..n)
            .map(|_| {
                let k = usize::from(rng.random::<f64>() >= self.pi[0]);
                let z: f64 = match (self.family, &t) {
                    (MixtureFamily::StudentT, Some(t)) => t.sample(rng),
                    _ => rng.sample(StandardNormal),
                };
                self.mu[k] + self.sigma[k] * z
            })
            .collect()
    }
}

/// Puts the larger-weight component first; near-ties go to the mean closer to 0.
pub fn order_components(mut fit: MixtureFit) -> MixtureFit {
    let swap = if (fit.pi[0] - fit.pi[1]).abs() < WEIGHT_TIE {
        fit.mu[1].abs() < fit.mu[0].abs()
    } else {
        fit.pi[1] > fit.pi[0]
    };
    if swap {
        fit.pi.swap(0, 1);
        fit.mu.swap(0, 1);
        fit.sigma.swap(0, 1);
    }
    fit
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

struct EStep {
    loglik: f64,
    /// responsibility of component 1 (component 0 is 1 - r1)
    resp: Vec<[f64; 2]>,
    /// latent scale weights (Student-t only; 1 for Gaussian)
    scale_w: Vec<[f64; 2]>,
}

fn e_step(fit: &MixtureFit, xs: &[f64]) -> EStep {
    let nu = fit.nu.unwrap_or(f64::INFINITY);
    let mut loglik = 0.0;
    let mut resp = Vec::with_capacity(xs.len());
    let mut scale_w = Vec::with_capacity(xs.len());
    for &x in xs {
        let [a, b] = fit.weighted_log_pdfs(x);
        let lse = log_sum_exp2(a, b);
        loglik += lse;
        resp.push([(a - lse).exp(), (b - lse).exp()]);
        scale_w.push(match fit.family {
            MixtureFamily::Gaussian => [1.0, 1.0],
            MixtureFamily::StudentT => {
                let u = |k: usize| {
                    let z = (x - fit.mu[k]) / fit.sigma[k];
                    (nu + 1.0) / (nu + z * z)
                };
                [u(0), u(1)]
            }
        });
    }
    EStep {
        loglik,
        resp,
        scale_w,
    }
}

fn m_step(fit: &mut MixtureFit, xs: &[f64], e: &EStep) {
    let n = xs.len() as f64;
    for k in 0..2 {
        let nk: f64 = e.resp.iter().map(|r| r[k]).sum();
        if nk <= MIN_WEIGHT * n {
            // component has emptied out; keep its location and shape
            fit.pi[k] = MIN_WEIGHT;
            continue;
        }
        let ru: Vec<f64> = e
            .resp
            .iter()
            .zip(&e.scale_w)
            .map(|(r, u)| r[k] * u[k])
            .collect();
        let ru_sum: f64 = ru.iter().sum();
        let mu = ru.iter().zip(xs).map(|(w, x)| w * x).sum::<f64>() / ru_sum;
        let var = ru.iter().zip(xs).map(|(w, x)| w * (x - mu).powi(2)).sum::<f64>() / nk;
        fit.pi[k] = nk / n;
        fit.mu[k] = mu;
        fit.sigma[k] = var.sqrt().max(SIGMA_FLOOR);
    }
    let total = fit.pi[0] + fit.pi[1];
    fit.pi = [fit.pi[0] / total, fit.pi[1] / total];
}

/// Fits a two-component mixture to raw values.
pub fn fit_values(xs: &[f64], family: MixtureFamily, opts: &FitOptions) -> Result<MixtureFit> {
    opts.validate()?;
    if xs.len() < MIN_POINTS {
        return Err(Error::InsufficientData {
            needed: MIN_POINTS,
            got: xs.len(),
        });
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::format("gap set", "contains non-finite values"));
    }
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= DEGENERATE_SPREAD {
        return Err(Error::DegenerateData {
            n: xs.len(),
            spread: hi - lo,
        });
    }

    // median split initialisation
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let half = sorted.len() / 2;
    let (lower, upper) = sorted.split_at(half);
    let (m0, s0) = mean_sd(lower);
    let (m1, s1) = mean_sd(upper);
    let (_, overall_sd) = mean_sd(&sorted);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let jitter = 1e-3 * overall_sd;
    let mut fit = MixtureFit {
        family,
        pi: [
            lower.len() as f64 / sorted.len() as f64,
            upper.len() as f64 / sorted.len() as f64,
        ],
        mu: [
            m0 + jitter * rng.sample::<f64, _>(StandardNormal),
            m1 + jitter * rng.sample::<f64, _>(StandardNormal),
        ],
        sigma: [s0.max(SIGMA_FLOOR), s1.max(SIGMA_FLOOR)],
        nu: match family {
            MixtureFamily::Gaussian => None,
            MixtureFamily::StudentT => Some(opts.nu),
        },
        loglik: f64::NEG_INFINITY,
        iterations: 0,
        converged: false,
        collapsed: false,
        loglik_trace: Vec::with_capacity(opts.max_iter + 1),
    };

    let mut e = e_step(&fit, xs);
    fit.loglik_trace.push(e.loglik);
    let mut ll = e.loglik;
    for it in 1..=opts.max_iter {
        m_step(&mut fit, xs, &e);
        e = e_step(&fit, xs);
        fit.loglik_trace.push(e.loglik);
        fit.iterations = it;
        let change = (e.loglik - ll).abs();
        ll = e.loglik;
        if change < opts.tol * ll.abs().max(1.0) {
            fit.converged = true;
            break;
        }
    }
    fit.loglik = ll;
    Ok(order_components(fit))
}

pub fn fit_mixture(gaps: &GapSet, family: MixtureFamily, opts: &FitOptions) -> Result<MixtureFit> {
    fit_values(&gaps.gaps, family, opts)
}

/// Fits, or returns the all-balanced sentinel when the gaps are degenerate.
pub fn fit_or_collapse(
    gaps: &[f64],
    family: MixtureFamily,
    opts: &FitOptions,
) -> Result<MixtureFit> {
    match fit_values(gaps, family, opts) {
        Err(Error::DegenerateData { .. }) => Ok(MixtureFit::collapsed(family, gaps[0])),
        other => other,
    }
}
