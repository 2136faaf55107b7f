//! SGD with momentum and Adam over flat parameter buffers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anything exposing its trainable values as an ordered list of flat buffers.
///
/// The order must be stable: optimizer accumulators are matched by position.
pub trait ParamSet {
    fn buffers(&self) -> Vec<&[f64]>;
    fn buffers_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }
}

impl ParamSet for Vec<Vec<f64>> {
    fn buffers(&self) -> Vec<&[f64]> {
        self.iter().map(|v| v.as_slice()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        self.iter_mut().map(|v| v.as_mut_slice()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            learning_rate: 2e-3,
            momentum: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("optimizer.learning_rate", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("optimizer.momentum", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return Err(Error::config("optimizer.adam_beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("optimizer.adam_beta2", "must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("optimizer.adam_eps", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    /// Velocity for SGD, first moment for Adam.
    first: Vec<Vec<f64>>,
    /// Second moment; empty for SGD.
    second: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        OptimizerState {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    /// Restores a saved state. Buffers may be empty (not yet allocated).
    pub fn from_parts(
        config: OptimizerConfig,
        first: Vec<Vec<f64>>,
        second: Vec<Vec<f64>>,
        step: u64,
    ) -> Result<Self> {
        config.validate()?;
        let lens = |b: &[Vec<f64>]| b.iter().map(Vec::len).collect::<Vec<_>>();
        let second_ok = match config.kind {
            OptimizerKind::SgdMomentum => second.is_empty(),
            OptimizerKind::Adam => second.is_empty() && first.is_empty() || lens(&first) == lens(&second),
        };
        if !second_ok {
            return Err(Error::Shape(format!(
                "optimizer buffers {:?} / {:?} are inconsistent",
                lens(&first),
                lens(&second)
            )));
        }
        Ok(OptimizerState {
            config,
            first,
            second,
            step,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// Zeroes accumulators and the step counter; hyperparameters are kept.
    pub fn reset(&mut self) {
        for buf in self.first.iter_mut().chain(self.second.iter_mut()) {
            buf.iter_mut().for_each(|v| *v = 0.0);
        }
        self.step = 0;
    }

    pub fn reset_optimizer(&self) -> OptimizerState {
        let mut s = self.clone();
        s.reset();
        s
    }

    fn ensure_buffers(&mut self, shapes: &[usize]) -> Result<()> {
        if self.first.is_empty() {
            self.first = shapes.iter().map(|&n| vec![0.0; n]).collect();
            if self.config.kind == OptimizerKind::Adam {
                self.second = shapes.iter().map(|&n| vec![0.0; n]).collect();
            }
            return Ok(());
        }
        let existing: Vec<usize> = self.first.iter().map(Vec::len).collect();
        if existing != shapes {
            return Err(Error::Shape(format!(
                "optimizer buffers {existing:?} do not match parameters {shapes:?}"
            )));
        }
        Ok(())
    }

    pub fn step<P: ParamSet + ?Sized, G: ParamSet + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &G,
    ) -> Result<()> {
        let grads = grads.buffers();
        let mut params = params.buffers_mut();
        let shapes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        let gshapes: Vec<usize> = grads.iter().map(|g| g.len()).collect();
        if shapes != gshapes {
            return Err(Error::Shape(format!(
                "gradients {gshapes:?} do not match parameters {shapes:?}"
            )));
        }
        self.ensure_buffers(&shapes)?;
        self.step += 1;
        let cfg = self.config;
        match cfg.kind {
            OptimizerKind::SgdMomentum => {
                for ((p, g), v) in params.iter_mut().zip(&grads).zip(self.first.iter_mut()) {
                    for ((pi, gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                        *vi = cfg.momentum * *vi + gi;
                        *pi -= cfg.learning_rate * *vi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - cfg.adam_beta1.powi(t);
                let bc2 = 1.0 - cfg.adam_beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(&grads)
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    for (((pi, gi), mi), vi) in
                        p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *mi = cfg.adam_beta1 * *mi + (1.0 - cfg.adam_beta1) * gi;
                        *vi = cfg.adam_beta2 * *vi + (1.0 - cfg.adam_beta2) * gi * gi;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *pi -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<G: ParamSet + ?Sized>(grads: &mut G, max_norm: f64) -> f64 {
    let norm = grads
        .buffers()
        .iter()
        .flat_map(|b| b.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for b in grads.buffers_mut() {
            b.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}
