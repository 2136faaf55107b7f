//! Dense layers, activations and the log-space softmax / cross-entropy kernels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the layer output.
    #[inline]
    fn grad_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out × in`
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Tensor2, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::Shape(format!(
                "weight has {} output rows but bias has {} entries",
                weight.rows(),
                bias.len()
            )));
        }
        Ok(DenseLayer {
            weight,
            bias,
            activation,
        })
    }

    /// Uniform init in `[-sqrt(1/in), +sqrt(1/in)]` for both weights and bias.
    pub fn random<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let weight: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        DenseLayer {
            weight: Tensor2::from_vec(out_dim, in_dim, weight).expect("sized above"),
            bias,
            activation,
        }
    }

    pub fn zeros_like(&self) -> Self {
        DenseLayer {
            weight: Tensor2::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
            activation: self.activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Backward pass for one layer.
    ///
    /// `input` and `output` are the cached forward tensors, `grad_out` is
    /// dL/d(output). Accumulates parameter gradients into `grads` and returns
    /// dL/d(input).
    pub fn backward(
        &self,
        input: &Tensor2,
        output: &Tensor2,
        grad_out: &Tensor2,
        grads: &mut DenseLayer,
    ) -> Result<Tensor2> {
        let mut pre = grad_out.clone();
        if self.activation != Activation::Identity {
            for (g, &o) in pre.data_mut().iter_mut().zip(output.data()) {
                *g *= self.activation.grad_from_output(o);
            }
        }
        let dw = pre.t_matmul(input)?;
        grads.weight.add_scaled(&dw, 1.0)?;
        for r in 0..pre.rows() {
            for (b, g) in grads.bias.iter_mut().zip(pre.row(r)) {
                *b += g;
            }
        }
        pre.matmul(&self.weight)
    }
}

/// `activation(x · Wᵀ + b)`, one output row per input row.
pub fn linear_forward(x: &Tensor2, layer: &DenseLayer) -> Result<Tensor2> {
    if x.cols() != layer.in_dim() {
        return Err(Error::Shape(format!(
            "input has {} features, layer expects {}",
            x.cols(),
            layer.in_dim()
        )));
    }
    let mut out = x.matmul_t(&layer.weight)?;
    for r in 0..out.rows() {
        for (v, b) in out.row_mut(r).iter_mut().zip(&layer.bias) {
            *v = layer.activation.apply(*v + b);
        }
    }
    Ok(out)
}

/// Numerically stable log-softmax (max-shift + log-sum-exp).
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-ln softmax(logits)[label]`, evaluated in log space.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    check_label(label, logits.len())?;
    Ok(-log_softmax(logits)[label])
}

/// Gradient of [`cross_entropy`] with respect to the logits: `softmax − onehot`.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> Result<Vec<f64>> {
    check_label(label, logits.len())?;
    let mut g = softmax(logits);
    g[label] -= 1.0;
    Ok(g)
}

pub(crate) fn check_label(label: usize, num_classes: usize) -> Result<()> {
    if label >= num_classes {
        return Err(Error::Index {
            index: label,
            len: num_classes,
        });
    }
    Ok(())
}
