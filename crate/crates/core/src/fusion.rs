//! Two-encoder concatenation-fusion classifier.
//!
//! The head weight is stored already split into the columns that act on each
//! modality's embedding, so the fused logits are by construction
//! `W_a·φ_a(x_a) + W_v·φ_v(x_v) + b` and the unimodal logits
//! `l_a = W_a·φ_a(x_a) + b/2`, `l_v = W_v·φ_v(x_v) + b/2` sum to them exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{linear_forward, softmax, Activation, DenseLayer};
use crate::optim::ParamSet;
use crate::tensor::Tensor2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden layer widths of each encoder; every layer uses ReLU.
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![32, 32],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub encoder_a: Vec<DenseLayer>,
    pub encoder_v: Vec<DenseLayer>,
    /// `M × d_a`
    pub head_a: Tensor2,
    /// `M × d_v`
    pub head_v: Tensor2,
    pub head_bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardRecord {
    pub fused_logits: Vec<f64>,
    pub logits_a: Vec<f64>,
    pub logits_v: Vec<f64>,
    pub scores_a: Vec<f64>,
    pub scores_v: Vec<f64>,
}

impl ForwardRecord {
    pub fn num_classes(&self) -> usize {
        self.fused_logits.len()
    }

    /// Builds a record directly from unimodal logits (fused = l_a + l_v).
    pub fn from_unimodal(logits_a: Vec<f64>, logits_v: Vec<f64>) -> Self {
        let fused_logits = logits_a.iter().zip(&logits_v).map(|(a, v)| a + v).collect();
        ForwardRecord {
            scores_a: softmax(&logits_a),
            scores_v: softmax(&logits_v),
            fused_logits,
            logits_a,
            logits_v,
        }
    }
}

/// Cached activations of a batch forward pass. Index 0 holds the inputs.
#[derive(Clone, Debug)]
pub struct BatchTrace {
    acts_a: Vec<Tensor2>,
    acts_v: Vec<Tensor2>,
}

/// Upstream gradients for one sample, with respect to the fused logits and
/// the two unimodal logit vectors (treated as separate outputs).
#[derive(Clone, Debug, PartialEq)]
pub struct LogitGrads {
    pub fused: Vec<f64>,
    pub a: Vec<f64>,
    pub v: Vec<f64>,
}

impl LogitGrads {
    pub fn zeros(m: usize) -> Self {
        LogitGrads {
            fused: vec![0.0; m],
            a: vec![0.0; m],
            v: vec![0.0; m],
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self
            .fused
            .iter_mut()
            .chain(self.a.iter_mut())
            .chain(self.v.iter_mut())
        {
            *g *= s;
        }
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn build_encoder<R: Rng + ?Sized>(input: usize, hidden: &[usize], rng: &mut R) -> Vec<DenseLayer> {
    let mut layers = Vec::with_capacity(hidden.len());
    let mut d = input;
    for &h in hidden {
        layers.push(DenseLayer::random(d, h, Activation::Relu, rng));
        d = h;
    }
    layers
}

fn run_encoder(layers: &[DenseLayer], x: &Tensor2) -> Result<Vec<Tensor2>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(x.clone());
    for layer in layers {
        let next = linear_forward(acts.last().expect("non-empty"), layer)?;
        acts.push(next);
    }
    Ok(acts)
}

fn encoder_out_dim(layers: &[DenseLayer], input: usize) -> usize {
    layers.last().map_or(input, DenseLayer::out_dim)
}

impl FusionModel {
    pub fn new<R: Rng + ?Sized>(
        input_dim_a: usize,
        input_dim_v: usize,
        num_classes: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let encoder_a = build_encoder(input_dim_a, &cfg.hidden, rng);
        let encoder_v = build_encoder(input_dim_v, &cfg.hidden, rng);
        let d_a = encoder_out_dim(&encoder_a, input_dim_a);
        let d_v = encoder_out_dim(&encoder_v, input_dim_v);
        // The head is one layer over the concatenated d_a + d_v features.
        let head = DenseLayer::random(d_a + d_v, num_classes, Activation::Identity, rng);
        let mut head_a = Tensor2::zeros(num_classes, d_a);
        let mut head_v = Tensor2::zeros(num_classes, d_v);
        for r in 0..num_classes {
            let row = head.weight.row(r);
            head_a.row_mut(r).copy_from_slice(&row[..d_a]);
            head_v.row_mut(r).copy_from_slice(&row[d_a..]);
        }
        FusionModel {
            encoder_a,
            encoder_v,
            head_a,
            head_v,
            head_bias: head.bias,
        }
    }

    /// Assembles a model from explicit parts, checking every dimension.
    pub fn from_parts(
        encoder_a: Vec<DenseLayer>,
        encoder_v: Vec<DenseLayer>,
        head_a: Tensor2,
        head_v: Tensor2,
        head_bias: Vec<f64>,
    ) -> Result<Self> {
        for (name, enc) in [("a", &encoder_a), ("v", &encoder_v)] {
            for pair in enc.windows(2) {
                if pair[0].out_dim() != pair[1].in_dim() {
                    return Err(Error::Shape(format!(
                        "encoder {name}: layer output {} feeds input {}",
                        pair[0].out_dim(),
                        pair[1].in_dim()
                    )));
                }
            }
        }
        let m = head_bias.len();
        if head_a.rows() != m || head_v.rows() != m {
            return Err(Error::Shape(format!(
                "head rows {}/{} do not match {m} classes",
                head_a.rows(),
                head_v.rows()
            )));
        }
        if let Some(l) = encoder_a.last() {
            if l.out_dim() != head_a.cols() {
                return Err(Error::Shape("encoder a output does not match head_a".into()));
            }
        }
        if let Some(l) = encoder_v.last() {
            if l.out_dim() != head_v.cols() {
                return Err(Error::Shape("encoder v output does not match head_v".into()));
            }
        }
        Ok(FusionModel {
            encoder_a,
            encoder_v,
            head_a,
            head_v,
            head_bias,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head_bias.len()
    }

    pub fn input_dim_a(&self) -> usize {
        self.encoder_a.first().map_or(self.head_a.cols(), DenseLayer::in_dim)
    }

    pub fn input_dim_v(&self) -> usize {
        self.encoder_v.first().map_or(self.head_v.cols(), DenseLayer::in_dim)
    }

    /// Same architecture with every parameter zero; doubles as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        FusionModel {
            encoder_a: self.encoder_a.iter().map(DenseLayer::zeros_like).collect(),
            encoder_v: self.encoder_v.iter().map(DenseLayer::zeros_like).collect(),
            head_a: Tensor2::zeros(self.head_a.rows(), self.head_a.cols()),
            head_v: Tensor2::zeros(self.head_v.rows(), self.head_v.cols()),
            head_bias: vec![0.0; self.head_bias.len()],
        }
    }

    pub fn forward(&self, x_a: &[f64], x_v: &[f64]) -> Result<ForwardRecord> {
        let xa = Tensor2::from_vec(1, x_a.len(), x_a.to_vec())?;
        let xv = Tensor2::from_vec(1, x_v.len(), x_v.to_vec())?;
        let (mut recs, _) = self.forward_batch(&xa, &xv)?;
        Ok(recs.pop().expect("one row"))
    }

    /// Forward pass over a batch (one sample per row), keeping the activations
    /// needed by [`FusionModel::backward`].
    pub fn forward_batch(
        &self,
        x_a: &Tensor2,
        x_v: &Tensor2,
    ) -> Result<(Vec<ForwardRecord>, BatchTrace)> {
        if x_a.rows() != x_v.rows() {
            return Err(Error::Shape(format!(
                "modality batches have {} and {} rows",
                x_a.rows(),
                x_v.rows()
            )));
        }
        if x_a.cols() != self.input_dim_a() || x_v.cols() != self.input_dim_v() {
            return Err(Error::Shape(format!(
                "features ({}, {}) do not match encoder inputs ({}, {})",
                x_a.cols(),
                x_v.cols(),
                self.input_dim_a(),
                self.input_dim_v()
            )));
        }
        let acts_a = run_encoder(&self.encoder_a, x_a)?;
        let acts_v = run_encoder(&self.encoder_v, x_v)?;
        let za = acts_a.last().expect("input").matmul_t(&self.head_a)?;
        let zv = acts_v.last().expect("input").matmul_t(&self.head_v)?;
        let m = self.num_classes();
        let half: Vec<f64> = self.head_bias.iter().map(|b| b / 2.0).collect();
        let records = (0..x_a.rows())
            .map(|r| {
                let mut logits_a = Vec::with_capacity(m);
                let mut logits_v = Vec::with_capacity(m);
                let mut fused = Vec::with_capacity(m);
                for k in 0..m {
                    let (a, v) = (za.get(r, k), zv.get(r, k));
                    fused.push(a + v + self.head_bias[k]);
                    logits_a.push(a + half[k]);
                    logits_v.push(v + half[k]);
                }
                ForwardRecord {
                    scores_a: softmax(&logits_a),
                    scores_v: softmax(&logits_v),
                    fused_logits: fused,
                    logits_a,
                    logits_v,
                }
            })
            .collect();
        Ok((records, BatchTrace { acts_a, acts_v }))
    }

    /// Reverse-mode gradients of `Σ_i L_i` given per-sample logit gradients.
    pub fn backward(&self, trace: &BatchTrace, upstream: &[LogitGrads]) -> Result<FusionModel> {
        let batch = trace.acts_a[0].rows();
        if upstream.len() != batch {
            return Err(Error::Shape(format!(
                "{} upstream gradients for a batch of {batch}",
                upstream.len()
            )));
        }
        let m = self.num_classes();
        let mut grads = self.zeros_like();
        let mut gza = Tensor2::zeros(batch, m);
        let mut gzv = Tensor2::zeros(batch, m);
        for (r, up) in upstream.iter().enumerate() {
            if up.fused.len() != m || up.a.len() != m || up.v.len() != m {
                return Err(Error::Shape("logit gradient has wrong class count".into()));
            }
            for k in 0..m {
                gza.set(r, k, up.fused[k] + up.a[k]);
                gzv.set(r, k, up.fused[k] + up.v[k]);
                grads.head_bias[k] += up.fused[k] + 0.5 * (up.a[k] + up.v[k]);
            }
        }
        let ha = trace.acts_a.last().expect("input");
        let hv = trace.acts_v.last().expect("input");
        grads.head_a = gza.t_matmul(ha)?;
        grads.head_v = gzv.t_matmul(hv)?;
        let mut da = gza.matmul(&self.head_a)?;
        let mut dv = gzv.matmul(&self.head_v)?;
        for (i, layer) in self.encoder_a.iter().enumerate().rev() {
            da = layer.backward(
                &trace.acts_a[i],
                &trace.acts_a[i + 1],
                &da,
                &mut grads.encoder_a[i],
            )?;
        }
        for (i, layer) in self.encoder_v.iter().enumerate().rev() {
            dv = layer.backward(
                &trace.acts_v[i],
                &trace.acts_v[i + 1],
                &dv,
                &mut grads.encoder_v[i],
            )?;
        }
        Ok(grads)
    }

    pub fn all_finite(&self) -> bool {
        self.buffers().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Signs of every ReLU pre-activation in a batch; used to detect kinks
    /// when comparing against finite differences.
    pub fn activation_pattern(&self, x_a: &Tensor2, x_v: &Tensor2) -> Result<Vec<bool>> {
        let (_, trace) = self.forward_batch(x_a, x_v)?;
        Ok(trace.acts_a[1..]
            .iter()
            .chain(trace.acts_v[1..].iter())
            .flat_map(|t| t.data().iter().map(|&v| v > 0.0))
            .collect())
    }
}

impl ParamSet for FusionModel {
    fn buffers(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in self.encoder_a.iter().chain(&self.encoder_v) {
            out.push(l.weight.data());
            out.push(l.bias.as_slice());
        }
        out.push(self.head_a.data());
        out.push(self.head_v.data());
        out.push(self.head_bias.as_slice());
        out
    }

    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in self.encoder_a.iter_mut().chain(self.encoder_v.iter_mut()) {
            out.push(l.weight.data_mut());
            out.push(l.bias.as_mut_slice());
        }
        out.push(self.head_a.data_mut());
        out.push(self.head_v.data_mut());
        out.push(self.head_bias.as_mut_slice());
        out
    }
}
