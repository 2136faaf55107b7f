//! Binary checkpoints: model tensors, optimizer state and training counters.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "MGCK" | version u32 | config hash (u32 len + utf8)
//! warmup_epochs_done u64 | epoch u64 | adaptive_epoch u64
//! encoder a, encoder v: u32 count, then per layer
//!     activation u8 | out u32 | in u32 | weight f64[out*in] | bias f64[out]
//! head_a, head_v: rows u32 | cols u32 | f64[rows*cols]
//! head_bias: u32 len | f64[len]
//! optimizer: kind u8 | lr, momentum, beta1, beta2, eps f64 | step u64
//!     first, second: u32 count, then per buffer u32 len | f64[len]
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::FusionModel;
use crate::nn::{Activation, DenseLayer};
use crate::optim::{OptimizerConfig, OptimizerKind, OptimizerState};
use crate::pipeline::TrainState;
use crate::tensor::Tensor2;

const MAGIC: &[u8; 4] = b"MGCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub state: TrainState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        vs.iter().for_each(|&v| self.f64(v));
    }
    fn vec(&mut self, vs: &[f64]) {
        self.u32(vs.len());
        self.f64s(vs);
    }
    fn tensor(&mut self, t: &Tensor2) {
        self.u32(t.rows());
        self.u32(t.cols());
        self.f64s(t.data());
    }
    fn layers(&mut self, layers: &[DenseLayer]) {
        self.u32(layers.len());
        for l in layers {
            self.u8(match l.activation {
                Activation::Identity => 0,
                Activation::Relu => 1,
            });
            self.tensor(&l.weight);
            self.f64s(&l.bias);
        }
    }
    fn buffers(&mut self, bufs: &[Vec<f64>]) {
        self.u32(bufs.len());
        bufs.iter().for_each(|b| self.vec(b));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.context, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.context, "length overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()?;
        self.f64s(n)
    }
    fn tensor(&mut self) -> Result<Tensor2> {
        let rows = self.u32()?;
        let cols = self.u32()?;
        let data = self.f64s(rows * cols)?;
        Tensor2::from_vec(rows, cols, data)
    }
    fn layers(&mut self) -> Result<Vec<DenseLayer>> {
        let n = self.u32()?;
        (0..n)
            .map(|_| {
                let activation = match self.u8()? {
                    0 => Activation::Identity,
                    1 => Activation::Relu,
                    t => return Err(Error::format(self.context, format!("unknown activation tag {t}"))),
                };
                let weight = self.tensor()?;
                let bias = self.f64s(weight.rows())?;
                DenseLayer::new(weight, bias, activation)
            })
            .collect()
    }
    fn buffers(&mut self) -> Result<Vec<Vec<f64>>> {
        let n = self.u32()?;
        (0..n).map(|_| self.vec()).collect()
    }
}

impl Checkpoint {
    pub fn new(config_hash: impl Into<String>, state: TrainState) -> Self {
        Checkpoint {
            config_hash: config_hash.into(),
            state,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        w.u32(self.config_hash.len());
        w.0.extend_from_slice(self.config_hash.as_bytes());
        let s = &self.state;
        w.u64(s.warmup_epochs_done as u64);
        w.u64(s.epoch as u64);
        w.u64(s.adaptive_epoch as u64);
        let m = &s.model;
        w.layers(&m.encoder_a);
        w.layers(&m.encoder_v);
        w.tensor(&m.head_a);
        w.tensor(&m.head_v);
        w.vec(&m.head_bias);
        let o = &s.optimizer;
        w.u8(match o.config.kind {
            OptimizerKind::SgdMomentum => 0,
            OptimizerKind::Adam => 1,
        });
        w.f64s(&[
            o.config.learning_rate,
            o.config.momentum,
            o.config.adam_beta1,
            o.config.adam_beta2,
            o.config.adam_eps,
        ]);
        w.u64(o.step_count());
        w.buffers(o.first_moments());
        w.buffers(o.second_moments());
        w.0
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Checkpoint> {
        let mut r = Reader {
            bytes,
            pos: 0,
            context,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::format(context, "not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::format(context, format!("unsupported version {version}")));
        }
        let hash_len = r.u32()?;
        let config_hash = String::from_utf8(r.take(hash_len)?.to_vec())
            .map_err(|_| Error::format(context, "config hash is not utf-8"))?;
        let warmup_epochs_done = r.u64()? as usize;
        let epoch = r.u64()? as usize;
        let adaptive_epoch = r.u64()? as usize;
        let encoder_a = r.layers()?;
        let encoder_v = r.layers()?;
        let head_a = r.tensor()?;
        let head_v = r.tensor()?;
        let head_bias = r.vec()?;
        let model = FusionModel::from_parts(encoder_a, encoder_v, head_a, head_v, head_bias)?;
        let kind = match r.u8()? {
            0 => OptimizerKind::SgdMomentum,
            1 => OptimizerKind::Adam,
            t => return Err(Error::format(context, format!("unknown optimizer tag {t}"))),
        };
        let config = OptimizerConfig {
            kind,
            learning_rate: r.f64()?,
            momentum: r.f64()?,
            adam_beta1: r.f64()?,
            adam_beta2: r.f64()?,
            adam_eps: r.f64()?,
        };
        let step = r.u64()?;
        let first = r.buffers()?;
        let second = r.buffers()?;
        let optimizer = OptimizerState::from_parts(config, first, second, step)?;
        if r.pos != bytes.len() {
            return Err(Error::format(context, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            config_hash,
            state: TrainState {
                model,
                optimizer,
                adaptive_epoch,
                epoch,
                warmup_epochs_done,
            },
        })
    }

    /// Writes the checkpoint, creating parent directories as needed.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::ModelConfig;
    use crate::optim::ParamSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(kind: OptimizerKind) -> TrainState {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = FusionModel::new(3, 4, 5, &ModelConfig { hidden: vec![6, 2] }, &mut rng);
        let mut optimizer = OptimizerState::new(OptimizerConfig {
            kind,
            ..OptimizerConfig::default()
        });
        let grads: Vec<Vec<f64>> = model
            .buffers()
            .iter()
            .map(|b| b.iter().map(|v| v * 0.3 + 0.1).collect())
            .collect();
        optimizer.step(&mut model, &grads).unwrap();
        TrainState {
            model,
            optimizer,
            adaptive_epoch: 7,
            epoch: 11,
            warmup_epochs_done: 4,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for kind in [OptimizerKind::SgdMomentum, OptimizerKind::Adam] {
            let ck = Checkpoint::new("abc123", state(kind));
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn fresh_optimizer_round_trips() {
        let mut s = state(OptimizerKind::Adam);
        s.optimizer = OptimizerState::new(s.optimizer.config);
        let ck = Checkpoint::new("", s);
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes(), "mem").unwrap(), ck);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = Checkpoint::new("h", state(OptimizerKind::SgdMomentum)).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], "mem").is_err());
        assert!(Checkpoint::from_bytes(b"XXXX", "mem").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, "mem").is_err());
    }
}
