//! Synthetic two-modality classification data with a planted fraction of
//! samples whose weak modality carries no (or misleading) class information.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

const DATASET_MAGIC: &str = "#modgap-dataset";
const DATASET_VERSION: u32 = 1;
const SPLIT_SALT: u64 = 0x5eed_5911;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradeMode {
    /// Weak modality replaced by class-free noise with the same marginal scale.
    NoiseSwamp,
    /// Weak modality drawn around the centroid of a different class.
    LabelShuffleFeatures,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    A,
    V,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_samples: usize,
    pub feature_dim: usize,
    pub imbalance_fraction: f64,
    pub degrade_mode: DegradeMode,
    pub degraded_modality: Modality,
    pub centroid_scale: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 6,
            num_samples: 3000,
            feature_dim: 8,
            imbalance_fraction: 0.15,
            degrade_mode: DegradeMode::NoiseSwamp,
            degraded_modality: Modality::V,
            centroid_scale: 3.0,
            noise_scale: 1.0,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("data.num_classes", "need at least 2 classes"));
        }
        if self.num_samples < self.num_classes {
            return Err(Error::config(
                "data.num_samples",
                "need at least one sample per class",
            ));
        }
        if self.feature_dim < 2 {
            return Err(Error::config("data.feature_dim", "must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.imbalance_fraction) {
            return Err(Error::config("data.imbalance_fraction", "must lie in [0, 1]"));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::config("data.noise_scale", "must be > 0"));
        }
        if !(self.centroid_scale > 0.0 && self.centroid_scale.is_finite()) {
            return Err(Error::config("data.centroid_scale", "must be > 0"));
        }
        Ok(())
    }

    pub fn num_degraded(&self) -> usize {
        (self.imbalance_fraction * self.num_samples as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSample {
    pub id: usize,
    pub label: usize,
    pub planted_imbalanced: bool,
    pub x_a: Vec<f64>,
    pub x_v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub samples: Vec<MultimodalSample>,
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn around<R: Rng + ?Sized>(rng: &mut R, centre: &[f64], scale: f64) -> Vec<f64> {
    centre
        .iter()
        .map(|c| c + scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (m, n, d) = (cfg.num_classes, cfg.num_samples, cfg.feature_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centroids_a: Vec<Vec<f64>> = (0..m)
        .map(|_| gaussian_vec(&mut rng, d, cfg.centroid_scale))
        .collect();
    let centroids_v: Vec<Vec<f64>> = (0..m)
        .map(|_| gaussian_vec(&mut rng, d, cfg.centroid_scale))
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut degraded = vec![false; n];
    for &i in &order[..cfg.num_degraded()] {
        degraded[i] = true;
    }

    let swamp_scale = (cfg.centroid_scale.powi(2) + cfg.noise_scale.powi(2)).sqrt();
    let mut samples: Vec<MultimodalSample> = (0..n)
        .map(|i| {
            // independent stream per sample
            let mut srng = ChaCha8Rng::seed_from_u64(cfg.seed);
            srng.set_stream(i as u64 + 1);
            let label = i % m;
            let mut x_a = around(&mut srng, &centroids_a[label], cfg.noise_scale);
            let mut x_v = around(&mut srng, &centroids_v[label], cfg.noise_scale);
            if degraded[i] {
                let centroids = match cfg.degraded_modality {
                    Modality::A => &centroids_a,
                    Modality::V => &centroids_v,
                };
                let replaced = match cfg.degrade_mode {
                    DegradeMode::NoiseSwamp => gaussian_vec(&mut srng, d, swamp_scale),
                    DegradeMode::LabelShuffleFeatures => {
                        let other = (label + srng.random_range(1..m)) % m;
                        around(&mut srng, &centroids[other], cfg.noise_scale)
                    }
                };
                match cfg.degraded_modality {
                    Modality::A => x_a = replaced,
                    Modality::V => x_v = replaced,
                }
            }
            MultimodalSample {
                id: 0,
                label,
                planted_imbalanced: degraded[i],
                x_a,
                x_v,
            }
        })
        .collect();
    samples.shuffle(&mut rng);
    for (id, s) in samples.iter_mut().enumerate() {
        s.id = id;
    }
    Ok(Dataset {
        config: cfg.clone(),
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Class-stratified train/val/test split. Each index list is ascending.
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::config(
            "schedule.split",
            format!("fractions {fractions:?} must be in [0,1] and sum to 1"),
        ));
    }
    let m = dataset.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
    let mut out = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for mut idx in by_class {
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_train = (fractions[0] * n).round() as usize;
        let n_val = ((fractions[1] * n).round() as usize).min(idx.len() - n_train);
        out.train.extend_from_slice(&idx[..n_train]);
        out.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        out.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn feature_dims(&self) -> (usize, usize) {
        self.samples
            .first()
            .map_or((self.config.feature_dim, self.config.feature_dim), |s| {
                (s.x_a.len(), s.x_v.len())
            })
    }

    /// Feature matrices for the given rows.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor2, Tensor2)> {
        let (da, dv) = self.feature_dims();
        let mut xa = Vec::with_capacity(indices.len() * da);
        let mut xv = Vec::with_capacity(indices.len() * dv);
        for &i in indices {
            let s = self.samples.get(i).ok_or(Error::Index {
                index: i,
                len: self.samples.len(),
            })?;
            xa.extend_from_slice(&s.x_a);
            xv.extend_from_slice(&s.x_v);
        }
        Ok((
            Tensor2::from_vec(indices.len(), da, xa)?,
            Tensor2::from_vec(indices.len(), dv, xv)?,
        ))
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label).collect()
    }

    pub fn to_text(&self) -> String {
        let (da, dv) = self.feature_dims();
        let mut out = String::new();
        let header = serde_json::to_string(&self.config).expect("config serializes");
        writeln!(out, "{DATASET_MAGIC} v{DATASET_VERSION} {header}").unwrap();
        out.push_str("id,label,planted");
        for k in 0..da {
            write!(out, ",a{k}").unwrap();
        }
        for k in 0..dv {
            write!(out, ",v{k}").unwrap();
        }
        out.push('\n');
        for s in &self.samples {
            write!(out, "{},{},{}", s.id, s.label, u8::from(s.planted_imbalanced)).unwrap();
            for v in s.x_a.iter().chain(&s.x_v) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Dataset::read(f, &path.display().to_string())
    }

    pub fn read<R: Read>(reader: R, context: &str) -> Result<Dataset> {
        let fmt = |msg: String| Error::format(context, msg);
        let mut lines = BufReader::new(reader).lines();
        let mut next = || -> Result<Option<String>> {
            lines
                .next()
                .transpose()
                .map_err(|e| Error::io(context, e))
        };
        let first = next()?.ok_or_else(|| fmt("empty file".into()))?;
        let rest = first
            .strip_prefix(DATASET_MAGIC)
            .ok_or_else(|| fmt("missing dataset header".into()))?;
        let (version, json) = rest
            .trim_start()
            .split_once(' ')
            .ok_or_else(|| fmt("malformed header".into()))?;
        if version != format!("v{DATASET_VERSION}") {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let config: SynthConfig =
            serde_json::from_str(json).map_err(|e| fmt(format!("header config: {e}")))?;
        let columns = next()?.ok_or_else(|| fmt("missing column header".into()))?;
        let cols: Vec<&str> = columns.split(',').collect();
        let da = cols.iter().filter(|c| c.starts_with('a')).count();
        let dv = cols.iter().filter(|c| c.starts_with('v')).count();
        if cols.len() != 3 + da + dv || cols[..3] != ["id", "label", "planted"] {
            return Err(fmt("unexpected column header".into()));
        }
        let mut samples = Vec::new();
        let mut line_no = 2;
        while let Some(line) = next()? {
            line_no += 1;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(fmt(format!("line {line_no}: expected {} fields", cols.len())));
            }
            let parse_usize = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| fmt(format!("line {line_no}: {e}")))
            };
            let values: Vec<f64> = fields[3..]
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| fmt(format!("line {line_no}: {e}")))
                })
                .collect::<Result<_>>()?;
            let label = parse_usize(fields[1])?;
            if label >= config.num_classes {
                return Err(fmt(format!("line {line_no}: label {label} out of range")));
            }
            samples.push(MultimodalSample {
                id: parse_usize(fields[0])?,
                label,
                planted_imbalanced: match fields[2] {
                    "1" => true,
                    "0" => false,
                    other => return Err(fmt(format!("line {line_no}: bad planted flag {other}"))),
                },
                x_a: values[..da].to_vec(),
                x_v: values[da..].to_vec(),
            });
        }
        Ok(Dataset { config, samples })
    }
}
