//! Binary checkpoint bundle.
//!
//! Layout: the magic bytes, a little-endian `u32` format version, a `u64`
//! header length, a JSON header, then every tensor as little-endian `f64`
//! in header order. The header carries the run configuration, the digests
//! of both weight partitions and the optional optimizer moments' location.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diffusion::{ModelWeights, UNet};
use crate::error::{Error, Result};
use crate::identity::MapperWeights;
use crate::nn::Params;
use crate::optim::AdamWState;

pub const MAGIC: &[u8; 8] = b"IDFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// In elements from the start of the data section.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerEntry {
    step: u64,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
    pub train: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: RunConfig,
    config_digest: String,
    frozen_digest: String,
    trainable_digest: String,
    seeds: Seeds,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerEntry>,
}

/// Weights plus everything needed to resume or reproduce a run.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointBundle {
    pub config: RunConfig,
    pub weights: ModelWeights,
    pub optimizer: Option<AdamWState>,
}

impl CheckpointBundle {
    pub fn seeds(&self) -> Seeds {
        Seeds {
            model: self.config.model.seed,
            data: self.config.data.seed,
            train: self.config.train.seed,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data: Vec<f64> = Vec::new();
        let mut tensors = Vec::new();
        let mut record = |name: &str, a: ndarray::ArrayViewD<'_, f64>| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: a.shape().to_vec(),
                dtype: "f64".into(),
                offset: data.len(),
            });
            data.extend(a.iter().copied());
        };
        self.weights.base.visit("base", &mut record);
        self.weights.adapters.visit("adapters", &mut record);
        let optimizer = self.optimizer.as_ref().map(|s| {
            let entry = OptimizerEntry {
                step: s.step,
                offset: data.len(),
                len: s.m.len(),
            };
            data.extend_from_slice(&s.m);
            data.extend_from_slice(&s.v);
            entry
        });
        let header = Header {
            config: self.config.clone(),
            config_digest: self.config.digest(),
            frozen_digest: self.weights.frozen_digest(),
            trainable_digest: self.weights.trainable_digest(),
            seeds: self.seeds(),
            tensors,
            optimizer,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint bundle"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..)
            .filter(|b| b.len() >= header_len)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let raw = &body[header_len..];
        if raw.len() % 8 != 0 {
            return Err(bad("data section is not a whole number of f64 values"));
        }
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let config = header.config;
        config.validate()?;
        if config.digest() != header.config_digest {
            return Err(bad("config digest mismatch"));
        }
        let mut weights = skeleton(&config)?;
        let mut entries = header.tensors.iter();
        let mut failure: Option<String> = None;
        let mut fill = |name: &str, mut a: ndarray::ArrayViewMutD<'_, f64>| {
            if failure.is_some() {
                return;
            }
            let Some(e) = entries.next() else {
                failure = Some(format!("missing tensor {name}"));
                return;
            };
            if e.name != name || e.shape != a.shape() || e.dtype != "f64" {
                failure = Some(format!("tensor {} does not match expected {name} {:?}", e.name, a.shape()));
                return;
            }
            match data.get(e.offset..e.offset + a.len()) {
                Some(src) => a.iter_mut().zip(src).for_each(|(d, s)| *d = *s),
                None => failure = Some(format!("tensor {name} runs past the data section")),
            }
        };
        weights.base.visit_mut("base", &mut fill);
        weights.adapters.visit_mut("adapters", &mut fill);
        if let Some(f) = failure {
            return Err(Error::Checkpoint(f));
        }
        if entries.next().is_some() {
            return Err(bad("unexpected extra tensors"));
        }
        if weights.frozen_digest() != header.frozen_digest {
            return Err(bad("frozen-partition digest mismatch"));
        }
        if weights.trainable_digest() != header.trainable_digest {
            return Err(bad("trainable-partition digest mismatch"));
        }
        let optimizer = match header.optimizer {
            None => None,
            Some(o) => {
                if o.len != weights.adapters.param_count() {
                    return Err(bad("optimizer state does not match the adapters"));
                }
                let m = data.get(o.offset..o.offset + o.len);
                let v = data.get(o.offset + o.len..o.offset + 2 * o.len);
                match (m, v) {
                    (Some(m), Some(v)) => Some(AdamWState {
                        step: o.step,
                        m: m.to_vec(),
                        v: v.to_vec(),
                    }),
                    _ => return Err(bad("optimizer state runs past the data section")),
                }
            }
        };
        Ok(Self {
            config,
            weights,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&crate::io::read(path)?)
            .map_err(|e| match e {
                Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
                other => other,
            })
    }
}

/// Correctly shaped weights whose values are about to be overwritten.
fn skeleton(config: &RunConfig) -> Result<ModelWeights> {
    let m = &config.model;
    let base = UNet::init(&m.unet, m.seed)?;
    let mappers = MapperWeights::init(m.encoders.clip_dim, m.encoders.face_dim, m.unet.d_model, m.seed);
    Ok(ModelWeights::attach(base, mappers))
}
