//! The frozen/trainable parameter partition.

use ndarray::{ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::unet::{ImageKv, UNet};
use crate::identity::MapperWeights;
use crate::nn::{join, Params};

/// Everything identity training may change: both mappers and the image
/// key/value projections of every cross-attention unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapters {
    pub mappers: MapperWeights,
    pub image_kv: Vec<ImageKv>,
}

impl Params for Adapters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.mappers.visit(&join(prefix, "mappers"), f);
        self.image_kv.visit(&join(prefix, "image_kv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.mappers.visit_mut(&join(prefix, "mappers"), f);
        self.image_kv.visit_mut(&join(prefix, "image_kv"), f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    /// Frozen base U-Net, text cross-attention included.
    pub base: UNet,
    pub adapters: Adapters,
}

impl ModelWeights {
    /// Adapters freshly attached to `base`: image projections copied from the
    /// text ones, mappers at their small random initialization.
    pub fn attach(base: UNet, mappers: MapperWeights) -> Self {
        let image_kv = base.init_image_kv();
        Self {
            base,
            adapters: Adapters { mappers, image_kv },
        }
    }

    /// Hex SHA-256 over names, shapes and little-endian bytes of every frozen
    /// tensor.
    pub fn frozen_digest(&self) -> String {
        digest_params(&self.base)
    }

    pub fn trainable_digest(&self) -> String {
        digest_params(&self.adapters)
    }
}

pub fn digest_params(p: &dyn Params) -> String {
    let mut h = Sha256::new();
    p.visit("", &mut |name, a| {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((a.ndim() as u64).to_le_bytes());
        for &d in a.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in a.iter() {
            h.update(v.to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}
