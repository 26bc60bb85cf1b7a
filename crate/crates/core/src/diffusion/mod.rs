//! Toy latent diffusion backbone: noise schedule, latent codec, conditional
//! U-Net and the deterministic DDIM sampler.

pub mod codec;
pub mod layers;
pub mod schedule;
pub mod unet;
pub mod weights;

use ndarray::Array3;

use crate::error::{Error, Result};

pub use codec::LatentCodec;
pub use schedule::{ddim_step, ddim_timesteps, make_noise_schedule, q_sample, NoiseSchedule};
pub use unet::{
    AttentionHooks, ConditionBundle, ImageKv, LayerKv, SelfAttentionVariant, UNet, UNetConfig,
    UNetGrads, UNetTape,
};
pub use weights::{Adapters, ModelWeights};

/// A latent `[h × w × c]` tensor with finite entries and power-of-two spatial
/// sides of at least 8.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor(Array3<f64>);

impl LatentTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        let side_ok = |n: usize| n >= 8 && n.is_power_of_two();
        if !side_ok(h) || !side_ok(w) || c == 0 {
            return Err(Error::shape(format!(
                "latent {h}x{w}x{c}: sides must be powers of two >= 8 and channels positive"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("latent contains non-finite values"));
        }
        Ok(Self(data))
    }

    /// Wraps an array produced by a computation that already guarantees the
    /// shape invariants.
    pub(crate) fn from_raw(data: Array3<f64>) -> Self {
        Self(data)
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Result<Self> {
        Self::new(Array3::zeros((h, w, c)))
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_data(self) -> Array3<f64> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(())
    }
}
