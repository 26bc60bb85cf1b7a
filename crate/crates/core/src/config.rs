//! The run configuration: one TOML file covering every stage, with strict
//! keys and defaults equal to the toy reference setup.
//!
//! Full-scale values for comparison: learning rate 1e-4, weight decay 0.01,
//! 30 DDIM steps, guidance scale 5.0. The toy run keeps the last three and
//! raises the learning rate to 1e-3 because it trains for only 500 steps.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{CanonicalRenderText, Evaluator, HashProjectionText, TextEmbedder};
use crate::identity::EncoderBackend;
use crate::inference::InferenceDefaults;
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

/// Which stub maps prompts into the image-embedding space for CLIP-T.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextBackend {
    /// Embeds the sprite a caption describes; aligned with the clip stub.
    #[default]
    CanonicalRender,
    /// Random projection of hashed words; unaligned, for plumbing tests.
    HashProjection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub text_backend: TextBackend,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            text_backend: TextBackend::CanonicalRender,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: SynthConfig,
    pub train: TrainConfig,
    pub inference: InferenceDefaults,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&crate::io::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.n_identities < 2 || self.data.variants_per_identity < 2 {
            return Err(Error::Config("data needs at least 2 identities and 2 variants".into()));
        }
        if self.data.image_size != self.model.image_size {
            return Err(Error::Config(format!(
                "data.image_size {} differs from model.image_size {}",
                self.data.image_size, self.model.image_size
            )));
        }
        if self.inference.steps == 0 || self.inference.steps > self.model.schedule.steps {
            return Err(Error::Config("inference.steps must lie in 1..=schedule.steps".into()));
        }
        if !(self.inference.guidance_scale >= 0.0) || !self.inference.guidance_scale.is_finite() {
            return Err(Error::Config("inference.guidance_scale must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// A scaled-down setup (16 px images, 8×8 latent) that pretrains, trains
    /// and samples in seconds. Meant for demos and smoke runs, not for
    /// judging quality.
    pub fn quick() -> Self {
        let mut c = Self::default();
        c.model.image_size = 16;
        c.model.unet.latent_size = 8;
        c.model.unet.base_channels = 8;
        c.model.unet.attention_resolutions = vec![8, 4];
        c.model.unet.d_model = 16;
        c.model.unet.norm_groups = 4;
        c.model.encoders.align_size = 16;
        c.model.encoders.input_grid = 8;
        c.model.encoders.clip_dim = 8;
        c.model.encoders.face_dim = 8;
        c.model.pretrain.steps = 150;
        c.model.pretrain.n_identities = 6;
        c.model.pretrain.variants_per_identity = 2;
        c.data.image_size = 16;
        c.data.n_identities = 4;
        c.data.variants_per_identity = 2;
        c.train.steps = 60;
        c.train.batch_size = 2;
        c.inference.steps = 10;
        c
    }

    /// The metric encoders this configuration describes.
    pub fn evaluator(&self) -> Result<Evaluator> {
        let enc = &self.model.encoders;
        let clip: Arc<dyn EncoderBackend> = Arc::new(enc.clip_backend()?);
        let face: Arc<dyn EncoderBackend> = Arc::new(enc.face_backend()?);
        let text: Arc<dyn TextEmbedder> = match self.eval.text_backend {
            TextBackend::CanonicalRender => Arc::new(CanonicalRenderText::new(clip.clone(), self.model.image_size)),
            TextBackend::HashProjection => {
                Arc::new(HashProjectionText::new(self.model.unet.d_model, enc.clip_dim, enc.seed))
            }
        };
        Evaluator::new(clip, face, text, enc.align_size)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
