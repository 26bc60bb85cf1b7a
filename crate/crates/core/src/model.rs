//! The assembled model: configuration, frozen encoders, schedule, codec and
//! the partitioned weights, plus pretraining of the base U-Net.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    make_noise_schedule, LatentCodec, LatentTensor, ModelWeights, NoiseSchedule, UNet, UNetConfig,
};
use crate::error::{Error, Result};
use crate::identity::{
    encode_identity_features, EncoderBackend, EncoderKind, IdentityEmbedding, IdentityFeatures,
    MapperWeights, StubBackend,
};
use crate::image::Image;
use crate::synth::{generate_synthetic_dataset, SynthConfig};
use crate::text::HashTextEncoder;
use crate::train::{pretrain_base, PretrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    /// Stable Diffusion's endpoints, interpolated linearly.
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub clip_tokens: usize,
    pub clip_dim: usize,
    pub face_dim: usize,
    /// Side of the downsampled grid the stub encoders read.
    pub input_grid: usize,
    pub align_size: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            clip_tokens: 4,
            clip_dim: 32,
            face_dim: 32,
            input_grid: 16,
            align_size: 32,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn clip_backend(&self) -> Result<StubBackend> {
        StubBackend::new(
            EncoderKind::ClipLike,
            self.clip_tokens,
            self.clip_dim,
            self.seed,
            self.input_grid,
        )
    }

    pub fn face_backend(&self) -> Result<StubBackend> {
        StubBackend::new(EncoderKind::FaceLike, 1, self.face_dim, self.seed, self.input_grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Seed of the base U-Net, its pretraining corpus and the text encoder.
    pub seed: u64,
    pub image_size: usize,
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    pub encoders: EncoderConfig,
    pub codec: LatentCodec,
    pub pretrain: PretrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 32,
            unet: UNetConfig::default(),
            schedule: ScheduleConfig::default(),
            encoders: EncoderConfig::default(),
            codec: LatentCodec::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if self.codec.factor == 0 || !self.image_size.is_multiple_of(self.codec.factor) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by codec factor {}",
                self.image_size, self.codec.factor
            )));
        }
        if self.image_size / self.codec.factor != self.unet.latent_size {
            return Err(Error::Config(format!(
                "image_size {} / factor {} != latent_size {}",
                self.image_size, self.codec.factor, self.unet.latent_size
            )));
        }
        if self.codec.channels != self.unet.latent_channels || self.codec.channels < 3 {
            return Err(Error::Config(
                "codec channels must equal unet.latent_channels and be at least 3".into(),
            ));
        }
        if self.encoders.align_size < crate::image::MIN_SIDE {
            return Err(Error::Config("encoders.align_size below the image minimum".into()));
        }
        if self.encoders.clip_tokens == 0 || self.encoders.clip_dim == 0 || self.encoders.face_dim == 0
        {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        make_noise_schedule(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)
            .map_err(|e| Error::Config(format!("schedule: {e}")))?;
        self.pretrain.validate()
    }

    /// Corpus the base U-Net is pretrained on; disjoint in seed from any
    /// adapter-training dataset drawn with a user seed.
    pub fn pretrain_corpus(&self) -> SynthConfig {
        SynthConfig {
            n_identities: self.pretrain.n_identities,
            variants_per_identity: self.pretrain.variants_per_identity,
            image_size: self.image_size,
            seed: crate::rng::stream(self.seed, "pretrain-corpus").random(),
        }
    }
}

/// Everything needed to train adapters or generate images.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub schedule: NoiseSchedule,
    pub codec: LatentCodec,
    pub text: HashTextEncoder,
    pub clip: Arc<dyn EncoderBackend>,
    pub face: Arc<dyn EncoderBackend>,
    pub weights: ModelWeights,
}

impl Model {
    /// Wraps existing weights, checking them against the configuration.
    pub fn from_weights(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        if weights.base.config != config.unet {
            return Err(Error::Config("weights were built for a different U-Net config".into()));
        }
        if weights.adapters.image_kv.len() != weights.base.attention_layer_count() {
            return Err(Error::Config("image projections do not match the attention layers".into()));
        }
        let m = &weights.adapters.mappers;
        if m.clip_mapper.d_in() != config.encoders.clip_dim
            || m.face_mapper.d_in() != config.encoders.face_dim
            || m.d_model() != config.unet.d_model
        {
            return Err(Error::Config("mapper shapes do not match the encoder config".into()));
        }
        let schedule =
            make_noise_schedule(config.schedule.steps, config.schedule.beta_start, config.schedule.beta_end)?;
        Ok(Self {
            schedule,
            codec: config.codec.clone(),
            text: HashTextEncoder::new(config.unet.d_model, config.seed),
            clip: Arc::new(config.encoders.clip_backend()?),
            face: Arc::new(config.encoders.face_backend()?),
            weights,
            config,
        })
    }

    /// Initializes and pretrains the base U-Net on its text-captioned corpus,
    /// then attaches fresh adapters. Deterministic given the configuration.
    pub fn pretrained(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let base = UNet::init(&config.unet, config.seed)?;
        let mappers = MapperWeights::init(
            config.encoders.clip_dim,
            config.encoders.face_dim,
            config.unet.d_model,
            config.seed,
        );
        let mut model = Self::from_weights(config, ModelWeights::attach(base, mappers))?;
        let corpus = generate_synthetic_dataset(&model.config.pretrain_corpus(), model.face.as_ref())?;
        let pretrain = model.config.pretrain.clone();
        pretrain_base(&mut model, &corpus, &pretrain)?;
        // Image projections start as copies of the pretrained text ones.
        model.weights.adapters.image_kv = model.weights.base.init_image_kv();
        Ok(model)
    }

    pub fn encode_image(&self, img: &Image) -> Result<LatentTensor> {
        if img.height() != self.config.image_size || img.width() != self.config.image_size {
            let s = self.config.image_size;
            return self.codec.encode(&crate::image::align_face(img, s)?);
        }
        self.codec.encode(img)
    }

    pub fn decode_latent(&self, z: &LatentTensor) -> Result<Image> {
        self.codec.decode(z)
    }

    pub fn identity_features(&self, img: &Image) -> Result<IdentityFeatures> {
        encode_identity_features(
            img,
            self.clip.as_ref(),
            self.face.as_ref(),
            self.config.encoders.align_size,
        )
    }

    pub fn identity_embedding(&self, img: &Image, label: &str) -> Result<IdentityEmbedding> {
        let features = self.identity_features(img)?;
        IdentityEmbedding::new(self.weights.adapters.mappers.map(&features)?, vec![label.to_string()])
    }

    /// Text tokens of a prompt, start and end markers included.
    pub fn text_context(&self, prompt: &str) -> Array2<f64> {
        self.text.encode(prompt)
    }
}
