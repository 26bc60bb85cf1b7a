//! Dual-stream generation.
//!
//! A text-only stream and an identity stream start from the same noise and
//! share the DDIM timesteps. At every step the text stream records its
//! self-attention keys/values, which the identity stream's self-attention
//! layers consume (mixed or mutual attention). The identity stream's
//! cross-attention sees the identity tokens and, when merging is enabled,
//! the prompt tokens as well. Guidance applies to the identity stream only.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::StyleAlignMode;
use crate::diffusion::{
    ddim_step, ddim_timesteps, AttentionHooks, ConditionBundle, LatentTensor, SelfAttentionVariant,
};
use crate::error::{Error, Result};
use crate::identity::{interpolate_identities, stack_identities, IdentityEmbedding};
use crate::image::Image;
use crate::model::Model;
use crate::rng;
use crate::train::TrainMode;

/// Which self-attention the identity stream runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Own keys/values concatenated with the text stream's.
    #[default]
    MixedAttention,
    /// Plain self-attention; the text stream is not consulted.
    NoMixedAttention,
    /// Keys/values replaced by the text stream's.
    MutualAttention,
}

impl Variant {
    pub fn self_attention(self) -> SelfAttentionVariant {
        match self {
            Self::MixedAttention => SelfAttentionVariant::Mixed,
            Self::NoMixedAttention => SelfAttentionVariant::Plain,
            Self::MutualAttention => SelfAttentionVariant::Mutual,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::MixedAttention => "mixed_attention",
            Self::NoMixedAttention => "no_mixed_attention",
            Self::MutualAttention => "mutual_attention",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed_attention" => Ok(Self::MixedAttention),
            "no_mixed_attention" => Ok(Self::NoMixedAttention),
            "mutual_attention" => Ok(Self::MutualAttention),
            _ => Err(Error::input(format!(
                "unknown variant `{s}` (expected mixed_attention, no_mixed_attention or mutual_attention)"
            ))),
        }
    }
}

/// Sampler settings that have defaults in the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceDefaults {
    /// 30 DDIM steps, the usual full-scale setting.
    pub steps: usize,
    /// 5.0, the usual full-scale setting.
    pub guidance_scale: f64,
    pub variant: Variant,
    pub merge_cross_attention: bool,
    pub style: StyleAlignMode,
    /// Project each step's clean-latent estimate onto latents that decode to
    /// in-range pixels.
    pub clip_sample: bool,
}

impl Default for InferenceDefaults {
    fn default() -> Self {
        Self {
            steps: 30,
            guidance_scale: 5.0,
            variant: Variant::MixedAttention,
            merge_cross_attention: true,
            style: StyleAlignMode::Off,
            clip_sample: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt: String,
    /// Replaces the empty text of the unconditional branch when non-empty.
    pub negative_prompt: String,
    /// Reference faces. More than one is stacked unless `mix_weights` is
    /// given; none at all generates without identity (a baseline).
    pub id_images: Vec<Image>,
    /// Convex weights, one per image, for interpolating identities.
    pub mix_weights: Option<Vec<f64>>,
    /// Style alignment inside mixed attention.
    pub style: StyleAlignMode,
    /// Style alignment inside merged cross-attention; follows `style` when
    /// unset.
    pub cross_style: Option<StyleAlignMode>,
    pub seed: u64,
    pub steps: usize,
    pub guidance_scale: f64,
    pub variant: Variant,
    pub merge_cross_attention: bool,
    pub clip_sample: bool,
    /// Store the per-step guidance inputs in the provenance record.
    pub record_guidance: bool,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, id_images: Vec<Image>, seed: u64) -> Self {
        Self::with_defaults(prompt, id_images, seed, &InferenceDefaults::default())
    }

    pub fn with_defaults(
        prompt: impl Into<String>,
        id_images: Vec<Image>,
        seed: u64,
        d: &InferenceDefaults,
    ) -> Self {
        Self {
            prompt: prompt.into(),
            negative_prompt: String::new(),
            id_images,
            mix_weights: None,
            style: d.style,
            cross_style: None,
            seed,
            steps: d.steps,
            guidance_scale: d.guidance_scale,
            variant: d.variant,
            merge_cross_attention: d.merge_cross_attention,
            clip_sample: d.clip_sample,
            record_guidance: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::input("steps must be at least 1"));
        }
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            return Err(Error::input("guidance_scale must be finite and non-negative"));
        }
        if let Some(w) = &self.mix_weights {
            if w.len() != self.id_images.len() || w.len() < 2 {
                return Err(Error::input("mix_weights needs one weight per id image (at least two)"));
            }
            let sum: f64 = w.iter().sum();
            if w.iter().any(|x| !(0.0..=1.0).contains(x)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::input("mix_weights must lie in [0, 1] and sum to 1"));
            }
        }
        Ok(())
    }
}

/// Guidance inputs and output of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRecord {
    pub t: usize,
    pub t_prev: usize,
    pub eps_cond: Vec<f64>,
    pub eps_uncond: Vec<f64>,
    pub eps_guided: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_digest: String,
    pub frozen_digest: String,
    pub adapter_digest: String,
    pub prompt: String,
    pub negative_prompt: String,
    pub variant: Variant,
    /// How the adapters were trained, when the checkpoint records it.
    #[serde(default)]
    pub training_mode: Option<TrainMode>,
    pub merge_cross_attention: bool,
    pub style: StyleAlignMode,
    pub cross_style: StyleAlignMode,
    pub steps: usize,
    pub guidance_scale: f64,
    #[serde(default)]
    pub clip_sample: bool,
    /// Which stream guidance was applied to.
    pub guidance_scope: String,
    pub identity_sources: Vec<String>,
    pub identity_tokens: usize,
    pub mix_weights: Option<Vec<f64>>,
    pub timesteps: Vec<(usize, usize)>,
    /// Capture sets the identity stream consumed, one per step when the
    /// variant uses them.
    pub capture_sets_consumed: usize,
    pub guidance: Option<Vec<GuidanceRecord>>,
}

/// `eps_uncond + scale·(eps_cond − eps_uncond)`.
pub fn classifier_free_guidance(
    eps_cond: &LatentTensor,
    eps_uncond: &LatentTensor,
    scale: f64,
) -> Result<LatentTensor> {
    eps_cond.check_same_shape(eps_uncond, "guidance branches")?;
    Ok(LatentTensor::from_raw(
        eps_uncond.data() + &((eps_cond.data() - eps_uncond.data()) * scale),
    ))
}

/// Hex SHA-256 of the model configuration's canonical JSON.
pub fn config_digest(model: &Model) -> String {
    let json = serde_json::to_vec(&model.config).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

/// Identity tokens for a request: one image as is, several stacked, or
/// interpolated under `mix_weights`.
pub fn request_identity(model: &Model, req: &GenerationRequest) -> Result<Option<IdentityEmbedding>> {
    if req.id_images.is_empty() {
        return Ok(None);
    }
    let embeddings = req
        .id_images
        .iter()
        .enumerate()
        .map(|(i, img)| model.identity_embedding(img, &format!("id{i}")))
        .collect::<Result<Vec<_>>>()?;
    let out = match &req.mix_weights {
        None => stack_identities(&embeddings)?,
        Some(w) if w.len() == 2 => interpolate_identities(&embeddings[0], &embeddings[1], w[1])?,
        Some(w) => {
            // Exact when a single weight is 1.
            if let Some(i) = w.iter().position(|&x| x == 1.0) {
                embeddings[i].clone()
            } else {
                let mut tokens = Array2::zeros(embeddings[0].tokens().dim());
                for (e, &wi) in embeddings.iter().zip(w) {
                    if e.tokens().dim() != tokens.dim() {
                        return Err(Error::shape("identities to mix differ in shape"));
                    }
                    tokens += &e.tokens().mapv(|v| v * wi);
                }
                let label = (0..w.len()).map(|i| format!("id{i}")).collect::<Vec<_>>().join("|");
                IdentityEmbedding::new(tokens, vec![label])?
            }
        }
    };
    Ok(Some(out))
}

/// Initial noise shared by both streams.
pub fn initial_noise(model: &Model, seed: u64) -> LatentTensor {
    let cfg = &model.config.unet;
    let n = cfg.latent_size;
    LatentTensor::from_raw(rng::normal(
        &mut rng::stream(seed, "initial-noise"),
        (n, n, cfg.latent_channels),
        1.0,
    ))
}

/// One DDIM step. With `clip`, the implied clean latent is projected onto
/// decodable latents and the noise estimate re-derived from it first.
pub fn sampler_step(
    model: &Model,
    z: &LatentTensor,
    eps: &LatentTensor,
    t: usize,
    t_prev: usize,
    clip: bool,
) -> Result<LatentTensor> {
    let sched = &model.schedule;
    if !clip {
        return ddim_step(z, eps, t, t_prev, sched);
    }
    let ab = sched.alpha_bar(t)?;
    let x0 = LatentTensor::new((z.data() - &(eps.data() * (1.0 - ab).sqrt())) / ab.sqrt())?;
    let x0 = model.codec.project(&x0)?;
    let eps = LatentTensor::new((z.data() - &(x0.data() * ab.sqrt())) / (1.0 - ab).sqrt())?;
    ddim_step(z, &eps, t, t_prev, sched)
}

/// Final latent and provenance of a request.
pub fn generate_latent(model: &Model, req: &GenerationRequest) -> Result<(LatentTensor, Provenance)> {
    req.validate()?;
    if req.merge_cross_attention && crate::text::tokenize(&req.prompt).is_empty() {
        return Err(Error::input("cross-attention merging needs a non-empty prompt"));
    }
    let text = model.text_context(&req.prompt);
    let negative = model.text_context(&req.negative_prompt);
    let identity = request_identity(model, req)?;
    let cross_style = req.cross_style.unwrap_or(req.style);
    let timesteps = ddim_timesteps(&model.schedule, req.steps)?;
    let w = &model.weights;
    let kv = &w.adapters.image_kv;

    let uses_captures = req.variant != Variant::NoMixedAttention;
    let text_cond = ConditionBundle::text(text.clone());
    let id_cond = ConditionBundle {
        identity: identity.as_ref().map(|e| e.tokens().clone()),
        text: req.merge_cross_attention.then(|| text.clone()),
        style: cross_style,
    };
    // The negative prompt (possibly empty) stands in for both conditions.
    let uncond = ConditionBundle::text(negative);
    let guided = req.guidance_scale != 1.0;

    let mut z_id = initial_noise(model, req.seed);
    let mut z_text = z_id.clone();
    let mut consumed = 0;
    let mut records = req.record_guidance.then(Vec::new);
    for &(t, t_prev) in &timesteps {
        // Text stream: ordinary text-conditioned denoising, recording its
        // self-attention keys/values.
        let (eps_text, tape) = w
            .base
            .forward(&[], &z_text, t, &text_cond, &AttentionHooks::capture())?;
        let captures = tape.into_captures();
        z_text = sampler_step(model, &z_text, &eps_text, t, t_prev, req.clip_sample)?;

        let hooks = if uses_captures {
            consumed += 1;
            AttentionHooks::inject(req.variant.self_attention(), &captures, req.style)
        } else {
            AttentionHooks::neutral()
        };
        let eps_cond = w.base.predict(kv, &z_id, t, &id_cond, &hooks)?;
        let eps = if guided {
            let eps_uncond = w
                .base
                .predict(kv, &z_id, t, &uncond, &AttentionHooks::neutral())?;
            let eps = classifier_free_guidance(&eps_cond, &eps_uncond, req.guidance_scale)?;
            if let Some(r) = records.as_mut() {
                r.push(GuidanceRecord {
                    t,
                    t_prev,
                    eps_cond: eps_cond.data().iter().copied().collect(),
                    eps_uncond: eps_uncond.data().iter().copied().collect(),
                    eps_guided: eps.data().iter().copied().collect(),
                });
            }
            eps
        } else {
            eps_cond
        };
        z_id = sampler_step(model, &z_id, &eps, t, t_prev, req.clip_sample)?;
        if !z_id.is_finite() {
            return Err(Error::Generation(format!("latent diverged at timestep {t}")));
        }
    }

    let provenance = Provenance {
        seed: req.seed,
        config_digest: config_digest(model),
        frozen_digest: w.frozen_digest(),
        adapter_digest: w.trainable_digest(),
        prompt: req.prompt.clone(),
        negative_prompt: req.negative_prompt.clone(),
        variant: req.variant,
        training_mode: None,
        merge_cross_attention: req.merge_cross_attention,
        style: req.style,
        cross_style,
        steps: req.steps,
        guidance_scale: req.guidance_scale,
        clip_sample: req.clip_sample,
        guidance_scope: "identity_stream".into(),
        identity_sources: identity
            .as_ref()
            .map(|e| e.source_ids().to_vec())
            .unwrap_or_default(),
        identity_tokens: identity.as_ref().map_or(0, |e| e.n_tokens()),
        mix_weights: req.mix_weights.clone(),
        timesteps,
        capture_sets_consumed: consumed,
        guidance: records,
    };
    Ok((z_id, provenance))
}

/// Runs [`generate_latent`] and decodes the result.
pub fn generate(model: &Model, req: &GenerationRequest) -> Result<(Image, Provenance)> {
    let (z, prov) = generate_latent(model, req)?;
    Ok((model.decode_latent(&z)?.quantized(), prov))
}
