//! Base pretraining and adapter training.
//!
//! Adapter training optimizes only the mappers and the image key/value
//! projections. In identity-enhanced mode the text cross-attention branch
//! does not run, so its parameters receive exactly zero gradient; the
//! entangled ablation runs it on the caption while still updating only the
//! adapters.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    q_sample, Adapters, AttentionHooks, ConditionBundle, LatentTensor, NoiseSchedule, UNet,
    UNetGrads,
};
use crate::error::{Error, Result};
use crate::identity::IdentityFeatures;
use crate::model::Model;
use crate::nn::Params;
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::rng;
use crate::synth::SyntheticDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Identity condition only; text cross-attention deactivated.
    #[default]
    IdentityEnhanced,
    /// Caption and identity together (ablation).
    Entangled,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity_enhanced" => Ok(Self::IdentityEnhanced),
            "entangled" => Ok(Self::Entangled),
            _ => Err(Error::input(format!("unknown training mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Full-scale adapter training uses 1e-4; the toy model converges in a
    /// few hundred steps only with a larger step.
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            batch_size: 4,
            steps: 500,
            seed: 0,
            mode: TrainMode::IdentityEnhanced,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config(
                "train: learning_rate and steps/batch_size must be positive, weight_decay non-negative"
                    .into(),
            ));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Probability of training a sample without its caption, which teaches
    /// the unconditional prediction used by guidance.
    pub caption_dropout: f64,
    pub n_identities: usize,
    pub variants_per_identity: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 4,
            learning_rate: 2e-3,
            weight_decay: 0.0,
            caption_dropout: 0.1,
            n_identities: 24,
            variants_per_identity: 4,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("pretrain: invalid optimizer settings".into()));
        }
        if !(0.0..=1.0).contains(&self.caption_dropout) {
            return Err(Error::Config("pretrain: caption_dropout outside [0, 1]".into()));
        }
        if self.n_identities < 2 || self.variants_per_identity < 2 {
            return Err(Error::Config("pretrain: corpus needs >= 2 identities and variants".into()));
        }
        Ok(())
    }
}

/// What a training sample is conditioned on. The identity-enhanced variant
/// carries no caption at all.
#[derive(Debug, Clone, PartialEq)]
pub enum Conditioning {
    Identity(IdentityFeatures),
    Entangled {
        identity: IdentityFeatures,
        text: Array2<f64>,
    },
}

impl Conditioning {
    fn identity(&self) -> &IdentityFeatures {
        match self {
            Self::Identity(f) | Self::Entangled { identity: f, .. } => f,
        }
    }

    fn text(&self) -> Option<&Array2<f64>> {
        match self {
            Self::Identity(_) => None,
            Self::Entangled { text, .. } => Some(text),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub z0: LatentTensor,
    pub t: usize,
    pub eps: LatentTensor,
    pub condition: Conditioning,
}

/// Per-sample mean squared error over latent elements.
fn sample_mse(pred: &Array3<f64>, target: &Array3<f64>) -> f64 {
    let n = pred.len() as f64;
    pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n
}

/// Gradients of one adapter-training batch.
#[derive(Debug, Clone)]
pub struct AdapterGrads {
    pub loss: f64,
    pub adapters: Adapters,
    /// Largest |gradient| over every text key/value projection.
    pub text_cross_max_abs: f64,
}

fn text_cross_max_abs(base_grads: &UNet) -> f64 {
    let mut m = 0.0f64;
    base_grads.visit("", &mut |name, a| {
        if name.ends_with(".text_k") || name.ends_with(".text_v") {
            m = a.iter().fold(m, |acc, v| acc.max(v.abs()));
        }
    });
    m
}

fn condition_bundle(model: &Model, c: &Conditioning) -> Result<ConditionBundle> {
    Ok(ConditionBundle {
        identity: Some(model.weights.adapters.mappers.map(c.identity())?),
        text: c.text().cloned(),
        ..ConditionBundle::default()
    })
}

/// Mean over the batch of the per-sample noise-prediction MSE.
pub fn training_loss(model: &Model, batch: &[BatchItem]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let w = &model.weights;
    let mut total = 0.0;
    for item in batch {
        let z_t = q_sample(&item.z0, item.t, &item.eps, &model.schedule)?;
        let cond = condition_bundle(model, &item.condition)?;
        let pred = w
            .base
            .predict(&w.adapters.image_kv, &z_t, item.t, &cond, &AttentionHooks::neutral())?;
        total += sample_mse(pred.data(), item.eps.data());
    }
    Ok(total / batch.len() as f64)
}

/// Loss and adapter gradients of one batch; samples are reduced in order.
pub fn adapter_gradients(model: &Model, batch: &[BatchItem]) -> Result<AdapterGrads> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let w = &model.weights;
    let mut adapters = w.adapters.clone();
    adapters.fill_zero();
    let mut text_max = 0.0f64;
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for item in batch {
        let z_t = q_sample(&item.z0, item.t, &item.eps, &model.schedule)?;
        let cond = condition_bundle(model, &item.condition)?;
        let (pred, tape) = w.base.forward(
            &w.adapters.image_kv,
            &z_t,
            item.t,
            &cond,
            &AttentionHooks::neutral(),
        )?;
        total += sample_mse(pred.data(), item.eps.data());
        let n = pred.data().len() as f64;
        let d_eps = (pred.data() - item.eps.data()) * (2.0 * scale / n);
        let mut grads = UNetGrads::zeros(&w.base, &w.adapters.image_kv);
        w.base
            .backward(&w.adapters.image_kv, &cond, &tape, &d_eps, &mut grads)?;
        text_max = text_max.max(text_cross_max_abs(&grads.base));
        for (acc, g) in adapters.image_kv.iter_mut().zip(&grads.image_kv) {
            acc.w_k += &g.w_k;
            acc.w_v += &g.w_v;
        }
        if let Some(d_ctx) = &grads.identity_context {
            w.adapters
                .mappers
                .backward(item.condition.identity(), d_ctx.view(), &mut adapters.mappers);
        }
    }
    Ok(AdapterGrads {
        loss: total * scale,
        adapters,
        text_cross_max_abs: text_max,
    })
}

/// First parameter group whose gradient is non-finite, else `"loss"`.
fn offending_group(grads: &dyn Params) -> String {
    let mut found = None;
    grads.visit("", &mut |name, a| {
        if found.is_none() && a.iter().any(|v| !v.is_finite()) {
            found = Some(name.rsplit_once('.').map_or(name, |(g, _)| g).to_string());
        }
    });
    found.unwrap_or_else(|| "loss".to_string())
}

/// Latents and identity features computed once per dataset image.
pub struct PreparedDataset {
    latents: Vec<Vec<LatentTensor>>,
    features: Vec<Vec<IdentityFeatures>>,
    captions: Vec<Vec<String>>,
    pairs: Vec<(usize, usize, usize)>,
}

impl PreparedDataset {
    pub fn new(model: &Model, dataset: &SyntheticDataset) -> Result<Self> {
        let mut latents = Vec::new();
        let mut features = Vec::new();
        let mut captions = Vec::new();
        for rec in &dataset.identities {
            latents.push(rec.images.iter().map(|im| model.encode_image(im)).collect::<Result<_>>()?);
            features.push(
                rec.images
                    .iter()
                    .map(|im| model.identity_features(im))
                    .collect::<Result<_>>()?,
            );
            captions.push((0..rec.images.len()).map(|v| rec.caption(v)).collect());
        }
        let pairs = dataset
            .pairs()
            .iter()
            .map(|p| (p.identity_id, p.id_variant, p.target_variant))
            .collect::<Vec<_>>();
        if pairs.is_empty() {
            return Err(Error::input("dataset has no training pairs"));
        }
        Ok(Self {
            latents,
            features,
            captions,
            pairs,
        })
    }

    fn batch(
        &self,
        model: &Model,
        r: &mut impl Rng,
        size: usize,
        mode: TrainMode,
    ) -> Vec<BatchItem> {
        (0..size)
            .map(|_| {
                let &(i, a, b) = self.pairs.choose(r).expect("non-empty");
                let t = r.random_range(1..=model.schedule.steps());
                let z0 = self.latents[i][b].clone();
                let (h, w, c) = z0.dim();
                let eps = LatentTensor::from_raw(rng::normal(r, (h, w, c), 1.0));
                let identity = self.features[i][a].clone();
                let condition = match mode {
                    TrainMode::IdentityEnhanced => Conditioning::Identity(identity),
                    TrainMode::Entangled => Conditioning::Entangled {
                        identity,
                        text: model.text.encode(&self.captions[i][b]),
                    },
                };
                BatchItem {
                    z0,
                    t,
                    eps,
                    condition,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub loss_trace: Vec<f64>,
    /// Largest |gradient| any text key/value projection received over the
    /// whole run.
    pub text_cross_grad_max_abs: f64,
    pub optimizer: AdamWState,
}

/// Trains the adapters of `model` in place. Deterministic given
/// `config.seed`; `state` resumes a previous optimizer state.
pub fn train(
    model: &mut Model,
    dataset: &SyntheticDataset,
    config: &TrainConfig,
    state: Option<AdamWState>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let prepared = PreparedDataset::new(model, dataset)?;
    let n_params = model.weights.adapters.param_count();
    let mut state = state.unwrap_or_else(|| AdamWState::new(n_params));
    if state.m.len() != n_params {
        return Err(Error::State("optimizer state does not match the adapters".into()));
    }
    let opt = config.optimizer();
    let mut r = rng::stream(config.seed, "adapter-training");
    let mut trace = Vec::with_capacity(config.steps);
    let mut text_max = 0.0f64;
    for step in 0..config.steps {
        let batch = prepared.batch(model, &mut r, config.batch_size, config.mode);
        let g = adapter_gradients(model, &batch)?;
        if !g.loss.is_finite() || g.adapters.param_count() != n_params {
            return Err(Error::NonFinite {
                step,
                group: offending_group(&g.adapters),
            });
        }
        let bad = offending_group(&g.adapters);
        if bad != "loss" {
            return Err(Error::NonFinite { step, group: bad });
        }
        text_max = text_max.max(g.text_cross_max_abs);
        adamw_step(&mut model.weights.adapters, &g.adapters, &mut state, &opt);
        trace.push(g.loss);
    }
    Ok(TrainOutcome {
        loss_trace: trace,
        text_cross_grad_max_abs: text_max,
        optimizer: state,
    })
}

/// Text-conditioned denoising pretraining of every base parameter on a
/// captioned corpus.
pub fn pretrain_base(
    model: &mut Model,
    corpus: &SyntheticDataset,
    config: &PretrainConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    let empty = model.text.encode("");
    let mut samples = Vec::new();
    for rec in &corpus.identities {
        for (v, img) in rec.images.iter().enumerate() {
            samples.push((model.encode_image(img)?, model.text.encode(&rec.caption(v))));
        }
    }
    let opt = AdamWConfig {
        learning_rate: config.learning_rate,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    };
    let mut state = AdamWState::new(model.weights.base.param_count());
    let mut r = rng::stream(model.config.seed, "base-pretraining");
    let sched: &NoiseSchedule = &model.schedule;
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let base = &model.weights.base;
        let mut grads = UNetGrads::zeros(base, &[]);
        let mut total = 0.0;
        let scale = 1.0 / config.batch_size as f64;
        for _ in 0..config.batch_size {
            let (z0, caption) = samples.choose(&mut r).expect("non-empty corpus");
            let t = r.random_range(1..=sched.steps());
            let (h, w, c) = z0.dim();
            let eps = LatentTensor::from_raw(rng::normal(&mut r, (h, w, c), 1.0));
            let drop = r.random::<f64>() < config.caption_dropout;
            let cond = ConditionBundle::text(if drop { empty.clone() } else { caption.clone() });
            let z_t = q_sample(z0, t, &eps, sched)?;
            let (pred, tape) = base.forward(&[], &z_t, t, &cond, &AttentionHooks::neutral())?;
            total += sample_mse(pred.data(), eps.data());
            let n = pred.data().len() as f64;
            let d_eps = (pred.data() - eps.data()) * (2.0 * scale / n);
            base.backward(&[], &cond, &tape, &d_eps, &mut grads)?;
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                group: offending_group(&grads.base),
            });
        }
        // Half-cosine decay to zero settles the weights without an EMA copy.
        let progress = step as f64 / config.steps as f64;
        let step_opt = AdamWConfig {
            learning_rate: opt.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
            ..opt.clone()
        };
        adamw_step(&mut model.weights.base, &grads.base, &mut state, &step_opt);
        trace.push(loss);
    }
    Ok(trace)
}

/// Mean of the first and of the last `window` entries.
pub fn smoothed_endpoints(trace: &[f64], window: usize) -> Option<(f64, f64)> {
    if window == 0 || trace.len() < window {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&trace[..window]), mean(&trace[trace.len() - window..])))
}

/// Writes `step,loss` rows, one per training step.
pub fn write_loss_csv(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss"])?;
    for (i, l) in trace.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:e}")])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::input(e.to_string()))?;
    crate::io::write_atomic(path, &bytes)
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            rec.get(1)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::input("malformed loss row"))
        })
        .collect()
}
