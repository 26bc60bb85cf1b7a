//! Toy conditional U-Net. Each attention-enabled level runs a resblock, a
//! self-attention unit and a cross-attention unit.
//!
//! The cross-attention unit holds frozen text key/value projections and,
//! separately, trainable image key/value projections ([`ImageKv`]) that
//! share its query and output projections. Either branch is skipped when its
//! context is absent, so with no context at all the unit contributes zero.

use ndarray::{concatenate, s, Array2, Array3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    silu, silu_bwd, timestep_features, upsample2, upsample2_bwd, Conv2d, ConvCache, Norm,
    NormCache, ResBlock, ResCache,
};
use super::LatentTensor;
use crate::attention::kernels::{
    self, mixed_kv_bwd, mixed_kv_fwd, multihead_bwd, multihead_fwd, MixedKvCache, MultiHeadCache,
    StyleCache,
};
use crate::attention::StyleAlignMode;
use crate::error::{Error, Result};
use crate::nn::{join, Linear, Params};
use crate::rng;

impl Params for Array2<f64> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(prefix, self.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(prefix, self.view_mut().into_dyn());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    /// Latent side length (square latents).
    pub latent_size: usize,
    pub latent_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Spatial side lengths at which attention units are placed.
    pub attention_resolutions: Vec<usize>,
    /// Width of the cross-attention context (text and identity tokens).
    pub d_model: usize,
    pub head_count: usize,
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_size: 16,
            latent_channels: 4,
            base_channels: 32,
            channel_multipliers: vec![1, 2],
            attention_resolutions: vec![16, 8],
            d_model: 64,
            head_count: 2,
            norm_groups: 8,
        }
    }
}

impl UNetConfig {
    pub fn temb_dim(&self) -> usize {
        self.base_channels * 4
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.channel_multipliers
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        self.latent_size >> level
    }

    pub fn level_has_attention(&self, level: usize) -> bool {
        self.attention_resolutions
            .contains(&self.level_resolution(level))
    }

    /// Spatial token count of every attention layer, in layer order (down
    /// path, then up path from deepest to shallowest).
    pub fn attention_layer_tokens(&self) -> Vec<usize> {
        let levels = self.channel_multipliers.len();
        let down = (0..levels).filter(|&l| self.level_has_attention(l));
        let up = (0..levels).rev().filter(|&l| self.level_has_attention(l));
        down.chain(up)
            .map(|l| self.level_resolution(l).pow(2))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_multipliers.len();
        if levels == 0 || self.channel_multipliers.contains(&0) {
            return Err(Error::Config("channel_multipliers must be non-empty and positive".into()));
        }
        if !self.latent_size.is_power_of_two() || self.latent_size < 8 {
            return Err(Error::Config("latent_size must be a power of two >= 8".into()));
        }
        if self.latent_size >> (levels - 1) < 2 {
            return Err(Error::Config("too many levels for the latent size".into()));
        }
        if self.base_channels == 0 || self.d_model == 0 || self.latent_channels == 0 {
            return Err(Error::Config("widths must be positive".into()));
        }
        if self.head_count == 0 {
            return Err(Error::Config("head_count must be positive".into()));
        }
        for c in self.level_channels() {
            if c % self.head_count != 0 {
                return Err(Error::Config(format!("{c} channels not divisible by {} heads", self.head_count)));
            }
            if c % self.norm_groups != 0 {
                return Err(Error::Config(format!(
                    "{c} channels not divisible by {} norm groups",
                    self.norm_groups
                )));
            }
        }
        let resolutions: Vec<usize> = (0..levels).map(|l| self.level_resolution(l)).collect();
        if let Some(r) = self
            .attention_resolutions
            .iter()
            .find(|r| !resolutions.contains(r))
        {
            return Err(Error::Config(format!("no level has resolution {r}")));
        }
        if self.attention_resolutions.is_empty() {
            return Err(Error::Config(
                "at least one level needs self- and cross-attention".into(),
            ));
        }
        Ok(())
    }
}

/// Self-attention + cross-attention unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnBlock {
    pub norm_self: Norm,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub self_out: Linear,
    pub norm_cross: Norm,
    pub cross_q: Array2<f64>,
    pub text_k: Array2<f64>,
    pub text_v: Array2<f64>,
    pub cross_out: Linear,
}

impl AttnBlock {
    fn init(rng: &mut impl Rng, c: usize, d_model: usize) -> Self {
        let proj = |rng: &mut _, d_in: usize| rng::normal(rng, (d_in, c), 1.0 / (d_in as f64).sqrt());
        Self {
            norm_self: Norm::layer(c),
            w_q: proj(rng, c),
            w_k: proj(rng, c),
            w_v: proj(rng, c),
            self_out: Linear::init_normal(rng, c, c, 0.5),
            norm_cross: Norm::layer(c),
            cross_q: proj(rng, c),
            text_k: proj(rng, d_model),
            text_v: proj(rng, d_model),
            cross_out: Linear::init_normal(rng, c, c, 0.5),
        }
    }
}

impl Params for AttnBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.norm_self.visit(&join(prefix, "norm_self"), f);
        self.w_q.visit(&join(prefix, "w_q"), f);
        self.w_k.visit(&join(prefix, "w_k"), f);
        self.w_v.visit(&join(prefix, "w_v"), f);
        self.self_out.visit(&join(prefix, "self_out"), f);
        self.norm_cross.visit(&join(prefix, "norm_cross"), f);
        self.cross_q.visit(&join(prefix, "cross_q"), f);
        self.text_k.visit(&join(prefix, "text_k"), f);
        self.text_v.visit(&join(prefix, "text_v"), f);
        self.cross_out.visit(&join(prefix, "cross_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.norm_self.visit_mut(&join(prefix, "norm_self"), f);
        self.w_q.visit_mut(&join(prefix, "w_q"), f);
        self.w_k.visit_mut(&join(prefix, "w_k"), f);
        self.w_v.visit_mut(&join(prefix, "w_v"), f);
        self.self_out.visit_mut(&join(prefix, "self_out"), f);
        self.norm_cross.visit_mut(&join(prefix, "norm_cross"), f);
        self.cross_q.visit_mut(&join(prefix, "cross_q"), f);
        self.text_k.visit_mut(&join(prefix, "text_k"), f);
        self.text_v.visit_mut(&join(prefix, "text_v"), f);
        self.cross_out.visit_mut(&join(prefix, "cross_out"), f);
    }
}

/// Trainable image key/value projections of one cross-attention unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageKv {
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

impl Params for ImageKv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.w_k.visit(&join(prefix, "w_k"), f);
        self.w_v.visit(&join(prefix, "w_v"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.w_k.visit_mut(&join(prefix, "w_k"), f);
        self.w_v.visit_mut(&join(prefix, "w_v"), f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownLevel {
    pub res: ResBlock,
    pub attn: Option<AttnBlock>,
    pub downsample: Option<Conv2d>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpLevel {
    pub res: ResBlock,
    pub attn: Option<AttnBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNet {
    pub config: UNetConfig,
    pub conv_in: Conv2d,
    pub time_fc1: Linear,
    pub time_fc2: Linear,
    pub down: Vec<DownLevel>,
    pub mid: ResBlock,
    /// Ordered deepest level first.
    pub up: Vec<UpLevel>,
    pub norm_out: Norm,
    pub conv_out: Conv2d,
}

impl Params for DownLevel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.res.visit(&join(prefix, "res"), f);
        if let Some(a) = &self.attn {
            a.visit(&join(prefix, "attn"), f);
        }
        if let Some(d) = &self.downsample {
            d.visit(&join(prefix, "downsample"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.res.visit_mut(&join(prefix, "res"), f);
        if let Some(a) = &mut self.attn {
            a.visit_mut(&join(prefix, "attn"), f);
        }
        if let Some(d) = &mut self.downsample {
            d.visit_mut(&join(prefix, "downsample"), f);
        }
    }
}

impl Params for UpLevel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.res.visit(&join(prefix, "res"), f);
        if let Some(a) = &self.attn {
            a.visit(&join(prefix, "attn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.res.visit_mut(&join(prefix, "res"), f);
        if let Some(a) = &mut self.attn {
            a.visit_mut(&join(prefix, "attn"), f);
        }
    }
}

impl Params for UNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.conv_in.visit(&join(prefix, "conv_in"), f);
        self.time_fc1.visit(&join(prefix, "time_fc1"), f);
        self.time_fc2.visit(&join(prefix, "time_fc2"), f);
        self.down.visit(&join(prefix, "down"), f);
        self.mid.visit(&join(prefix, "mid"), f);
        self.up.visit(&join(prefix, "up"), f);
        self.norm_out.visit(&join(prefix, "norm_out"), f);
        self.conv_out.visit(&join(prefix, "conv_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.conv_in.visit_mut(&join(prefix, "conv_in"), f);
        self.time_fc1.visit_mut(&join(prefix, "time_fc1"), f);
        self.time_fc2.visit_mut(&join(prefix, "time_fc2"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
        self.mid.visit_mut(&join(prefix, "mid"), f);
        self.up.visit_mut(&join(prefix, "up"), f);
        self.norm_out.visit_mut(&join(prefix, "norm_out"), f);
        self.conv_out.visit_mut(&join(prefix, "conv_out"), f);
    }
}

/// Variant run by a self-attention unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfAttentionVariant {
    /// Ordinary self-attention over the stream's own features.
    #[default]
    Plain,
    /// Own keys/values concatenated with injected ones.
    Mixed,
    /// Own keys/values replaced by injected ones.
    Mutual,
}

/// Self-attention keys and values of one layer, `[tokens × channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    pub k: Array2<f64>,
    pub v: Array2<f64>,
}

/// Per-call control of the self-attention units.
#[derive(Debug, Clone, Default)]
pub struct AttentionHooks<'a> {
    /// Variant for every layer, unless `per_layer` overrides it.
    pub variant: SelfAttentionVariant,
    pub per_layer: Option<Vec<SelfAttentionVariant>>,
    /// Keys/values injected into `Mixed`/`Mutual` layers, indexed by layer.
    pub inject: Option<&'a [LayerKv]>,
    /// Style alignment applied inside mixed attention.
    pub style: StyleAlignMode,
    /// Record every layer's own keys/values.
    pub record: bool,
}

impl<'a> AttentionHooks<'a> {
    pub fn neutral() -> Self {
        Self::default()
    }

    pub fn capture() -> Self {
        Self {
            record: true,
            ..Self::default()
        }
    }

    pub fn inject(
        variant: SelfAttentionVariant,
        captures: &'a [LayerKv],
        style: StyleAlignMode,
    ) -> Self {
        Self {
            variant,
            inject: Some(captures),
            style,
            ..Self::default()
        }
    }

    fn variant_at(&self, layer: usize) -> SelfAttentionVariant {
        self.per_layer
            .as_ref()
            .and_then(|v| v.get(layer).copied())
            .unwrap_or(self.variant)
    }
}

/// Cross-attention context. A branch runs only when its context is present
/// and non-empty; when both run their outputs are summed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConditionBundle {
    pub identity: Option<Array2<f64>>,
    pub text: Option<Array2<f64>>,
    /// Alignment of the identity keys/values toward the text ones when both
    /// branches run.
    pub style: StyleAlignMode,
}

impl ConditionBundle {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn identity(c_id: Array2<f64>) -> Self {
        Self {
            identity: Some(c_id),
            ..Self::default()
        }
    }

    pub fn text(c_t: Array2<f64>) -> Self {
        Self {
            text: Some(c_t),
            ..Self::default()
        }
    }

    fn active_identity(&self) -> Option<&Array2<f64>> {
        self.identity.as_ref().filter(|c| c.nrows() > 0)
    }

    fn active_text(&self) -> Option<&Array2<f64>> {
        self.text.as_ref().filter(|c| c.nrows() > 0)
    }
}

enum SelfCache {
    Plain(MultiHeadCache),
    Mixed(Box<MixedKvCache>),
    Mutual(MultiHeadCache),
}

struct CrossCache {
    n2: NormCache,
    h2: Array2<f64>,
    id_branch: Option<MultiHeadCache>,
    text_branch: Option<MultiHeadCache>,
    k_style: Option<StyleCache>,
    v_style: Option<StyleCache>,
    merged: Array2<f64>,
}

struct AttnCache {
    n1: NormCache,
    h1: Array2<f64>,
    self_cache: SelfCache,
    attended: Array2<f64>,
    cross: Option<CrossCache>,
}

/// Keys/values seen at one mixed-attention site, after style alignment.
#[derive(Debug, Clone)]
pub struct MixedSite<'a> {
    pub k_id: &'a Array2<f64>,
    pub v_id: &'a Array2<f64>,
    pub k_t: &'a Array2<f64>,
    pub v_t: &'a Array2<f64>,
}

struct LevelCache {
    res: ResCache,
    attn: Option<AttnCache>,
    down: Option<ConvCache>,
    dims: (usize, usize),
}

/// Everything the backward pass needs from one forward pass, plus any
/// recorded keys/values.
pub struct UNetTape {
    t_feat: Array2<f64>,
    t_hidden: Array2<f64>,
    temb: Array2<f64>,
    conv_in: ConvCache,
    down: Vec<LevelCache>,
    mid: ResCache,
    up: Vec<(LevelCache, usize)>,
    n_out: NormCache,
    a_out: Array2<f64>,
    conv_out: ConvCache,
    captures: Vec<LayerKv>,
    injected: Vec<Option<LayerKv>>,
    latent_dim: (usize, usize, usize),
}

impl UNetTape {
    /// Keys/values recorded at each attention layer (empty unless recording
    /// was requested).
    pub fn captures(&self) -> &[LayerKv] {
        &self.captures
    }

    pub fn into_captures(self) -> Vec<LayerKv> {
        self.captures
    }

    /// Identity and text keys/values of every layer that ran mixed attention.
    pub fn mixed_sites(&self) -> Vec<MixedSite<'_>> {
        let attn = self
            .down
            .iter()
            .chain(self.up.iter().map(|(l, _)| l))
            .filter_map(|l| l.attn.as_ref());
        attn.zip(&self.injected)
            .filter_map(|(a, inj)| match (&a.self_cache, inj) {
                (SelfCache::Mixed(c), Some(kv)) => Some(MixedSite {
                    k_id: &c.k_id,
                    v_id: &c.v_id,
                    k_t: &kv.k,
                    v_t: &kv.v,
                }),
                _ => None,
            })
            .collect()
    }
}

/// Gradients of backward passes. `base` and `image_kv` mirror the
/// parameter containers and accumulate across calls; the context gradients
/// belong to the latest call only, since contexts differ between samples.
#[derive(Debug, Clone)]
pub struct UNetGrads {
    pub base: UNet,
    pub image_kv: Vec<ImageKv>,
    pub identity_context: Option<Array2<f64>>,
    pub text_context: Option<Array2<f64>>,
}

impl UNetGrads {
    pub fn zeros(unet: &UNet, image_kv: &[ImageKv]) -> Self {
        let mut base = unet.clone();
        base.fill_zero();
        let mut image_kv = image_kv.to_vec();
        image_kv.fill_zero();
        Self {
            base,
            image_kv,
            identity_context: None,
            text_context: None,
        }
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl UNet {
    pub fn init(config: &UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "unet");
        let temb = config.temb_dim();
        let chans = config.level_channels();
        let g = config.norm_groups;
        let conv_in = Conv2d::init(&mut r, config.latent_channels, chans[0], 1, 1.0);
        let time_fc1 = Linear::init_normal(&mut r, temb, temb, 1.0);
        let time_fc2 = Linear::init_normal(&mut r, temb, temb, 1.0);
        let levels = chans.len();
        let mut down = Vec::with_capacity(levels);
        let mut c_prev = chans[0];
        for (l, &c) in chans.iter().enumerate() {
            down.push(DownLevel {
                res: ResBlock::init(&mut r, c_prev, c, temb, g),
                attn: config
                    .level_has_attention(l)
                    .then(|| AttnBlock::init(&mut r, c, config.d_model)),
                downsample: (l + 1 < levels).then(|| Conv2d::init(&mut r, c, c, 2, 1.0)),
            });
            c_prev = c;
        }
        let mid = ResBlock::init(&mut r, c_prev, c_prev, temb, g);
        let mut up = Vec::with_capacity(levels);
        for l in (0..levels).rev() {
            let c = chans[l];
            up.push(UpLevel {
                res: ResBlock::init(&mut r, c_prev + c, c, temb, g),
                attn: config
                    .level_has_attention(l)
                    .then(|| AttnBlock::init(&mut r, c, config.d_model)),
            });
            c_prev = c;
        }
        Ok(Self {
            config: config.clone(),
            conv_in,
            time_fc1,
            time_fc2,
            down,
            mid,
            up,
            norm_out: Norm::group(chans[0], g),
            conv_out: Conv2d::init(&mut r, chans[0], config.latent_channels, 1, 1.0),
        })
    }

    pub fn attention_layer_count(&self) -> usize {
        self.attention_blocks().count()
    }

    fn attention_blocks(&self) -> impl Iterator<Item = &AttnBlock> {
        self.down
            .iter()
            .filter_map(|l| l.attn.as_ref())
            .chain(self.up.iter().filter_map(|l| l.attn.as_ref()))
    }

    /// Image key/value projections initialized as copies of the text ones.
    pub fn init_image_kv(&self) -> Vec<ImageKv> {
        self.attention_blocks()
            .map(|a| ImageKv {
                w_k: a.text_k.clone(),
                w_v: a.text_v.clone(),
            })
            .collect()
    }

    fn check_inputs(
        &self,
        image_kv: &[ImageKv],
        z: &LatentTensor,
        cond: &ConditionBundle,
        hooks: &AttentionHooks,
    ) -> Result<()> {
        let cfg = &self.config;
        let (h, w, c) = z.data().dim();
        if (h, w, c) != (cfg.latent_size, cfg.latent_size, cfg.latent_channels) {
            return Err(Error::shape(format!(
                "latent {:?} does not match the configured {}x{}x{}",
                (h, w, c),
                cfg.latent_size,
                cfg.latent_size,
                cfg.latent_channels
            )));
        }
        for (name, ctx) in [("identity", &cond.identity), ("text", &cond.text)] {
            if let Some(ctx) = ctx {
                if ctx.ncols() != cfg.d_model {
                    return Err(Error::shape(format!(
                        "{name} context width {} != d_model {}",
                        ctx.ncols(),
                        cfg.d_model
                    )));
                }
            }
        }
        let layers = self.attention_layer_count();
        if cond.active_identity().is_some() && image_kv.len() != layers {
            return Err(Error::shape(format!(
                "{} image cross-attention projections for {layers} attention layers",
                image_kv.len()
            )));
        }
        let needs_inject = (0..layers).any(|l| hooks.variant_at(l) != SelfAttentionVariant::Plain);
        if needs_inject {
            match hooks.inject {
                None => {
                    return Err(Error::State(
                        "mixed/mutual attention requested without captured keys/values".into(),
                    ))
                }
                Some(kv) if kv.len() != layers => {
                    return Err(Error::State(format!(
                        "{} captured layers for {layers} attention layers",
                        kv.len()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Noise prediction `ε_θ(z_t, t, context)`.
    pub fn forward(
        &self,
        image_kv: &[ImageKv],
        z: &LatentTensor,
        t: usize,
        cond: &ConditionBundle,
        hooks: &AttentionHooks,
    ) -> Result<(LatentTensor, UNetTape)> {
        self.check_inputs(image_kv, z, cond, hooks)?;
        let cfg = &self.config;
        let (hh, ww, lc) = z.data().dim();
        let x = z
            .data()
            .to_owned()
            .into_shape_with_order((hh * ww, lc))
            .map_err(|e| Error::shape(e.to_string()))?;

        let t_feat = timestep_features(t, cfg.temb_dim()).insert_axis(Axis(0));
        let t_hidden = self.time_fc1.forward(t_feat.view());
        let temb = self.time_fc2.forward(silu(&t_hidden).view());
        let temb_act = silu(&temb);

        let (mut h, _, conv_in) = self.conv_in.forward(&x, hh, ww);
        let mut dims = (hh, ww);
        let mut layer = 0usize;
        let mut captures = Vec::new();
        let mut injected = Vec::new();
        let mut down = Vec::with_capacity(self.down.len());
        let mut skips = Vec::with_capacity(self.down.len());

        for level in &self.down {
            let (y, res) = level.res.forward(&h, dims.0, dims.1, &temb_act);
            h = y;
            let attn = match &level.attn {
                Some(block) => {
                    let (y, c) = self.attn_forward(
                        block, &h, layer, image_kv, cond, hooks, &mut captures, &mut injected,
                    )?;
                    h = y;
                    layer += 1;
                    Some(c)
                }
                None => None,
            };
            skips.push(h.clone());
            let level_dims = dims;
            let down_cache = match &level.downsample {
                Some(conv) => {
                    let (y, d, c) = conv.forward(&h, dims.0, dims.1);
                    h = y;
                    dims = d;
                    Some(c)
                }
                None => None,
            };
            down.push(LevelCache {
                res,
                attn,
                down: down_cache,
                dims: level_dims,
            });
        }

        let (y, mid) = self.mid.forward(&h, dims.0, dims.1, &temb_act);
        h = y;

        let mut up = Vec::with_capacity(self.up.len());
        let n_levels = self.up.len();
        for (i, level) in self.up.iter().enumerate() {
            let skip = &skips[n_levels - 1 - i];
            let split = h.ncols();
            let cat = concatenate![Axis(1), h, *skip];
            let (y, res) = level.res.forward(&cat, dims.0, dims.1, &temb_act);
            h = y;
            let attn = match &level.attn {
                Some(block) => {
                    let (y, c) = self.attn_forward(
                        block, &h, layer, image_kv, cond, hooks, &mut captures, &mut injected,
                    )?;
                    h = y;
                    layer += 1;
                    Some(c)
                }
                None => None,
            };
            let level_dims = dims;
            if i + 1 < n_levels {
                h = upsample2(&h, dims.0, dims.1);
                dims = (dims.0 * 2, dims.1 * 2);
            }
            up.push((
                LevelCache {
                    res,
                    attn,
                    down: None,
                    dims: level_dims,
                },
                split,
            ));
        }

        let (y, n_out) = self.norm_out.forward(&h);
        let a = silu(&y);
        let (eps, _, conv_out) = self.conv_out.forward(&a, hh, ww);
        let eps = eps
            .into_shape_with_order((hh, ww, lc))
            .map_err(|e| Error::shape(e.to_string()))?;
        Ok((
            LatentTensor::from_raw(eps),
            UNetTape {
                t_feat,
                t_hidden,
                temb,
                conv_in,
                down,
                mid,
                up,
                n_out,
                a_out: y,
                conv_out,
                captures,
                injected,
                latent_dim: (hh, ww, lc),
            },
        ))
    }

    /// Forward pass without keeping the tape.
    pub fn predict(
        &self,
        image_kv: &[ImageKv],
        z: &LatentTensor,
        t: usize,
        cond: &ConditionBundle,
        hooks: &AttentionHooks,
    ) -> Result<LatentTensor> {
        Ok(self.forward(image_kv, z, t, cond, hooks)?.0)
    }

    #[allow(clippy::too_many_arguments)]
    fn attn_forward(
        &self,
        block: &AttnBlock,
        x: &Array2<f64>,
        layer: usize,
        image_kv: &[ImageKv],
        cond: &ConditionBundle,
        hooks: &AttentionHooks,
        captures: &mut Vec<LayerKv>,
        injected: &mut Vec<Option<LayerKv>>,
    ) -> Result<(Array2<f64>, AttnCache)> {
        let heads = self.config.head_count;
        let (h1, n1) = block.norm_self.forward(x);
        let q = h1.dot(&block.w_q);
        let k = h1.dot(&block.w_k);
        let v = h1.dot(&block.w_v);
        let variant = hooks.variant_at(layer);
        let inject = match variant {
            SelfAttentionVariant::Plain => None,
            _ => hooks.inject.map(|kv| &kv[layer]),
        };
        if let Some(kv) = inject {
            if kv.k.ncols() != k.ncols() || kv.v.ncols() != v.ncols() {
                return Err(Error::shape(format!(
                    "injected keys/values at layer {layer} have width {} but the layer has {}",
                    kv.k.ncols(),
                    k.ncols()
                )));
            }
        }
        let (attended, self_cache) = match (variant, inject) {
            (SelfAttentionVariant::Mixed, Some(kv)) => {
                let (o, c) = mixed_kv_fwd(
                    q.view(),
                    k.view(),
                    v.view(),
                    kv.k.view(),
                    kv.v.view(),
                    hooks.style,
                    heads,
                )?;
                (o, SelfCache::Mixed(Box::new(c)))
            }
            (SelfAttentionVariant::Mutual, Some(kv)) => {
                let (o, c) = multihead_fwd(q.view(), kv.k.view(), kv.v.view(), heads)?;
                (o, SelfCache::Mutual(c))
            }
            _ => {
                let (o, c) = multihead_fwd(q.view(), k.view(), v.view(), heads)?;
                (o, SelfCache::Plain(c))
            }
        };
        injected.push(inject.cloned());
        if hooks.record {
            captures.push(LayerKv { k, v });
        }
        let x1 = x + &block.self_out.forward(attended.view());

        let ctx_id = cond.active_identity();
        let ctx_t = cond.active_text();
        if ctx_id.is_none() && ctx_t.is_none() {
            return Ok((
                x1,
                AttnCache {
                    n1,
                    h1,
                    self_cache,
                    attended,
                    cross: None,
                },
            ));
        }
        let (h2, n2) = block.norm_cross.forward(&x1);
        let q2 = h2.dot(&block.cross_q);
        let text_kv = ctx_t.map(|c| (c.dot(&block.text_k), c.dot(&block.text_v)));
        let mut merged = Array2::zeros(q2.dim());
        let (mut id_branch, mut k_style, mut v_style) = (None, None, None);
        if let Some(c) = ctx_id {
            let ikv = &image_kv[layer];
            let mut k_id = c.dot(&ikv.w_k);
            let mut v_id = c.dot(&ikv.w_v);
            if let (Some((kt, vt)), true) = (&text_kv, cond.style != StyleAlignMode::Off) {
                let (k2, kc) = kernels::style_fwd(k_id.view(), kt.view(), cond.style)?;
                let (v2, vc) = kernels::style_fwd(v_id.view(), vt.view(), cond.style)?;
                k_id = k2;
                v_id = v2;
                k_style = kc;
                v_style = vc;
            }
            let (o, c) = multihead_fwd(q2.view(), k_id.view(), v_id.view(), heads)?;
            merged += &o;
            id_branch = Some(c);
        }
        let text_branch = match &text_kv {
            Some((kt, vt)) => {
                let (o, c) = multihead_fwd(q2.view(), kt.view(), vt.view(), heads)?;
                merged += &o;
                Some(c)
            }
            None => None,
        };
        let x2 = &x1 + &block.cross_out.forward(merged.view());
        Ok((
            x2,
            AttnCache {
                n1,
                h1,
                self_cache,
                attended,
                cross: Some(CrossCache {
                    n2,
                    h2,
                    id_branch,
                    text_branch,
                    k_style,
                    v_style,
                    merged,
                }),
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn attn_backward(
        &self,
        block: &AttnBlock,
        grad: &mut AttnBlock,
        layer: usize,
        cache: &AttnCache,
        dy: &Array2<f64>,
        image_kv: &[ImageKv],
        image_grad: &mut [ImageKv],
        cond: &ConditionBundle,
        d_ctx_id: &mut Option<Array2<f64>>,
        d_ctx_t: &mut Option<Array2<f64>>,
    ) -> Array2<f64> {
        let mut dx1 = dy.clone();
        if let Some(cc) = &cache.cross {
            let dmerged = block
                .cross_out
                .backward(cc.merged.view(), dy.view(), &mut grad.cross_out);
            let mut dq2 = Array2::<f64>::zeros((dy.nrows(), block.cross_q.ncols()));
            let mut dkt_from_style: Option<(Array2<f64>, Array2<f64>)> = None;
            if let (Some(c), Some(br)) = (cond.active_identity(), &cc.id_branch) {
                let (dq, dk, dv) = multihead_bwd(br, dmerged.view());
                dq2 += &dq;
                let (dk_id, dky) = kernels::style_bwd(cc.k_style.as_ref(), dk.view());
                let (dv_id, dvy) = kernels::style_bwd(cc.v_style.as_ref(), dv.view());
                if let (Some(a), Some(b)) = (dky, dvy) {
                    dkt_from_style = Some((a, b));
                }
                let ikv = &image_kv[layer];
                let ig = &mut image_grad[layer];
                ig.w_k += &c.t().dot(&dk_id);
                ig.w_v += &c.t().dot(&dv_id);
                accumulate(d_ctx_id, dk_id.dot(&ikv.w_k.t()) + dv_id.dot(&ikv.w_v.t()));
            }
            if let (Some(c), Some(br)) = (cond.active_text(), &cc.text_branch) {
                let (dq, mut dk, mut dv) = multihead_bwd(br, dmerged.view());
                dq2 += &dq;
                if let Some((a, b)) = dkt_from_style {
                    dk += &a;
                    dv += &b;
                }
                grad.text_k += &c.t().dot(&dk);
                grad.text_v += &c.t().dot(&dv);
                accumulate(d_ctx_t, dk.dot(&block.text_k.t()) + dv.dot(&block.text_v.t()));
            }
            grad.cross_q += &cc.h2.t().dot(&dq2);
            let dh2 = dq2.dot(&block.cross_q.t());
            dx1 += &block.norm_cross.backward(&cc.n2, &dh2, &mut grad.norm_cross);
        }
        let dattended = block
            .self_out
            .backward(cache.attended.view(), dx1.view(), &mut grad.self_out);
        let (dq, dk, dv) = match &cache.self_cache {
            SelfCache::Plain(c) => multihead_bwd(c, dattended.view()),
            SelfCache::Mixed(c) => {
                let g = mixed_kv_bwd(c, dattended.view());
                (g.q, g.k_id, g.v_id)
            }
            SelfCache::Mutual(c) => {
                let (dq, dk, dv) = multihead_bwd(c, dattended.view());
                // Injected keys/values are constants of this pass.
                let _ = (dk, dv);
                let n = dattended.nrows();
                let kc = block.w_k.ncols();
                let vc = block.w_v.ncols();
                (dq, Array2::zeros((n, kc)), Array2::zeros((n, vc)))
            }
        };
        grad.w_q += &cache.h1.t().dot(&dq);
        grad.w_k += &cache.h1.t().dot(&dk);
        grad.w_v += &cache.h1.t().dot(&dv);
        let dh1 = dq.dot(&block.w_q.t()) + dk.dot(&block.w_k.t()) + dv.dot(&block.w_v.t());
        dx1 + block.norm_self.backward(&cache.n1, &dh1, &mut grad.norm_self)
    }

    /// Backpropagates `d_eps` through a recorded forward pass, accumulating
    /// into `grads`. Injected keys/values are treated as constants.
    pub fn backward(
        &self,
        image_kv: &[ImageKv],
        cond: &ConditionBundle,
        tape: &UNetTape,
        d_eps: &Array3<f64>,
        grads: &mut UNetGrads,
    ) -> Result<()> {
        let (hh, ww, lc) = tape.latent_dim;
        if d_eps.dim() != tape.latent_dim {
            return Err(Error::shape(format!(
                "gradient {:?} does not match output {:?}",
                d_eps.dim(),
                tape.latent_dim
            )));
        }
        grads.identity_context = None;
        grads.text_context = None;
        let g = &mut grads.base;
        let dy = d_eps
            .to_owned()
            .into_shape_with_order((hh * ww, lc))
            .map_err(|e| Error::shape(e.to_string()))?;
        let da = self.conv_out.backward(&tape.conv_out, &dy, &mut g.conv_out);
        let dn = silu_bwd(&tape.a_out, &da);
        let mut dh = self.norm_out.backward(&tape.n_out, &dn, &mut g.norm_out);
        let mut dtemb_act = Array2::<f64>::zeros((1, self.config.temb_dim()));
        let mut layer = self.attention_layer_count();
        let n_levels = self.up.len();
        let mut dskips: Vec<Option<Array2<f64>>> = vec![None; n_levels];

        for (i, (level, (cache, split))) in self.up.iter().zip(&tape.up).enumerate().rev() {
            if i + 1 < n_levels {
                dh = upsample2_bwd(&dh, cache.dims.0, cache.dims.1);
            }
            if let (Some(block), Some(ac)) = (&level.attn, &cache.attn) {
                layer -= 1;
                dh = self.attn_backward(
                    block,
                    g.up[i].attn.as_mut().expect("grad mirrors params"),
                    layer,
                    ac,
                    &dh,
                    image_kv,
                    &mut grads.image_kv,
                    cond,
                    &mut grads.identity_context,
                    &mut grads.text_context,
                );
            }
            let (dcat, dt) = level.res.backward(&cache.res, &dh, &mut g.up[i].res);
            dtemb_act += &dt;
            dh = dcat.slice(s![.., ..*split]).to_owned();
            dskips[n_levels - 1 - i] = Some(dcat.slice(s![.., *split..]).to_owned());
        }

        let (dmid, dt) = self.mid.backward(&tape.mid, &dh, &mut g.mid);
        dtemb_act += &dt;
        dh = dmid;

        for (i, (level, cache)) in self.down.iter().zip(&tape.down).enumerate().rev() {
            if let (Some(conv), Some(dc)) = (&level.downsample, &cache.down) {
                dh = conv.backward(dc, &dh, g.down[i].downsample.as_mut().expect("mirror"));
            }
            if let Some(ds) = dskips[i].take() {
                dh += &ds;
            }
            if let (Some(block), Some(ac)) = (&level.attn, &cache.attn) {
                layer -= 1;
                dh = self.attn_backward(
                    block,
                    g.down[i].attn.as_mut().expect("grad mirrors params"),
                    layer,
                    ac,
                    &dh,
                    image_kv,
                    &mut grads.image_kv,
                    cond,
                    &mut grads.identity_context,
                    &mut grads.text_context,
                );
            }
            let (dx, dt) = level.res.backward(&cache.res, &dh, &mut g.down[i].res);
            dtemb_act += &dt;
            dh = dx;
        }
        self.conv_in.backward(&tape.conv_in, &dh, &mut g.conv_in);

        let dtemb = silu_bwd(&tape.temb, &dtemb_act);
        let dact = self
            .time_fc2
            .backward(silu(&tape.t_hidden).view(), dtemb.view(), &mut g.time_fc2);
        let dhid = silu_bwd(&tape.t_hidden, &dact);
        self.time_fc1
            .backward(tape.t_feat.view(), dhid.view(), &mut g.time_fc1);
        Ok(())
    }
}
