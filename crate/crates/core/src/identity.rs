//! Face-embedding extraction: alignment, image-encoder and face-recognition
//! backbones, the two trainable mappers, and identity mixing.
//!
//! The identity embedding of an image `x` is
//! `concat(clip_mapper(E_clip(align(x))), face_mapper(E_face(align(x))))`,
//! image-encoder tokens first and the single face token last.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{concatenate, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use serde::{Deserialize, Serialize};

use crate::attention::{FeatureMatrix, Stream};
use crate::error::{Error, Result};
use crate::image::{align_face, Image};
use crate::nn::{join, Linear, Params};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Emits `[token_count × embed_dim]` local embeddings.
    ClipLike,
    /// Emits a single `[1 × embed_dim]` global embedding.
    FaceLike,
}

/// An image encoder backbone. Implementations must be deterministic: the same
/// image always yields bit-identical output.
///
/// The stub encoders implement this; a pretrained encoder can be plugged in
/// behind the same trait.
pub trait EncoderBackend: Send + Sync + std::fmt::Debug {
    fn kind(&self) -> EncoderKind;
    fn token_count(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn encode(&self, img: &Image) -> Result<Array2<f64>>;
}

/// Seeded random linear encoder over a downsampled copy of the image,
/// followed by per-token L2 normalization.
#[derive(Debug, Clone)]
pub struct StubBackend {
    kind: EncoderKind,
    token_count: usize,
    embed_dim: usize,
    input_grid: usize,
    projection: Array2<f64>,
}

/// Side length of the downsampled grid the stub encoders read.
pub const STUB_INPUT_GRID: usize = 16;

/// Builds a stub backend with the default input grid.
pub fn make_stub_backend(
    kind: EncoderKind,
    token_count: usize,
    embed_dim: usize,
    seed: u64,
) -> Result<StubBackend> {
    StubBackend::new(kind, token_count, embed_dim, seed, STUB_INPUT_GRID)
}

impl StubBackend {
    pub fn new(
        kind: EncoderKind,
        token_count: usize,
        embed_dim: usize,
        seed: u64,
        input_grid: usize,
    ) -> Result<Self> {
        if token_count == 0 || embed_dim == 0 || input_grid == 0 {
            return Err(Error::input("stub backend dimensions must be positive"));
        }
        if kind == EncoderKind::FaceLike && token_count != 1 {
            return Err(Error::input(
                "face-like backends emit exactly one global token",
            ));
        }
        let n_in = input_grid * input_grid * 3;
        let label = format!("stub-backend/{kind:?}/{token_count}x{embed_dim}/{input_grid}");
        let mut r = rng::stream(seed, &label);
        let projection = rng::normal(
            &mut r,
            (n_in, token_count * embed_dim),
            1.0 / (n_in as f64).sqrt(),
        );
        Ok(Self {
            kind,
            token_count,
            embed_dim,
            input_grid,
            projection,
        })
    }
}

impl EncoderBackend for StubBackend {
    fn kind(&self) -> EncoderKind {
        self.kind
    }

    fn token_count(&self) -> usize {
        self.token_count
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn encode(&self, img: &Image) -> Result<Array2<f64>> {
        let g = self.input_grid;
        let small = if g >= crate::image::MIN_SIDE {
            img.resize(g, g)?
        } else {
            img.resize(crate::image::MIN_SIDE, crate::image::MIN_SIDE)?
        };
        let flat: Vec<f64> = if g >= crate::image::MIN_SIDE {
            small.pixels().iter().map(|v| v - 0.5).collect()
        } else {
            // Grids below the image minimum are box-averaged from 8×8.
            let f = crate::image::MIN_SIDE / g.max(1);
            let p = small.pixels();
            let mut out = Vec::with_capacity(g * g * 3);
            for y in 0..g {
                for x in 0..g {
                    for c in 0..3 {
                        let mut acc = 0.0;
                        for dy in 0..f {
                            for dx in 0..f {
                                acc += p[[y * f + dy, x * f + dx, c]];
                            }
                        }
                        out.push(acc / (f * f) as f64 - 0.5);
                    }
                }
            }
            out
        };
        let x = ndarray::Array1::from(flat);
        let y = x.dot(&self.projection);
        let mut tokens = y
            .into_shape_with_order((self.token_count, self.embed_dim))
            .map_err(|e| Error::shape(e.to_string()))?;
        for mut row in tokens.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row /= norm;
            }
        }
        Ok(tokens)
    }
}

/// Name → backend lookup, so configs and manifests can refer to encoders by
/// string.
#[derive(Debug, Clone, Default)]
pub struct BackendRegistry {
    backends: BTreeMap<String, Arc<dyn EncoderBackend>>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, backend: Arc<dyn EncoderBackend>) {
        self.backends.insert(name.into(), backend);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn EncoderBackend>> {
        self.backends
            .get(name)
            .cloned()
            .ok_or_else(|| Error::input(format!("no encoder backend named `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(String::as_str)
    }
}

/// The two trainable projections into the U-Net's context width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapperWeights {
    pub clip_mapper: Linear,
    pub face_mapper: Linear,
}

/// Bound of the uniform mapper initialization.
pub const MAPPER_INIT_BOUND: f64 = 0.02;

impl MapperWeights {
    pub fn init(clip_dim: usize, face_dim: usize, d_model: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "mappers");
        Self {
            clip_mapper: Linear::init_uniform(&mut r, clip_dim, d_model, MAPPER_INIT_BOUND),
            face_mapper: Linear::init_uniform(&mut r, face_dim, d_model, MAPPER_INIT_BOUND),
        }
    }

    pub fn d_model(&self) -> usize {
        self.clip_mapper.d_out()
    }

    fn check(&self, features: &IdentityFeatures) -> Result<()> {
        if features.clip.ncols() != self.clip_mapper.d_in() {
            return Err(Error::shape(format!(
                "clip features have width {}, mapper expects {}",
                features.clip.ncols(),
                self.clip_mapper.d_in()
            )));
        }
        if features.face.ncols() != self.face_mapper.d_in() {
            return Err(Error::shape(format!(
                "face features have width {}, mapper expects {}",
                features.face.ncols(),
                self.face_mapper.d_in()
            )));
        }
        if self.clip_mapper.d_out() != self.face_mapper.d_out() {
            return Err(Error::shape("mappers disagree on d_model"));
        }
        Ok(())
    }

    /// Maps raw encoder features to identity tokens.
    pub fn map(&self, features: &IdentityFeatures) -> Result<Array2<f64>> {
        self.check(features)?;
        let clip = self.clip_mapper.forward(features.clip.view());
        let face = self.face_mapper.forward(features.face.view());
        Ok(concatenate![Axis(0), clip, face])
    }

    /// Accumulates mapper gradients given `dL/d tokens`.
    pub fn backward(&self, features: &IdentityFeatures, d_tokens: ArrayView2<f64>, grad: &mut MapperWeights) {
        let n_clip = features.clip.nrows();
        let (d_clip, d_face) = d_tokens.split_at(Axis(0), n_clip);
        self.clip_mapper
            .backward(features.clip.view(), d_clip, &mut grad.clip_mapper);
        self.face_mapper
            .backward(features.face.view(), d_face, &mut grad.face_mapper);
    }
}

impl Params for MapperWeights {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.clip_mapper.visit(&join(prefix, "clip_mapper"), f);
        self.face_mapper.visit(&join(prefix, "face_mapper"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.clip_mapper.visit_mut(&join(prefix, "clip_mapper"), f);
        self.face_mapper.visit_mut(&join(prefix, "face_mapper"), f);
    }
}

/// Raw (unmapped) encoder outputs for one aligned face.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityFeatures {
    pub clip: Array2<f64>,
    pub face: Array2<f64>,
}

/// Identity token sequence `c_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEmbedding {
    tokens: Array2<f64>,
    source_ids: Vec<String>,
}

impl IdentityEmbedding {
    pub fn new(tokens: Array2<f64>, source_ids: Vec<String>) -> Result<Self> {
        if tokens.nrows() == 0 || tokens.ncols() == 0 {
            return Err(Error::shape("identity embedding must be non-empty"));
        }
        if !tokens.iter().all(|v| v.is_finite()) {
            return Err(Error::input("identity embedding contains non-finite values"));
        }
        if source_ids.is_empty() || !tokens.nrows().is_multiple_of(source_ids.len()) {
            return Err(Error::shape(format!(
                "{} tokens cannot be split evenly across {} identities",
                tokens.nrows(),
                source_ids.len()
            )));
        }
        Ok(Self { tokens, source_ids })
    }

    pub fn tokens(&self) -> &Array2<f64> {
        &self.tokens
    }

    pub fn source_ids(&self) -> &[String] {
        &self.source_ids
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn d_model(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn tokens_per_identity(&self) -> usize {
        self.tokens.nrows() / self.source_ids.len()
    }

    pub fn as_features(&self) -> FeatureMatrix {
        FeatureMatrix::from_raw(self.tokens.clone(), Stream::Identity)
    }
}

/// Runs alignment and both frozen backbones.
pub fn encode_identity_features(
    img: &Image,
    clip_backend: &dyn EncoderBackend,
    face_backend: &dyn EncoderBackend,
    align_size: usize,
) -> Result<IdentityFeatures> {
    if clip_backend.kind() != EncoderKind::ClipLike {
        return Err(Error::input("first backend must be clip-like"));
    }
    if face_backend.kind() != EncoderKind::FaceLike {
        return Err(Error::input("second backend must be face-like"));
    }
    let aligned = align_face(img, align_size)?;
    let clip = clip_backend.encode(&aligned)?;
    let face = face_backend.encode(&aligned)?;
    if clip.dim() != (clip_backend.token_count(), clip_backend.embed_dim()) {
        return Err(Error::shape("clip backend emitted an unexpected shape"));
    }
    if face.dim() != (1, face_backend.embed_dim()) {
        return Err(Error::shape("face backend must emit a single token"));
    }
    Ok(IdentityFeatures { clip, face })
}

/// Full identity embedding for one reference image.
pub fn extract_identity_embedding(
    img: &Image,
    clip_backend: &dyn EncoderBackend,
    face_backend: &dyn EncoderBackend,
    mappers: &MapperWeights,
    align_size: usize,
    identity_label: &str,
) -> Result<IdentityEmbedding> {
    let features = encode_identity_features(img, clip_backend, face_backend, align_size)?;
    IdentityEmbedding::new(mappers.map(&features)?, vec![identity_label.to_string()])
}

/// Concatenates identity embeddings in list order.
pub fn stack_identities(embeddings: &[IdentityEmbedding]) -> Result<IdentityEmbedding> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::input("cannot stack an empty list of identities"))?;
    if let Some(bad) = embeddings.iter().find(|e| e.d_model() != first.d_model()) {
        return Err(Error::shape(format!(
            "d_model mismatch: {} vs {}",
            first.d_model(),
            bad.d_model()
        )));
    }
    let views: Vec<_> = embeddings.iter().map(|e| e.tokens.view()).collect();
    let tokens = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?;
    let source_ids = embeddings
        .iter()
        .flat_map(|e| e.source_ids.iter().cloned())
        .collect();
    Ok(IdentityEmbedding { tokens, source_ids })
}

/// `(1 − w)·a + w·b`, elementwise. The endpoints return `a` or `b` exactly.
pub fn interpolate_identities(
    a: &IdentityEmbedding,
    b: &IdentityEmbedding,
    w: f64,
) -> Result<IdentityEmbedding> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::input(format!("interpolation weight {w} outside [0, 1]")));
    }
    if a.tokens.dim() != b.tokens.dim() {
        return Err(Error::shape(format!(
            "cannot interpolate {:?} with {:?}",
            a.tokens.dim(),
            b.tokens.dim()
        )));
    }
    let tokens = if w == 0.0 {
        a.tokens.clone()
    } else if w == 1.0 {
        b.tokens.clone()
    } else {
        a.tokens.mapv(|v| v * (1.0 - w)) + &b.tokens.mapv(|v| v * w)
    };
    // Interpolated slots are labelled `a|b`; endpoints keep their own labels.
    let source_ids = if w == 0.0 {
        a.source_ids.clone()
    } else if w == 1.0 {
        b.source_ids.clone()
    } else if a.source_ids.len() == b.source_ids.len() {
        a.source_ids
            .iter()
            .zip(&b.source_ids)
            .map(|(x, y)| if x == y { x.clone() } else { format!("{x}|{y}") })
            .collect()
    } else {
        a.source_ids.clone()
    };
    Ok(IdentityEmbedding { tokens, source_ids })
}
