//! Attention and feature-normalization primitives.
//!
//! Every operation here is a pure function of its inputs. Features are
//! row-major: one row per token, one column per channel, so a projection is
//! `Z · W` with `W` of shape `[channels × d_k]`.
//!
//! The `*Op` structs wrap the same computations with a cached forward pass
//! and an analytic backward pass.

mod grad;
pub(crate) mod kernels;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use grad::{
    AdainMeanOp, AdainOp, ChannelMeanOp, CrossAttentionMergeGrads, CrossAttentionMergeOp,
    MixedAttentionGrads, MixedAttentionOp, MutualAttentionOp, PairGrads, ProjectionGrads,
    SdpaGrads, SdpaOp,
};
pub use kernels::ADAIN_EPS;

/// Which denoising stream a feature matrix belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Identity,
    Text,
}

/// How identity keys/values are aligned with text keys/values before
/// attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleAlignMode {
    #[default]
    Off,
    /// Mean-only shift: `x − μ(x) + μ(y)`.
    AdainMean,
    /// Full adaptive instance normalization (mean and std).
    Adain,
}

impl std::str::FromStr for StyleAlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "adain_mean" => Ok(Self::AdainMean),
            "adain" => Ok(Self::Adain),
            other => Err(Error::input(format!("unknown style mode `{other}`"))),
        }
    }
}

/// A `[tokens × channels]` feature matrix tagged with its stream.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Array2<f64>,
    stream: Stream,
}

impl FeatureMatrix {
    /// Validates that the matrix has at least one token and one channel and
    /// that every entry is finite.
    pub fn new(data: Array2<f64>, stream: Stream) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::shape(format!(
                "feature matrix must be non-empty, got {:?}",
                data.dim()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::input("feature matrix contains non-finite values"));
        }
        Ok(Self { data, stream })
    }

    /// A zero-token matrix. Only accepted where an operation explicitly
    /// allows an absent stream (e.g. the text side of mixed attention).
    pub fn empty(n_channels: usize, stream: Stream) -> Self {
        Self {
            data: Array2::zeros((0, n_channels)),
            stream,
        }
    }

    pub(crate) fn from_raw(data: Array2<f64>, stream: Stream) -> Self {
        Self { data, stream }
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn stream(&self) -> Stream {
        self.stream
    }

    pub fn n_tokens(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }
}

/// Query/key/value projection weights for one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionProjections {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

impl AttentionProjections {
    pub fn new(w_q: Array2<f64>, w_k: Array2<f64>, w_v: Array2<f64>) -> Result<Self> {
        let p = Self { w_q, w_k, w_v };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if self.w_q.ncols() != self.w_k.ncols() {
            return Err(Error::shape(format!(
                "W_q width {} != W_k width {}",
                self.w_q.ncols(),
                self.w_k.ncols()
            )));
        }
        let finite = self
            .w_q
            .iter()
            .chain(self.w_k.iter())
            .chain(self.w_v.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::input("projection weights contain non-finite values"));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.w_k.ncols()
    }

    pub fn d_v(&self) -> usize {
        self.w_v.ncols()
    }

    pub(crate) fn check_input(&self, x: &FeatureMatrix, what: &str) -> Result<()> {
        if x.n_channels() != self.w_k.nrows() || x.n_channels() != self.w_v.nrows() {
            return Err(Error::shape(format!(
                "{what} has {} channels but projections expect {}",
                x.n_channels(),
                self.w_k.nrows()
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_pair(id: &AttentionProjections, text: &AttentionProjections) -> Result<()> {
    id.validate()?;
    text.validate()?;
    if id.d_k() != text.d_k() || id.d_v() != text.d_v() {
        return Err(Error::shape(format!(
            "streams project to different widths: d_k {} vs {}, d_v {} vs {}",
            id.d_k(),
            text.d_k(),
            id.d_v(),
            text.d_v()
        )));
    }
    Ok(())
}

/// `softmax(Q Kᵀ / √d) V` where `d` is the key channel count.
pub fn scaled_dot_product_attention(
    q: &FeatureMatrix,
    k: &FeatureMatrix,
    v: &FeatureMatrix,
) -> Result<FeatureMatrix> {
    let (out, _) = kernels::sdpa_fwd(q.view(), k.view(), v.view())?;
    Ok(FeatureMatrix::from_raw(out, q.stream()))
}

/// The row-stochastic weight matrix `softmax(Q Kᵀ / √d)`.
pub fn attention_weights(q: &FeatureMatrix, k: &FeatureMatrix) -> Result<Array2<f64>> {
    let v = Array2::zeros((k.n_tokens(), 1));
    let (_, cache) = kernels::sdpa_fwd(q.view(), k.view(), v.view())?;
    Ok(cache.probs)
}

/// Per-channel arithmetic mean over tokens.
pub fn channel_mean(x: &FeatureMatrix) -> Result<Array1<f64>> {
    kernels::column_mean(x.view())
}

/// Per-channel population standard deviation over tokens.
pub fn channel_std(x: &FeatureMatrix) -> Result<Array1<f64>> {
    let m = kernels::column_mean(x.view())?;
    Ok(kernels::column_std(x.view(), &m))
}

/// `x − μ(x) + μ(y)`: shifts `x` so that its per-channel mean matches `y`'s.
pub fn adain_mean(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<FeatureMatrix> {
    let out = kernels::adain_mean_fwd(x.view(), y.view())?;
    Ok(FeatureMatrix::from_raw(out, x.stream()))
}

/// `σ(y)·(x − μ(x))/σ(x) + μ(y)` per channel.
///
/// Fails with [`Error::DegenerateStatistics`] when any channel of `x` has
/// `σ ≤ ADAIN_EPS` instead of clamping.
pub fn adain(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<FeatureMatrix> {
    let (out, _) = kernels::adain_fwd(x.view(), y.view())?;
    Ok(FeatureMatrix::from_raw(out, x.stream()))
}

/// Self-attention of the identity stream whose keys and values are extended
/// with the text stream's: `Attn(Q_id, [K_id; K_t], [V_id; V_t])`.
///
/// Identity keys/values come first. With a style mode other than `Off`, the
/// identity keys/values are first aligned to the text keys/values. `z_t` may
/// be empty, in which case this reduces to plain self-attention.
pub fn mixed_attention(
    z_id: &FeatureMatrix,
    z_t: &FeatureMatrix,
    proj_id: &AttentionProjections,
    proj_t: &AttentionProjections,
    style: StyleAlignMode,
) -> Result<FeatureMatrix> {
    MixedAttentionOp::new(style).forward(z_id, z_t, proj_id, proj_t)
}

/// Self-attention of the identity stream whose keys and values are replaced
/// wholesale by the text stream's: `Attn(Q_id, K_t, V_t)`.
pub fn mutual_attention(
    z_id: &FeatureMatrix,
    z_t: &FeatureMatrix,
    proj_id: &AttentionProjections,
    proj_t: &AttentionProjections,
) -> Result<FeatureMatrix> {
    MutualAttentionOp::new().forward(z_id, z_t, proj_id, proj_t)
}

/// Cross-attention over identity tokens plus cross-attention over text
/// tokens, summed: `Attn(Q, K'_id, V'_id) + Attn(Q, K'_t, V'_t)`.
///
/// `q` is the already-projected query. Only `w_k`/`w_v` of the projection
/// pair are used.
pub fn cross_attention_merge(
    q: &FeatureMatrix,
    c_id: &FeatureMatrix,
    c_t: &FeatureMatrix,
    proj_id: &AttentionProjections,
    proj_t: &AttentionProjections,
    style: StyleAlignMode,
) -> Result<FeatureMatrix> {
    CrossAttentionMergeOp::new(style).forward(q, c_id, c_t, proj_id, proj_t)
}
