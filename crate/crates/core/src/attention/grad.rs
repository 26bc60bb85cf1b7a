//! Cached forward passes with analytic gradients.
//!
//! Each op records what its backward pass needs during `forward`. Calling
//! `backward` before `forward` is a [`Error::State`] error.

use ndarray::{Array1, Array2, ArrayView2};

use super::kernels::{self, AdainCache, MixedKvCache, SdpaCache, StyleCache};
use super::{check_pair, AttentionProjections, FeatureMatrix, StyleAlignMode};
use crate::error::{Error, Result};

fn missing(op: &str) -> Error {
    Error::State(format!("{op}: backward called without a cached forward pass"))
}

fn check_upstream(expected: (usize, usize), got: ArrayView2<f64>) -> Result<()> {
    if got.dim() != expected {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match forward output {:?}",
            got.dim(),
            expected
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SdpaGrads {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
}

#[derive(Debug, Default)]
pub struct SdpaOp {
    cache: Option<(SdpaCache, (usize, usize))>,
}

impl SdpaOp {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(
        &mut self,
        q: &FeatureMatrix,
        k: &FeatureMatrix,
        v: &FeatureMatrix,
    ) -> Result<FeatureMatrix> {
        let (out, cache) = kernels::sdpa_fwd(q.view(), k.view(), v.view())?;
        self.cache = Some((cache, out.dim()));
        Ok(FeatureMatrix::from_raw(out, q.stream()))
    }

    pub fn backward(&self, upstream: &Array2<f64>) -> Result<SdpaGrads> {
        let (cache, dim) = self.cache.as_ref().ok_or_else(|| missing("sdpa"))?;
        check_upstream(*dim, upstream.view())?;
        let (q, k, v) = kernels::sdpa_bwd(cache, upstream.view());
        Ok(SdpaGrads { q, k, v })
    }
}

#[derive(Debug, Default)]
pub struct ChannelMeanOp {
    shape: Option<(usize, usize)>,
}

impl ChannelMeanOp {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &FeatureMatrix) -> Result<Array1<f64>> {
        let m = kernels::column_mean(x.view())?;
        self.shape = Some(x.data().dim());
        Ok(m)
    }

    pub fn backward(&self, upstream: &Array1<f64>) -> Result<Array2<f64>> {
        let (n, c) = self.shape.ok_or_else(|| missing("channel_mean"))?;
        if upstream.len() != c {
            return Err(Error::shape(format!(
                "upstream gradient has {} channels, expected {c}",
                upstream.len()
            )));
        }
        Ok(Array2::from_shape_fn((n, c), |(_, j)| upstream[j] / n as f64))
    }
}

#[derive(Debug, Default)]
pub struct AdainMeanOp {
    dims: Option<(usize, usize, usize)>,
}

impl AdainMeanOp {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &FeatureMatrix, y: &FeatureMatrix) -> Result<FeatureMatrix> {
        let out = kernels::adain_mean_fwd(x.view(), y.view())?;
        self.dims = Some((x.n_tokens(), y.n_tokens(), x.n_channels()));
        Ok(FeatureMatrix::from_raw(out, x.stream()))
    }

    /// Returns `(d/dx, d/dy)`.
    pub fn backward(&self, upstream: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let (nx, ny, c) = self.dims.ok_or_else(|| missing("adain_mean"))?;
        check_upstream((nx, c), upstream.view())?;
        Ok(kernels::adain_mean_bwd(nx, ny, upstream.view()))
    }
}

#[derive(Debug, Default)]
pub struct AdainOp {
    cache: Option<(AdainCache, (usize, usize))>,
}

impl AdainOp {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &FeatureMatrix, y: &FeatureMatrix) -> Result<FeatureMatrix> {
        let (out, cache) = kernels::adain_fwd(x.view(), y.view())?;
        self.cache = Some((cache, out.dim()));
        Ok(FeatureMatrix::from_raw(out, x.stream()))
    }

    /// Returns `(d/dx, d/dy)`.
    pub fn backward(&self, upstream: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let (cache, dim) = self.cache.as_ref().ok_or_else(|| missing("adain"))?;
        check_upstream(*dim, upstream.view())?;
        Ok(kernels::adain_bwd(cache, upstream.view()))
    }
}

/// Gradients with respect to one stream's projection weights. Weights an op
/// does not use get an all-zero gradient.
#[derive(Debug, Clone)]
pub struct ProjectionGrads {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

impl ProjectionGrads {
    fn zeros_like(p: &AttentionProjections) -> Self {
        Self {
            w_q: Array2::zeros(p.w_q.dim()),
            w_k: Array2::zeros(p.w_k.dim()),
            w_v: Array2::zeros(p.w_v.dim()),
        }
    }
}

/// Gradients of a two-stream self-attention variant.
#[derive(Debug, Clone)]
pub struct PairGrads {
    pub z_id: Array2<f64>,
    pub z_t: Array2<f64>,
    pub proj_id: ProjectionGrads,
    pub proj_t: ProjectionGrads,
}

pub type MixedAttentionGrads = PairGrads;

#[derive(Debug)]
struct PairCache {
    z_id: Array2<f64>,
    z_t: Array2<f64>,
    proj_id: AttentionProjections,
    proj_t: AttentionProjections,
    out_dim: (usize, usize),
}

#[derive(Debug)]
pub struct MixedAttentionOp {
    style: StyleAlignMode,
    cache: Option<(PairCache, MixedKvCache)>,
}

impl MixedAttentionOp {
    pub fn new(style: StyleAlignMode) -> Self {
        Self { style, cache: None }
    }

    pub fn forward(
        &mut self,
        z_id: &FeatureMatrix,
        z_t: &FeatureMatrix,
        proj_id: &AttentionProjections,
        proj_t: &AttentionProjections,
    ) -> Result<FeatureMatrix> {
        check_pair(proj_id, proj_t)?;
        proj_id.check_input(z_id, "identity features")?;
        proj_t.check_input(z_t, "text features")?;
        if z_id.is_empty() {
            return Err(Error::shape("identity stream must be non-empty"));
        }
        let q = z_id.data().dot(&proj_id.w_q);
        let k_id = z_id.data().dot(&proj_id.w_k);
        let v_id = z_id.data().dot(&proj_id.w_v);
        let k_t = z_t.data().dot(&proj_t.w_k);
        let v_t = z_t.data().dot(&proj_t.w_v);
        let (out, kv) = kernels::mixed_kv_fwd(
            q.view(),
            k_id.view(),
            v_id.view(),
            k_t.view(),
            v_t.view(),
            self.style,
            1,
        )?;
        self.cache = Some((
            PairCache {
                z_id: z_id.data().clone(),
                z_t: z_t.data().clone(),
                proj_id: proj_id.clone(),
                proj_t: proj_t.clone(),
                out_dim: out.dim(),
            },
            kv,
        ));
        Ok(FeatureMatrix::from_raw(out, z_id.stream()))
    }

    /// Identity keys and values as they entered the concatenation, i.e.
    /// after any style alignment.
    pub fn aligned_identity_kv(&self) -> Option<(&Array2<f64>, &Array2<f64>)> {
        self.cache.as_ref().map(|(_, kv)| (&kv.k_id, &kv.v_id))
    }

    pub fn backward(&self, upstream: &Array2<f64>) -> Result<PairGrads> {
        let (pc, kv) = self.cache.as_ref().ok_or_else(|| missing("mixed_attention"))?;
        check_upstream(pc.out_dim, upstream.view())?;
        let g = kernels::mixed_kv_bwd(kv, upstream.view());
        let (pid, pt) = (&pc.proj_id, &pc.proj_t);
        let z_id = g.q.dot(&pid.w_q.t()) + g.k_id.dot(&pid.w_k.t()) + g.v_id.dot(&pid.w_v.t());
        let z_t = g.k_t.dot(&pt.w_k.t()) + g.v_t.dot(&pt.w_v.t());
        let proj_id = ProjectionGrads {
            w_q: pc.z_id.t().dot(&g.q),
            w_k: pc.z_id.t().dot(&g.k_id),
            w_v: pc.z_id.t().dot(&g.v_id),
        };
        let mut proj_t = ProjectionGrads::zeros_like(pt);
        proj_t.w_k = pc.z_t.t().dot(&g.k_t);
        proj_t.w_v = pc.z_t.t().dot(&g.v_t);
        Ok(PairGrads {
            z_id,
            z_t,
            proj_id,
            proj_t,
        })
    }
}

#[derive(Debug, Default)]
pub struct MutualAttentionOp {
    cache: Option<(PairCache, SdpaCache)>,
}

impl MutualAttentionOp {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(
        &mut self,
        z_id: &FeatureMatrix,
        z_t: &FeatureMatrix,
        proj_id: &AttentionProjections,
        proj_t: &AttentionProjections,
    ) -> Result<FeatureMatrix> {
        check_pair(proj_id, proj_t)?;
        proj_id.check_input(z_id, "identity features")?;
        proj_t.check_input(z_t, "text features")?;
        if z_t.is_empty() {
            return Err(Error::UndefinedSoftmax);
        }
        let q = z_id.data().dot(&proj_id.w_q);
        let k_t = z_t.data().dot(&proj_t.w_k);
        let v_t = z_t.data().dot(&proj_t.w_v);
        let (out, sdpa) = kernels::sdpa_fwd(q.view(), k_t.view(), v_t.view())?;
        self.cache = Some((
            PairCache {
                z_id: z_id.data().clone(),
                z_t: z_t.data().clone(),
                proj_id: proj_id.clone(),
                proj_t: proj_t.clone(),
                out_dim: out.dim(),
            },
            sdpa,
        ));
        Ok(FeatureMatrix::from_raw(out, z_id.stream()))
    }

    pub fn backward(&self, upstream: &Array2<f64>) -> Result<PairGrads> {
        let (pc, sdpa) = self.cache.as_ref().ok_or_else(|| missing("mutual_attention"))?;
        check_upstream(pc.out_dim, upstream.view())?;
        let (dq, dk, dv) = kernels::sdpa_bwd(sdpa, upstream.view());
        let (pid, pt) = (&pc.proj_id, &pc.proj_t);
        let mut proj_id = ProjectionGrads::zeros_like(pid);
        proj_id.w_q = pc.z_id.t().dot(&dq);
        let mut proj_t = ProjectionGrads::zeros_like(pt);
        proj_t.w_k = pc.z_t.t().dot(&dk);
        proj_t.w_v = pc.z_t.t().dot(&dv);
        Ok(PairGrads {
            z_id: dq.dot(&pid.w_q.t()),
            z_t: dk.dot(&pt.w_k.t()) + dv.dot(&pt.w_v.t()),
            proj_id,
            proj_t,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CrossAttentionMergeGrads {
    pub q: Array2<f64>,
    pub c_id: Array2<f64>,
    pub c_t: Array2<f64>,
    pub proj_id: ProjectionGrads,
    pub proj_t: ProjectionGrads,
}

#[derive(Debug)]
struct MergeCache {
    c_id: Array2<f64>,
    c_t: Array2<f64>,
    proj_id: AttentionProjections,
    proj_t: AttentionProjections,
    k_style: Option<StyleCache>,
    v_style: Option<StyleCache>,
    id_branch: SdpaCache,
    text_branch: SdpaCache,
    k_id: Array2<f64>,
    k_t: Array2<f64>,
    v_id: Array2<f64>,
    v_t: Array2<f64>,
    out_dim: (usize, usize),
}

#[derive(Debug)]
pub struct CrossAttentionMergeOp {
    style: StyleAlignMode,
    cache: Option<MergeCache>,
}

impl CrossAttentionMergeOp {
    pub fn new(style: StyleAlignMode) -> Self {
        Self { style, cache: None }
    }

    pub fn forward(
        &mut self,
        q: &FeatureMatrix,
        c_id: &FeatureMatrix,
        c_t: &FeatureMatrix,
        proj_id: &AttentionProjections,
        proj_t: &AttentionProjections,
    ) -> Result<FeatureMatrix> {
        check_pair(proj_id, proj_t)?;
        proj_id.check_input(c_id, "identity embedding")?;
        proj_t.check_input(c_t, "text embedding")?;
        if c_id.is_empty() || c_t.is_empty() {
            return Err(Error::UndefinedSoftmax);
        }
        if q.n_channels() != proj_id.d_k() {
            return Err(Error::shape(format!(
                "query width {} != key width {}",
                q.n_channels(),
                proj_id.d_k()
            )));
        }
        let k_id = c_id.data().dot(&proj_id.w_k);
        let v_id = c_id.data().dot(&proj_id.w_v);
        let k_t = c_t.data().dot(&proj_t.w_k);
        let v_t = c_t.data().dot(&proj_t.w_v);
        let (k_al, k_style) = kernels::style_fwd(k_id.view(), k_t.view(), self.style)?;
        let (v_al, v_style) = kernels::style_fwd(v_id.view(), v_t.view(), self.style)?;
        let (o_id, id_branch) = kernels::sdpa_fwd(q.view(), k_al.view(), v_al.view())?;
        let (o_t, text_branch) = kernels::sdpa_fwd(q.view(), k_t.view(), v_t.view())?;
        let out = o_id + o_t;
        self.cache = Some(MergeCache {
            c_id: c_id.data().clone(),
            c_t: c_t.data().clone(),
            proj_id: proj_id.clone(),
            proj_t: proj_t.clone(),
            k_style,
            v_style,
            id_branch,
            text_branch,
            k_id: k_al,
            k_t,
            v_id: v_al,
            v_t,
            out_dim: out.dim(),
        });
        Ok(FeatureMatrix::from_raw(out, q.stream()))
    }

    /// `(K'_id, V'_id)` after style alignment and `(K'_t, V'_t)`.
    #[allow(clippy::type_complexity)]
    pub fn projected_kv(
        &self,
    ) -> Option<((&Array2<f64>, &Array2<f64>), (&Array2<f64>, &Array2<f64>))> {
        self.cache
            .as_ref()
            .map(|c| ((&c.k_id, &c.v_id), (&c.k_t, &c.v_t)))
    }

    pub fn backward(&self, upstream: &Array2<f64>) -> Result<CrossAttentionMergeGrads> {
        let c = self
            .cache
            .as_ref()
            .ok_or_else(|| missing("cross_attention_merge"))?;
        check_upstream(c.out_dim, upstream.view())?;
        let (dq1, dk_al, dv_al) = kernels::sdpa_bwd(&c.id_branch, upstream.view());
        let (dq2, mut dk_t, mut dv_t) = kernels::sdpa_bwd(&c.text_branch, upstream.view());
        let (dk_id, dky) = kernels::style_bwd(c.k_style.as_ref(), dk_al.view());
        let (dv_id, dvy) = kernels::style_bwd(c.v_style.as_ref(), dv_al.view());
        if let Some(d) = dky {
            dk_t += &d;
        }
        if let Some(d) = dvy {
            dv_t += &d;
        }
        let (pid, pt) = (&c.proj_id, &c.proj_t);
        let mut proj_id = ProjectionGrads::zeros_like(pid);
        proj_id.w_k = c.c_id.t().dot(&dk_id);
        proj_id.w_v = c.c_id.t().dot(&dv_id);
        let mut proj_t = ProjectionGrads::zeros_like(pt);
        proj_t.w_k = c.c_t.t().dot(&dk_t);
        proj_t.w_v = c.c_t.t().dot(&dv_t);
        Ok(CrossAttentionMergeGrads {
            q: dq1 + dq2,
            c_id: dk_id.dot(&pid.w_k.t()) + dv_id.dot(&pid.w_v.t()),
            c_t: dk_t.dot(&pt.w_k.t()) + dv_t.dot(&pt.w_v.t()),
            proj_id,
            proj_t,
        })
    }
}
