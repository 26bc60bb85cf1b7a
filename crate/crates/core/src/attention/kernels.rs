//! Array-level attention and normalization kernels with explicit backward
//! passes. The public `FeatureMatrix` API and the U-Net both sit on top of
//! these.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};

use super::StyleAlignMode;
use crate::error::{Error, Result};

/// Minimum per-channel standard deviation accepted by [`adain_fwd`].
pub const ADAIN_EPS: f64 = 1e-6;

pub(crate) fn column_mean(x: ArrayView2<f64>) -> Result<Array1<f64>> {
    if x.nrows() == 0 {
        return Err(Error::shape("channel mean over zero tokens"));
    }
    Ok(x.sum_axis(Axis(0)) / x.nrows() as f64)
}

/// Population standard deviation per column.
pub(crate) fn column_std(x: ArrayView2<f64>, mean: &Array1<f64>) -> Array1<f64> {
    let n = x.nrows() as f64;
    let centered = &x - mean;
    (centered.mapv(|v| v * v).sum_axis(Axis(0)) / n).mapv(f64::sqrt)
}

fn softmax_rows_in_place(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

#[derive(Debug, Clone)]
pub(crate) struct SdpaCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    pub(crate) probs: Array2<f64>,
    scale: f64,
}

pub(crate) fn check_sdpa_shapes(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
) -> Result<()> {
    if k.nrows() != v.nrows() {
        return Err(Error::shape(format!(
            "keys have {} tokens but values have {}",
            k.nrows(),
            v.nrows()
        )));
    }
    if q.ncols() != k.ncols() {
        return Err(Error::shape(format!(
            "query width {} != key width {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if q.ncols() == 0 {
        return Err(Error::shape("zero-width query/key"));
    }
    if k.nrows() == 0 {
        return Err(Error::UndefinedSoftmax);
    }
    Ok(())
}

/// softmax(Q Kᵀ / √d) V, with d the key width.
pub(crate) fn sdpa_fwd(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
) -> Result<(Array2<f64>, SdpaCache)> {
    check_sdpa_shapes(q, k, v)?;
    let scale = 1.0 / (k.ncols() as f64).sqrt();
    let mut probs = q.dot(&k.t());
    probs *= scale;
    softmax_rows_in_place(&mut probs);
    let out = probs.dot(&v);
    Ok((
        out,
        SdpaCache {
            q: q.to_owned(),
            k: k.to_owned(),
            v: v.to_owned(),
            probs,
            scale,
        },
    ))
}

pub(crate) fn sdpa_bwd(
    cache: &SdpaCache,
    dout: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let p = &cache.probs;
    let dv = p.t().dot(&dout);
    let dp = dout.dot(&cache.v.t());
    // dS = P ⊙ (dP − rowsum(dP ⊙ P))
    let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
    let mut ds = (&dp - &row_dot) * p;
    ds *= cache.scale;
    let dq = ds.dot(&cache.k);
    let dk = ds.t().dot(&cache.q);
    (dq, dk, dv)
}

/// Multi-head attention: channels are split evenly into `heads` groups and
/// each group attends independently; outputs are concatenated back.
#[derive(Debug, Clone)]
pub(crate) struct MultiHeadCache {
    heads: Vec<SdpaCache>,
    dk_head: usize,
    dv_head: usize,
}

pub(crate) fn multihead_fwd(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    heads: usize,
) -> Result<(Array2<f64>, MultiHeadCache)> {
    if heads == 0 || !q.ncols().is_multiple_of(heads) || !v.ncols().is_multiple_of(heads) {
        return Err(Error::shape(format!(
            "widths {}/{} not divisible by {heads} heads",
            q.ncols(),
            v.ncols()
        )));
    }
    check_sdpa_shapes(q, k, v)?;
    let dk_head = q.ncols() / heads;
    let dv_head = v.ncols() / heads;
    let mut out = Array2::zeros((q.nrows(), v.ncols()));
    let mut caches = Vec::with_capacity(heads);
    for h in 0..heads {
        let ks = s![.., h * dk_head..(h + 1) * dk_head];
        let vs = s![.., h * dv_head..(h + 1) * dv_head];
        let (o, c) = sdpa_fwd(q.slice(ks), k.slice(ks), v.slice(vs))?;
        out.slice_mut(vs).assign(&o);
        caches.push(c);
    }
    Ok((
        out,
        MultiHeadCache {
            heads: caches,
            dk_head,
            dv_head,
        },
    ))
}

pub(crate) fn multihead_bwd(
    cache: &MultiHeadCache,
    dout: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (dkh, dvh) = (cache.dk_head, cache.dv_head);
    let n_heads = cache.heads.len();
    let nq = dout.nrows();
    let nk = cache.heads[0].k.nrows();
    let mut dq = Array2::zeros((nq, dkh * n_heads));
    let mut dk = Array2::zeros((nk, dkh * n_heads));
    let mut dv = Array2::zeros((nk, dvh * n_heads));
    for (h, c) in cache.heads.iter().enumerate() {
        let ks = s![.., h * dkh..(h + 1) * dkh];
        let vs = s![.., h * dvh..(h + 1) * dvh];
        let (a, b, cc) = sdpa_bwd(c, dout.slice(vs));
        dq.slice_mut(ks).assign(&a);
        dk.slice_mut(ks).assign(&b);
        dv.slice_mut(vs).assign(&cc);
    }
    (dq, dk, dv)
}

/// Shift/scale of identity features toward text feature statistics.
#[derive(Debug, Clone)]
pub(crate) enum StyleCache {
    Mean { n_x: usize, n_y: usize },
    Full(AdainCache),
}

/// x − μ(x) + μ(y)
pub(crate) fn adain_mean_fwd(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != y.ncols() {
        return Err(Error::shape(format!(
            "channel mismatch {} vs {}",
            x.ncols(),
            y.ncols()
        )));
    }
    let mx = column_mean(x)?;
    let my = column_mean(y)?;
    Ok(&x - &mx + &my)
}

/// Returns (dx, dy).
pub(crate) fn adain_mean_bwd(
    n_x: usize,
    n_y: usize,
    g: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let gsum = g.sum_axis(Axis(0));
    let dx = &g - &(&gsum / n_x as f64);
    let row = &gsum / n_y as f64;
    let dy = Array2::from_shape_fn((n_y, g.ncols()), |(_, c)| row[c]);
    (dx, dy)
}

#[derive(Debug, Clone)]
pub(crate) struct AdainCache {
    xhat: Array2<f64>,
    y_centered: Array2<f64>,
    sigma_x: Array1<f64>,
    sigma_y: Array1<f64>,
}

/// σ(y)·(x − μ(x))/σ(x) + μ(y), per channel, population statistics.
pub(crate) fn adain_fwd(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
) -> Result<(Array2<f64>, AdainCache)> {
    if x.ncols() != y.ncols() {
        return Err(Error::shape(format!(
            "channel mismatch {} vs {}",
            x.ncols(),
            y.ncols()
        )));
    }
    let mx = column_mean(x)?;
    let my = column_mean(y)?;
    let sx = column_std(x, &mx);
    if let Some((channel, &std)) = sx.iter().enumerate().find(|(_, s)| **s <= ADAIN_EPS) {
        return Err(Error::DegenerateStatistics {
            channel,
            std,
            eps: ADAIN_EPS,
        });
    }
    let sy = column_std(y, &my);
    let xhat = (&x - &mx) / &sx;
    let out = &xhat * &sy + &my;
    Ok((
        out,
        AdainCache {
            xhat,
            y_centered: &y - &my,
            sigma_x: sx,
            sigma_y: sy,
        },
    ))
}

pub(crate) fn adain_bwd(cache: &AdainCache, g: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let n_x = g.nrows() as f64;
    let n_y = cache.y_centered.nrows() as f64;
    let xhat = &cache.xhat;
    let dxhat = &g * &cache.sigma_y;
    let mean_dxhat = dxhat.sum_axis(Axis(0)) / n_x;
    let mean_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(0)) / n_x;
    let dx = (&dxhat - &mean_dxhat - &(xhat * &mean_dxhat_xhat)) / &cache.sigma_x;

    let d_sigma_y = (&g * xhat).sum_axis(Axis(0));
    let d_mu_y = g.sum_axis(Axis(0));
    // dσ/dy_j = (y_j − μ)/(n σ); zero when σ(y) = 0.
    let coef = Array1::from_shape_fn(d_sigma_y.len(), |c| {
        if cache.sigma_y[c] > 0.0 {
            d_sigma_y[c] / (n_y * cache.sigma_y[c])
        } else {
            0.0
        }
    });
    let dy = &cache.y_centered * &coef + &(d_mu_y / n_y);
    (dx, dy)
}

/// Applies the selected style alignment of `x` toward `y`.
pub(crate) fn style_fwd(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    mode: StyleAlignMode,
) -> Result<(Array2<f64>, Option<StyleCache>)> {
    match mode {
        StyleAlignMode::Off => Ok((x.to_owned(), None)),
        StyleAlignMode::AdainMean => {
            let out = adain_mean_fwd(x, y)?;
            Ok((
                out,
                Some(StyleCache::Mean {
                    n_x: x.nrows(),
                    n_y: y.nrows(),
                }),
            ))
        }
        StyleAlignMode::Adain => {
            let (out, c) = adain_fwd(x, y)?;
            Ok((out, Some(StyleCache::Full(c))))
        }
    }
}

/// Returns (dx, dy); dy is `None` when no style op ran.
pub(crate) fn style_bwd(
    cache: Option<&StyleCache>,
    g: ArrayView2<f64>,
) -> (Array2<f64>, Option<Array2<f64>>) {
    match cache {
        None => (g.to_owned(), None),
        Some(StyleCache::Mean { n_x, n_y }) => {
            let (dx, dy) = adain_mean_bwd(*n_x, *n_y, g);
            (dx, Some(dy))
        }
        Some(StyleCache::Full(c)) => {
            let (dx, dy) = adain_bwd(c, g);
            (dx, Some(dy))
        }
    }
}

/// Mixed attention on already-projected features: the identity keys/values
/// (optionally style-shifted toward the text ones) are concatenated ahead of
/// the text keys/values and attended by the identity query.
#[derive(Debug, Clone)]
pub(crate) struct MixedKvCache {
    k_style: Option<StyleCache>,
    v_style: Option<StyleCache>,
    n_id: usize,
    pub(crate) attn: MultiHeadCache,
    /// Post-shift identity keys/values, kept for inspection.
    pub(crate) k_id: Array2<f64>,
    pub(crate) v_id: Array2<f64>,
}

pub(crate) struct MixedKvGrads {
    pub q: Array2<f64>,
    pub k_id: Array2<f64>,
    pub v_id: Array2<f64>,
    pub k_t: Array2<f64>,
    pub v_t: Array2<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn mixed_kv_fwd(
    q: ArrayView2<f64>,
    k_id: ArrayView2<f64>,
    v_id: ArrayView2<f64>,
    k_t: ArrayView2<f64>,
    v_t: ArrayView2<f64>,
    style: StyleAlignMode,
    heads: usize,
) -> Result<(Array2<f64>, MixedKvCache)> {
    if k_id.ncols() != k_t.ncols() || v_id.ncols() != v_t.ncols() {
        return Err(Error::shape(format!(
            "identity/text projection widths differ: k {} vs {}, v {} vs {}",
            k_id.ncols(),
            k_t.ncols(),
            v_id.ncols(),
            v_t.ncols()
        )));
    }
    if k_t.nrows() != v_t.nrows() {
        return Err(Error::shape("text keys and values differ in token count"));
    }
    let (k_shift, v_shift, k_style, v_style) = if style == StyleAlignMode::Off {
        (k_id.to_owned(), v_id.to_owned(), None, None)
    } else {
        if k_t.nrows() == 0 {
            return Err(Error::shape(
                "style alignment needs a non-empty text stream",
            ));
        }
        let (k, kc) = style_fwd(k_id, k_t, style)?;
        let (v, vc) = style_fwd(v_id, v_t, style)?;
        (k, v, kc, vc)
    };
    let k_cat = concatenate![Axis(0), k_shift, k_t];
    let v_cat = concatenate![Axis(0), v_shift, v_t];
    let (out, attn) = multihead_fwd(q, k_cat.view(), v_cat.view(), heads)?;
    Ok((
        out,
        MixedKvCache {
            k_style,
            v_style,
            n_id: k_id.nrows(),
            attn,
            k_id: k_shift,
            v_id: v_shift,
        },
    ))
}

pub(crate) fn mixed_kv_bwd(cache: &MixedKvCache, dout: ArrayView2<f64>) -> MixedKvGrads {
    let (dq, dk_cat, dv_cat) = multihead_bwd(&cache.attn, dout);
    let n = cache.n_id;
    let dk_shift = dk_cat.slice(s![..n, ..]);
    let dv_shift = dv_cat.slice(s![..n, ..]);
    let mut k_t = dk_cat.slice(s![n.., ..]).to_owned();
    let mut v_t = dv_cat.slice(s![n.., ..]).to_owned();
    let (k_id, dky) = style_bwd(cache.k_style.as_ref(), dk_shift);
    let (v_id, dvy) = style_bwd(cache.v_style.as_ref(), dv_shift);
    if let Some(d) = dky {
        k_t += &d;
    }
    if let Some(d) = dvy {
        v_t += &d;
    }
    MixedKvGrads {
        q: dq,
        k_id,
        v_id,
        k_t,
        v_t,
    }
}
