//! U-Net building blocks with explicit backward passes.
//!
//! Spatial feature maps are stored token-major as `[h·w × channels]`, row
//! index `y·w + x`.

use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{join, Linear, Params};
use crate::rng;

pub(crate) fn silu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

pub(crate) fn silu_bwd(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    ndarray::Zip::from(&mut out).and(x).for_each(|g, &v| {
        let s = 1.0 / (1.0 + (-v).exp());
        *g *= s * (1.0 + v * (1.0 - s));
    });
    out
}

/// 3×3 convolution with zero padding 1 and stride 1 or 2. Weights are stored
/// im2col-style as `[9·c_in × c_out]`, row index `(ky·3 + kx)·c_in + ci`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub stride: usize,
}

pub(crate) struct ConvCache {
    cols: Array2<f64>,
    h: usize,
    w: usize,
}

fn out_side(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

impl Conv2d {
    pub fn init(rng: &mut impl Rng, c_in: usize, c_out: usize, stride: usize, gain: f64) -> Self {
        let fan_in = 9 * c_in;
        Self {
            w: rng::normal(rng, (fan_in, c_out), gain / (fan_in as f64).sqrt()),
            b: Array1::zeros(c_out),
            stride,
        }
    }

    pub fn c_in(&self) -> usize {
        self.w.nrows() / 9
    }

    pub fn c_out(&self) -> usize {
        self.w.ncols()
    }

    fn im2col(&self, x: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
        let cin = x.ncols();
        let (oh, ow) = (out_side(h, self.stride), out_side(w, self.stride));
        let mut cols = Array2::zeros((oh * ow, 9 * cin));
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let cs = cols.as_slice_mut().expect("fresh array");
        let row_len = 9 * cin;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut cs[(oy * ow + ox) * row_len..(oy * ow + ox + 1) * row_len];
                for ky in 0..3 {
                    let iy = (oy * self.stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * self.stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = (iy as usize * w + ix as usize) * cin;
                        let dst = (ky * 3 + kx) * cin;
                        row[dst..dst + cin].copy_from_slice(&xs[src..src + cin]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, h: usize, w: usize, cin: usize) -> Array2<f64> {
        let (oh, ow) = (out_side(h, self.stride), out_side(w, self.stride));
        let mut dx = Array2::<f64>::zeros((h * w, cin));
        let ds = dcols.as_slice().expect("standard layout");
        let xs = dx.as_slice_mut().expect("fresh array");
        let row_len = 9 * cin;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &ds[(oy * ow + ox) * row_len..(oy * ow + ox + 1) * row_len];
                for ky in 0..3 {
                    let iy = (oy * self.stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * self.stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = (iy as usize * w + ix as usize) * cin;
                        let src = (ky * 3 + kx) * cin;
                        for (d, s) in xs[dst..dst + cin].iter_mut().zip(&row[src..src + cin]) {
                            *d += s;
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the output map, its spatial size and the backward cache.
    pub(crate) fn forward(
        &self,
        x: &Array2<f64>,
        h: usize,
        w: usize,
    ) -> (Array2<f64>, (usize, usize), ConvCache) {
        let cols = self.im2col(x, h, w);
        let y = cols.dot(&self.w) + &self.b;
        let dims = (out_side(h, self.stride), out_side(w, self.stride));
        (y, dims, ConvCache { cols, h, w })
    }

    pub(crate) fn backward(&self, cache: &ConvCache, dy: &Array2<f64>, grad: &mut Conv2d) -> Array2<f64> {
        grad.w += &cache.cols.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        let dcols = dy.dot(&self.w.t());
        self.col2im(&dcols, cache.h, cache.w, self.c_in())
    }
}

impl Params for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "w"), self.w.view().into_dyn());
        f(&join(prefix, "b"), self.b.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "w"), self.w.view_mut().into_dyn());
        f(&join(prefix, "b"), self.b.view_mut().into_dyn());
    }
}

const NORM_EPS: f64 = 1e-5;

/// Normalization over channel groups, used two ways: GroupNorm over all
/// tokens (`per_token = false`) and LayerNorm over each token's channels
/// (`per_token = true`, one group).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub groups: usize,
    pub per_token: bool,
}

pub(crate) struct NormCache {
    xhat: Array2<f64>,
    /// `[rows × groups]` inverse std; rows is 1 for group norm.
    inv_std: Array2<f64>,
}

impl Norm {
    pub fn group(channels: usize, groups: usize) -> Self {
        assert!(channels.is_multiple_of(groups), "{channels} channels not divisible into {groups} groups");
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            groups,
            per_token: false,
        }
    }

    pub fn layer(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            groups: 1,
            per_token: true,
        }
    }

    pub(crate) fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
        let (n, c) = x.dim();
        let cg = c / self.groups;
        let stat_rows = if self.per_token { n } else { 1 };
        let mut xhat = Array2::zeros((n, c));
        let mut inv_std = Array2::zeros((stat_rows, self.groups));
        for r in 0..stat_rows {
            let rows = if self.per_token { r..r + 1 } else { 0..n };
            for g in 0..self.groups {
                let block = x.slice(s![rows.clone(), g * cg..(g + 1) * cg]);
                let count = block.len() as f64;
                let mean = block.sum() / count;
                let var = block.fold(0.0, |a, v| a + (v - mean) * (v - mean)) / count;
                let is = 1.0 / (var + NORM_EPS).sqrt();
                inv_std[[r, g]] = is;
                xhat.slice_mut(s![rows.clone(), g * cg..(g + 1) * cg])
                    .assign(&block.mapv(|v| (v - mean) * is));
            }
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, NormCache { xhat, inv_std })
    }

    pub(crate) fn backward(&self, cache: &NormCache, dy: &Array2<f64>, grad: &mut Norm) -> Array2<f64> {
        let (n, c) = dy.dim();
        let cg = c / self.groups;
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::zeros((n, c));
        let stat_rows = cache.inv_std.nrows();
        for r in 0..stat_rows {
            let rows = if self.per_token { r..r + 1 } else { 0..n };
            for g in 0..self.groups {
                let sl = s![rows.clone(), g * cg..(g + 1) * cg];
                let dh = dxhat.slice(sl);
                let xh = cache.xhat.slice(sl);
                let count = dh.len() as f64;
                let mean_dh = dh.sum() / count;
                let mean_dhx = (&dh * &xh).sum() / count;
                let is = cache.inv_std[[r, g]];
                let block = (&dh - mean_dh - &(&xh * mean_dhx)) * is;
                dx.slice_mut(sl).assign(&block);
            }
        }
        dx
    }
}

impl Params for Norm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "gamma"), self.gamma.view().into_dyn());
        f(&join(prefix, "beta"), self.beta.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "gamma"), self.gamma.view_mut().into_dyn());
        f(&join(prefix, "beta"), self.beta.view_mut().into_dyn());
    }
}

/// Sinusoidal timestep features of even width `dim`.
pub(crate) fn timestep_features(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// GroupNorm → SiLU → conv → (+ time projection) → GroupNorm → SiLU → conv,
/// plus a (1×1 projected when widths differ) skip connection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResBlock {
    pub norm1: Norm,
    pub conv1: Conv2d,
    pub time_proj: Linear,
    pub norm2: Norm,
    pub conv2: Conv2d,
    pub skip: Option<Linear>,
}

pub(crate) struct ResCache {
    x: Array2<f64>,
    n1: NormCache,
    a1: Array2<f64>,
    c1: ConvCache,
    temb_act: Array2<f64>,
    n2: NormCache,
    a2: Array2<f64>,
    c2: ConvCache,
}

impl ResBlock {
    pub fn init(rng: &mut impl Rng, c_in: usize, c_out: usize, temb_dim: usize, groups: usize) -> Self {
        Self {
            norm1: Norm::group(c_in, groups),
            conv1: Conv2d::init(rng, c_in, c_out, 1, 1.0),
            time_proj: Linear::init_normal(rng, temb_dim, c_out, 1.0),
            norm2: Norm::group(c_out, groups),
            conv2: Conv2d::init(rng, c_out, c_out, 1, 0.5),
            skip: (c_in != c_out).then(|| Linear::init_normal(rng, c_in, c_out, 1.0)),
        }
    }

    /// `temb_act` is SiLU of the shared time embedding, shape `[1 × temb_dim]`.
    pub(crate) fn forward(
        &self,
        x: &Array2<f64>,
        h: usize,
        w: usize,
        temb_act: &Array2<f64>,
    ) -> (Array2<f64>, ResCache) {
        let (y1, n1) = self.norm1.forward(x);
        let s1 = silu(&y1);
        let (mut h1, _, c1) = self.conv1.forward(&s1, h, w);
        let tp = self.time_proj.forward(temb_act.view());
        h1 += &tp.row(0);
        let (y2, n2) = self.norm2.forward(&h1);
        let s2 = silu(&y2);
        let (h2, _, c2) = self.conv2.forward(&s2, h, w);
        let skip = match &self.skip {
            Some(l) => l.forward(x.view()),
            None => x.clone(),
        };
        (
            skip + h2,
            ResCache {
                x: x.clone(),
                n1,
                a1: y1,
                c1,
                temb_act: temb_act.clone(),
                n2,
                a2: y2,
                c2,
            },
        )
    }

    /// Returns `(dx, d temb_act)`.
    pub(crate) fn backward(
        &self,
        cache: &ResCache,
        dy: &Array2<f64>,
        grad: &mut ResBlock,
    ) -> (Array2<f64>, Array2<f64>) {
        let mut dx = match (&self.skip, &mut grad.skip) {
            (Some(l), Some(g)) => l.backward(cache.x.view(), dy.view(), g),
            _ => dy.clone(),
        };
        let ds2 = self.conv2.backward(&cache.c2, dy, &mut grad.conv2);
        let dy2 = silu_bwd(&cache.a2, &ds2);
        let dh1 = self.norm2.backward(&cache.n2, &dy2, &mut grad.norm2);
        let dtp = dh1.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dtemb = self
            .time_proj
            .backward(cache.temb_act.view(), dtp.view(), &mut grad.time_proj);
        let ds1 = self.conv1.backward(&cache.c1, &dh1, &mut grad.conv1);
        let dy1 = silu_bwd(&cache.a1, &ds1);
        dx += &self.norm1.backward(&cache.n1, &dy1, &mut grad.norm1);
        (dx, dtemb)
    }
}

impl Params for ResBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.time_proj.visit(&join(prefix, "time_proj"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(s) = &self.skip {
            s.visit(&join(prefix, "skip"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.time_proj.visit_mut(&join(prefix, "time_proj"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(&join(prefix, "skip"), f);
        }
    }
}

/// Nearest-neighbour ×2 upsampling of a token-major map.
pub(crate) fn upsample2(x: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let c = x.ncols();
    Array2::from_shape_fn((4 * h * w, c), |(i, ch)| {
        let (y, xx) = (i / (2 * w), i % (2 * w));
        x[[(y / 2) * w + xx / 2, ch]]
    })
}

pub(crate) fn upsample2_bwd(dy: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let c = dy.ncols();
    let mut dx = Array2::zeros((h * w, c));
    for (i, row) in dy.outer_iter().enumerate() {
        let (y, xx) = (i / (2 * w), i % (2 * w));
        let mut dst = dx.row_mut((y / 2) * w + xx / 2);
        dst += &row;
    }
    dx
}
