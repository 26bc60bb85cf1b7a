//! Helpers shared by the integration tests: naive reference implementations,
//! a finite-difference checker and tiny model configurations.

#![allow(dead_code)]

pub mod gradcheck;

use idfusion::attention::{
    adain, adain_mean, channel_mean, channel_std, cross_attention_merge, mixed_attention,
    mutual_attention, AttentionProjections, FeatureMatrix, Stream, StyleAlignMode,
};
use idfusion::diffusion::UNetConfig;
use idfusion::model::ModelConfig;
use idfusion::rng;
use ndarray::{concatenate, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn stream(seed: u64) -> ChaCha8Rng {
    rng::stream(seed, "integration-tests")
}

pub fn matrix(r: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    rng::normal(r, (rows, cols), 1.0)
}

pub fn fm(a: Array2<f64>, stream: Stream) -> FeatureMatrix {
    FeatureMatrix::new(a, stream).unwrap()
}

pub fn projections(r: &mut impl Rng, c: usize, d_k: usize, d_v: usize) -> AttentionProjections {
    let s = 1.0 / (c as f64).sqrt();
    AttentionProjections::new(
        matrix(r, c, d_k) * s,
        matrix(r, c, d_k) * s,
        matrix(r, c, d_v) * s,
    )
    .unwrap()
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Attention written out with loops and no shared code.
pub fn naive_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
    let d = k.ncols() as f64;
    let mut out = Array2::zeros((q.nrows(), v.ncols()));
    for i in 0..q.nrows() {
        let logits: Vec<f64> = (0..k.nrows())
            .map(|j| (0..k.ncols()).map(|c| q[[i, c]] * k[[j, c]]).sum::<f64>() / d.sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = w.iter().sum();
        for j in 0..k.nrows() {
            for c in 0..v.ncols() {
                out[[i, c]] += w[j] / z * v[[j, c]];
            }
        }
    }
    out
}

fn naive_mean(x: &Array2<f64>) -> Array1<f64> {
    let n = x.nrows() as f64;
    Array1::from_shape_fn(x.ncols(), |c| (0..x.nrows()).map(|i| x[[i, c]]).sum::<f64>() / n)
}

fn naive_std(x: &Array2<f64>) -> Array1<f64> {
    let m = naive_mean(x);
    let n = x.nrows() as f64;
    Array1::from_shape_fn(x.ncols(), |c| {
        ((0..x.nrows()).map(|i| (x[[i, c]] - m[c]).powi(2)).sum::<f64>() / n).sqrt()
    })
}

/// The style shift applied to identity keys/values before attending.
pub fn naive_align(x: &Array2<f64>, y: &Array2<f64>, style: StyleAlignMode) -> Array2<f64> {
    let (mx, my) = (naive_mean(x), naive_mean(y));
    match style {
        StyleAlignMode::Off => x.clone(),
        StyleAlignMode::AdainMean => Array2::from_shape_fn(x.dim(), |(i, c)| x[[i, c]] - mx[c] + my[c]),
        StyleAlignMode::Adain => {
            let (sx, sy) = (naive_std(x), naive_std(y));
            Array2::from_shape_fn(x.dim(), |(i, c)| sy[c] * (x[[i, c]] - mx[c]) / sx[c] + my[c])
        }
    }
}

pub fn min_tokens(s: StyleAlignMode) -> usize {
    if s == StyleAlignMode::Adain {
        2
    } else {
        1
    }
}

pub const STYLES: [StyleAlignMode; 3] = [StyleAlignMode::Off, StyleAlignMode::AdainMean, StyleAlignMode::Adain];

/// Random sizes in the ranges the oracle suite uses.
pub struct Instance {
    pub z_id: Array2<f64>,
    pub z_t: Array2<f64>,
    pub proj_id: AttentionProjections,
    pub proj_t: AttentionProjections,
}

/// Token counts in `[min_tokens, 8]`, channels in `[1, 16]`. AdaIN needs
/// two or more tokens per stream to keep σ away from zero.
pub fn instance(r: &mut impl Rng, min_tokens: usize) -> Instance {
    let c = r.random_range(1..=16);
    let d_k = r.random_range(1..=16);
    let d_v = r.random_range(1..=16);
    let n_id = r.random_range(min_tokens..=8);
    let n_t = r.random_range(min_tokens..=8);
    Instance {
        z_id: matrix(r, n_id, c),
        z_t: matrix(r, n_t, c),
        proj_id: projections(r, c, d_k, d_v),
        proj_t: projections(r, c, d_k, d_v),
    }
}

/// Largest deviation of `mixed_attention` from concat-then-attend over
/// `n` random instances, every style mode included.
pub fn mixed_oracle_max_diff(n: usize, seed: u64) -> f64 {
    let mut r = stream(seed);
    let mut worst = 0.0f64;
    for i in 0..n {
        let s = STYLES[i % 3];
        let x = instance(&mut r, min_tokens(s));
        let got = mixed_attention(
            &fm(x.z_id.clone(), Stream::Identity),
            &fm(x.z_t.clone(), Stream::Text),
            &x.proj_id,
            &x.proj_t,
            s,
        )
        .unwrap();
        let q = x.z_id.dot(&x.proj_id.w_q);
        let (k_t, v_t) = (x.z_t.dot(&x.proj_t.w_k), x.z_t.dot(&x.proj_t.w_v));
        let k_id = naive_align(&x.z_id.dot(&x.proj_id.w_k), &k_t, s);
        let v_id = naive_align(&x.z_id.dot(&x.proj_id.w_v), &v_t, s);
        let want = naive_attention(
            &q,
            &concatenate![Axis(0), k_id, k_t],
            &concatenate![Axis(0), v_id, v_t],
        );
        worst = worst.max(max_abs_diff(got.data(), &want));
    }
    worst
}

pub fn mutual_oracle_max_diff(n: usize, seed: u64) -> f64 {
    let mut r = stream(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let x = instance(&mut r, 1);
        let got = mutual_attention(
            &fm(x.z_id.clone(), Stream::Identity),
            &fm(x.z_t.clone(), Stream::Text),
            &x.proj_id,
            &x.proj_t,
        )
        .unwrap();
        let want = naive_attention(
            &x.z_id.dot(&x.proj_id.w_q),
            &x.z_t.dot(&x.proj_t.w_k),
            &x.z_t.dot(&x.proj_t.w_v),
        );
        worst = worst.max(max_abs_diff(got.data(), &want));
    }
    worst
}

/// `cross_attention_merge` against the sum of two independently computed
/// branches, every style mode included.
pub fn merge_oracle_max_diff(n: usize, seed: u64) -> f64 {
    let mut r = stream(seed);
    let mut worst = 0.0f64;
    for i in 0..n {
        let s = STYLES[i % 3];
        let x = instance(&mut r, min_tokens(s));
        let n_q = r.random_range(1..=8);
        let q = matrix(&mut r, n_q, x.proj_id.d_k());
        let got = cross_attention_merge(
            &fm(q.clone(), Stream::Identity),
            &fm(x.z_id.clone(), Stream::Identity),
            &fm(x.z_t.clone(), Stream::Text),
            &x.proj_id,
            &x.proj_t,
            s,
        )
        .unwrap();
        let (k_t, v_t) = (x.z_t.dot(&x.proj_t.w_k), x.z_t.dot(&x.proj_t.w_v));
        let k_id = naive_align(&x.z_id.dot(&x.proj_id.w_k), &k_t, s);
        let v_id = naive_align(&x.z_id.dot(&x.proj_id.w_v), &v_t, s);
        let want = naive_attention(&q, &k_id, &v_id) + naive_attention(&q, &k_t, &v_t);
        worst = worst.max(max_abs_diff(got.data(), &want));
    }
    worst
}

/// Worst violations of the AdaIN-mean and AdaIN invariants over `n` random
/// pairs: `(mean_only, full)`.
pub fn adain_invariant_errors(n: usize, seed: u64) -> (f64, f64) {
    let mut r = stream(seed);
    let (mut mean_err, mut full_err) = (0.0f64, 0.0f64);
    for _ in 0..n {
        let c = r.random_range(1..=16);
        let (nx, ny) = (r.random_range(2..=8), r.random_range(2..=8));
        let x = matrix(&mut r, nx, c) * 3.0 + 1.0;
        let y = matrix(&mut r, ny, c) * 0.5 - 2.0;
        let (fx, fy) = (fm(x.clone(), Stream::Identity), fm(y.clone(), Stream::Text));

        // x − μ(x) + μ(y): identity on x = y, target mean, kept deviations.
        let same = adain_mean(&fx, &fx).unwrap();
        mean_err = mean_err.max(max_abs_diff(same.data(), &x));
        let out = adain_mean(&fx, &fy).unwrap();
        let mo = channel_mean(&out).unwrap();
        let my = channel_mean(&fy).unwrap();
        mean_err = mean_err.max((&mo - &my).mapv(f64::abs).fold(0.0, |a, &b| a.max(b)));
        let dev_out = out.data() - &mo;
        let dev_x = &x - &channel_mean(&fx).unwrap();
        mean_err = mean_err.max(max_abs_diff(&dev_out, &dev_x));

        let full = adain(&fx, &fy).unwrap();
        let mf = channel_mean(&full).unwrap();
        let sf = channel_std(&full).unwrap();
        let sy = channel_std(&fy).unwrap();
        full_err = full_err.max((&mf - &my).mapv(f64::abs).fold(0.0, |a, &b| a.max(b)));
        full_err = full_err.max((&sf - &sy).mapv(f64::abs).fold(0.0, |a, &b| a.max(b)));
    }
    (mean_err, full_err)
}

/// Norm-wise relative error between an analytic gradient and central
/// differences of `f` around `x`.
pub fn fd_relative_error(
    x: &Array2<f64>,
    analytic: &Array2<f64>,
    mut f: impl FnMut(&Array2<f64>) -> f64,
) -> f64 {
    const H: f64 = 1e-5;
    let mut numeric = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (i, j) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[i, j]];
        probe[[i, j]] = orig + H;
        let up = f(&probe);
        probe[[i, j]] = orig - H;
        let down = f(&probe);
        probe[[i, j]] = orig;
        numeric[[i, j]] = (up - down) / (2.0 * H);
    }
    let diff = (analytic - &numeric).mapv(|v| v * v).sum().sqrt();
    let scale = analytic
        .mapv(|v| v * v)
        .sum()
        .sqrt()
        .max(numeric.mapv(|v| v * v).sum().sqrt());
    // Below this norm both sides are rounding noise (e.g. a projection that
    // AdaIN makes irrelevant), so compare absolutely.
    if scale < 1e-6 {
        diff
    } else {
        diff / scale
    }
}

/// `Σ out ⊙ w`, the scalar loss the gradient checks differentiate.
pub fn contract(out: &Array2<f64>, w: &Array2<f64>) -> f64 {
    (out * w).sum()
}

/// A model small enough to pretrain and sample in seconds.
pub fn tiny_model_config() -> ModelConfig {
    let mut m = ModelConfig {
        image_size: 16,
        unet: UNetConfig {
            latent_size: 8,
            latent_channels: 4,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            attention_resolutions: vec![8, 4],
            d_model: 16,
            head_count: 2,
            norm_groups: 4,
        },
        ..ModelConfig::default()
    };
    m.encoders.align_size = 16;
    m.encoders.input_grid = 8;
    m.encoders.clip_dim = 8;
    m.encoders.face_dim = 8;
    m.pretrain.steps = 20;
    m.pretrain.n_identities = 4;
    m.pretrain.variants_per_identity = 2;
    m
}

/// TOML form of the tiny configuration plus small data/training settings.
pub fn tiny_run_config() -> idfusion::config::RunConfig {
    let mut c = idfusion::config::RunConfig {
        model: tiny_model_config(),
        ..Default::default()
    };
    c.data.image_size = 16;
    c.data.n_identities = 3;
    c.data.variants_per_identity = 2;
    c.train.steps = 6;
    c.train.batch_size = 2;
    c.inference.steps = 4;
    c
}

/// Runs the deterministic sampler from `z_T` down to `t = 0` with a predictor
/// that always returns the noise actually used; the result should be `z0`.
pub fn perfect_predictor_chain_error(
    sched: &idfusion::diffusion::NoiseSchedule,
    n_steps: usize,
    seed: u64,
) -> f64 {
    use idfusion::diffusion::{ddim_step, ddim_timesteps, q_sample, LatentTensor};
    let latent = |s: u64| LatentTensor::new(rng::normal(&mut stream(s), (8, 8, 4), 1.0)).unwrap();
    let (z0, eps) = (latent(seed), latent(seed.wrapping_add(1)));
    let mut z = q_sample(&z0, sched.steps(), &eps, sched).unwrap();
    for (t, t_prev) in ddim_timesteps(sched, n_steps).unwrap() {
        z = ddim_step(&z, &eps, t, t_prev, sched).unwrap();
    }
    z.data().iter().zip(z0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}
