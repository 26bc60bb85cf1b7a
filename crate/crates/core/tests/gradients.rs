mod common;

use common::gradcheck::{self, Errors};
use common::*;
use idfusion::attention::{AdainMeanOp, MixedAttentionOp, Stream, StyleAlignMode};
use ndarray::{array, Array2};

const TOL: f64 = 1e-4;

fn assert_within(run: fn(&mut Errors)) {
    let mut errs = Errors::default();
    run(&mut errs);
    assert!(!errs.0.is_empty());
    for (name, err) in &errs.0 {
        assert!(*err <= TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn sdpa_gradients() {
    assert_within(gradcheck::sdpa_gradients);
}

#[test]
fn channel_mean_gradient() {
    assert_within(gradcheck::channel_mean_gradient);
}

#[test]
fn adain_gradients() {
    assert_within(gradcheck::adain_gradients);
}

#[test]
fn mixed_attention_gradients() {
    assert_within(gradcheck::mixed_attention_gradients);
}

#[test]
fn mutual_attention_gradients() {
    assert_within(gradcheck::mutual_attention_gradients);
}

#[test]
fn cross_attention_merge_gradients() {
    assert_within(gradcheck::cross_attention_merge_gradients);
}

#[test]
fn mapper_gradients() {
    assert_within(gradcheck::mapper_gradients);
}

#[test]
fn adain_mean_gradient_is_centering_projection() {
    // A constant upstream gradient has zero mean deviation, so nothing
    // reaches x; y receives the per-channel column sums spread evenly.
    let mut r = stream(130);
    let (x, y) = (matrix(&mut r, 3, 2), matrix(&mut r, 4, 2));
    let mut op = AdainMeanOp::new();
    op.forward(&fm(x, Stream::Identity), &fm(y, Stream::Text)).unwrap();
    let (gx, gy) = op.backward(&Array2::from_elem((3, 2), 1.0)).unwrap();
    assert!(gx.iter().all(|v| v.abs() < 1e-15));
    assert!(gy.iter().all(|v| (v - 0.75).abs() < 1e-15));
    let up = array![[1.0, 0.0], [0.0, 0.0], [-4.0, 3.0]];
    let (gx, _) = op.backward(&up).unwrap();
    // (I − 11ᵀ/n) applied per column.
    let want = array![[2.0, -1.0], [1.0, -1.0], [-3.0, 2.0]];
    assert!(max_abs_diff(&gx, &want) < 1e-12);
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut r = stream(131);
    let x = instance(&mut r, 2);
    let mut op = MixedAttentionOp::new(StyleAlignMode::Adain);
    let out = op
        .forward(&fm(x.z_id, Stream::Identity), &fm(x.z_t, Stream::Text), &x.proj_id, &x.proj_t)
        .unwrap();
    let g = op.backward(&Array2::zeros(out.data().dim())).unwrap();
    for a in [&g.z_id, &g.z_t, &g.proj_id.w_q, &g.proj_id.w_k, &g.proj_t.w_v] {
        assert!(a.iter().all(|v| *v == 0.0));
    }
}
