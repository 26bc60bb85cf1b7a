mod common;

use approx::assert_abs_diff_eq;
use common::*;
use idfusion::attention::{
    adain, adain_mean, attention_weights, channel_mean, cross_attention_merge, mixed_attention,
    mutual_attention, scaled_dot_product_attention, FeatureMatrix, Stream, StyleAlignMode,
};
use idfusion::Error;
use ndarray::{array, s, Array2, Axis};
use proptest::prelude::*;

#[test]
fn mixed_attention_matches_concat_oracle() {
    assert!(mixed_oracle_max_diff(300, 1) <= 1e-6);
}

#[test]
fn mutual_attention_matches_replace_oracle() {
    assert!(mutual_oracle_max_diff(100, 2) <= 1e-6);
}

#[test]
fn merge_matches_sum_of_branches_oracle() {
    assert!(merge_oracle_max_diff(300, 3) <= 1e-6);
}

#[test]
fn adain_invariants_hold() {
    let (mean_err, full_err) = adain_invariant_errors(200, 4);
    assert!(mean_err <= 1e-9, "{mean_err}");
    assert!(full_err <= 1e-6, "{full_err}");
}

#[test]
fn hand_cases() {
    let id = |a: Array2<f64>| fm(a, Stream::Identity);
    let out = scaled_dot_product_attention(&id(array![[1.]]), &id(array![[1.], [0.]]), &id(array![[1.], [0.]]))
        .unwrap();
    let e = std::f64::consts::E;
    assert_abs_diff_eq!(out.data()[[0, 0]], e / (e + 1.0), epsilon = 1e-12);

    let x = adain_mean(&id(array![[1.], [2.], [3.]]), &id(array![[4.], [5.], [9.]])).unwrap();
    assert_eq!(x.data(), &array![[5.], [6.], [7.]]);

    let x = adain(&id(array![[0.], [2.]]), &id(array![[10.], [14.]])).unwrap();
    assert!(max_abs_diff(x.data(), &array![[10.], [14.]]) <= 1e-12);

    assert_eq!(channel_mean(&id(array![[1., -1.], [-1., 1.]])).unwrap(), array![0., 0.]);
}

#[test]
fn mixed_with_empty_text_is_self_attention() {
    let mut r = stream(10);
    let x = instance(&mut r, 1);
    let empty = FeatureMatrix::empty(x.z_t.ncols(), Stream::Text);
    let got = mixed_attention(&fm(x.z_id.clone(), Stream::Identity), &empty, &x.proj_id, &x.proj_t, StyleAlignMode::Off)
        .unwrap();
    let p = &x.proj_id;
    let want = naive_attention(&x.z_id.dot(&p.w_q), &x.z_id.dot(&p.w_k), &x.z_id.dot(&p.w_v));
    assert!(max_abs_diff(got.data(), &want) <= 1e-12);
}

#[test]
fn mutual_with_own_features_is_self_attention() {
    let mut r = stream(11);
    let x = instance(&mut r, 1);
    let z = fm(x.z_id.clone(), Stream::Identity);
    let got = mutual_attention(&z, &fm(x.z_id.clone(), Stream::Text), &x.proj_id, &x.proj_id).unwrap();
    let p = &x.proj_id;
    let want = naive_attention(&x.z_id.dot(&p.w_q), &x.z_id.dot(&p.w_k), &x.z_id.dot(&p.w_v));
    assert!(max_abs_diff(got.data(), &want) <= 1e-12);
    assert!(matches!(
        mutual_attention(&z, &FeatureMatrix::empty(x.z_id.ncols(), Stream::Text), &x.proj_id, &x.proj_t),
        Err(Error::UndefinedSoftmax)
    ));
}

#[test]
fn duplicated_merge_branches_double_the_output() {
    let mut r = stream(12);
    let x = instance(&mut r, 1);
    let q = matrix(&mut r, 3, x.proj_id.d_k());
    let c = fm(x.z_t.clone(), Stream::Text);
    let merged = cross_attention_merge(&fm(q.clone(), Stream::Identity), &c, &c, &x.proj_t, &x.proj_t, StyleAlignMode::Off)
        .unwrap();
    let single = naive_attention(&q, &x.z_t.dot(&x.proj_t.w_k), &x.z_t.dot(&x.proj_t.w_v));
    assert!(max_abs_diff(merged.data(), &(single * 2.0)) <= 1e-12);
}

#[test]
fn shape_errors_are_reported() {
    let mut r = stream(13);
    let x = instance(&mut r, 1);
    let wrong = fm(matrix(&mut r, 2, x.z_id.ncols() + 1), Stream::Text);
    let err = mixed_attention(&fm(x.z_id.clone(), Stream::Identity), &wrong, &x.proj_id, &x.proj_t, StyleAlignMode::Off)
        .unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
    let flat = fm(Array2::from_elem((3, 2), 1.0), Stream::Identity);
    let y = fm(matrix(&mut r, 3, 2), Stream::Text);
    assert!(matches!(adain(&flat, &y), Err(Error::DegenerateStatistics { .. })));
    assert!(FeatureMatrix::new(Array2::zeros((0, 2)), Stream::Text).is_err());
    assert!(FeatureMatrix::new(array![[f64::NAN]], Stream::Text).is_err());
}

fn finite_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(n, c)| {
        prop::collection::vec(-3.0f64..3.0, n * c)
            .prop_map(move |v| Array2::from_shape_vec((n, c), v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weight_rows_sum_to_one(q in finite_matrix(6, 5), n_k in 1usize..7, seed in any::<u64>()) {
        let mut r = stream(seed);
        let k = matrix(&mut r, n_k, q.ncols()) * 3.0;
        let w = attention_weights(&fm(q, Stream::Identity), &fm(k, Stream::Text)).unwrap();
        for s in w.sum_axis(Axis(1)) {
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn adain_mean_is_idempotent_and_keeps_deviations(
        x in finite_matrix(6, 4),
        n_y in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut r = stream(seed);
        let y = fm(matrix(&mut r, n_y, x.ncols()), Stream::Text);
        let fx = fm(x.clone(), Stream::Identity);
        let once = adain_mean(&fx, &y).unwrap();
        let twice = adain_mean(&once, &y).unwrap();
        prop_assert!(max_abs_diff(once.data(), twice.data()) <= 1e-12);
        let dev_out = once.data() - &channel_mean(&once).unwrap();
        let dev_x = &x - &channel_mean(&fx).unwrap();
        prop_assert!(max_abs_diff(&dev_out, &dev_x) <= 1e-12);
    }

    #[test]
    fn mixed_attention_ignores_text_token_order(seed in any::<u64>(), style_ix in 0usize..3) {
        let style = STYLES[style_ix];
        let mut r = stream(seed);
        let x = instance(&mut r, min_tokens(style));
        let z_id = fm(x.z_id.clone(), Stream::Identity);
        let mut rev = x.z_t.clone();
        rev.invert_axis(Axis(0));
        let a = mixed_attention(&z_id, &fm(x.z_t.clone(), Stream::Text), &x.proj_id, &x.proj_t, style).unwrap();
        let b = mixed_attention(&z_id, &fm(rev, Stream::Text), &x.proj_id, &x.proj_t, style).unwrap();
        prop_assert!(max_abs_diff(a.data(), b.data()) <= 1e-6);
    }

    #[test]
    fn merge_style_shift_matches_text_key_means(seed in any::<u64>()) {
        let mut r = stream(seed);
        let x = instance(&mut r, 1);
        let q = matrix(&mut r, 2, x.proj_id.d_k());
        let mut op = idfusion::attention::CrossAttentionMergeOp::new(StyleAlignMode::AdainMean);
        op.forward(
            &fm(q, Stream::Identity),
            &fm(x.z_id.clone(), Stream::Identity),
            &fm(x.z_t.clone(), Stream::Text),
            &x.proj_id,
            &x.proj_t,
        ).unwrap();
        let ((k_id, v_id), (k_t, v_t)) = op.projected_kv().unwrap();
        let m = |a: &Array2<f64>| a.mean_axis(Axis(0)).unwrap();
        prop_assert!((m(k_id) - m(k_t)).iter().all(|d| d.abs() <= 1e-9));
        prop_assert!((m(v_id) - m(v_t)).iter().all(|d| d.abs() <= 1e-9));
    }

    #[test]
    fn outputs_keep_query_token_count(seed in any::<u64>()) {
        let mut r = stream(seed);
        let x = instance(&mut r, 1);
        let z_id = fm(x.z_id.clone(), Stream::Identity);
        let z_t = fm(x.z_t.clone(), Stream::Text);
        let a = mutual_attention(&z_id, &z_t, &x.proj_id, &x.proj_t).unwrap();
        prop_assert_eq!(a.n_tokens(), x.z_id.nrows());
        prop_assert_eq!(a.n_channels(), x.proj_t.d_v());
        let head = x.z_id.slice(s![..1, ..]).to_owned();
        let b = mixed_attention(&fm(head, Stream::Identity), &z_t, &x.proj_id, &x.proj_t, StyleAlignMode::Off).unwrap();
        prop_assert_eq!(b.n_tokens(), 1);
    }
}
