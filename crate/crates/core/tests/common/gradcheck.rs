//! Analytic-versus-finite-difference checks for every attention op and the
//! identity mappers. Each check records the norm-wise relative error.

use super::*;
use idfusion::attention::{
    AdainMeanOp, AdainOp, AttentionProjections, ChannelMeanOp, CrossAttentionMergeOp,
    MixedAttentionOp, MutualAttentionOp, SdpaOp, Stream,
};
use idfusion::identity::{IdentityFeatures, MapperWeights};
use idfusion::nn::Params;
use ndarray::{Array1, Array2};

#[derive(Debug, Default)]
pub struct Errors(pub Vec<(String, f64)>);

impl Errors {
    pub fn push(&mut self, name: &str, err: f64) {
        self.0.push((name.to_string(), err));
    }

    pub fn worst(&self) -> (String, f64) {
        self.0
            .iter()
            .cloned()
            .fold((String::new(), 0.0), |a, b| if b.1 > a.1 || b.1.is_nan() { b } else { a })
    }
}

/// Runs every check.
pub fn all(errs: &mut Errors) {
    sdpa_gradients(errs);
    channel_mean_gradient(errs);
    adain_gradients(errs);
    mixed_attention_gradients(errs);
    mutual_attention_gradients(errs);
    cross_attention_merge_gradients(errs);
    mapper_gradients(errs);
}



pub fn sdpa_gradients(errs: &mut Errors) {
    for seed in 0..5 {
        let mut r = stream(100 + seed);
        let (q, k, v) = (matrix(&mut r, 3, 4), matrix(&mut r, 2, 4), matrix(&mut r, 2, 3));
        let w = matrix(&mut r, 3, 3);
        let mut op = SdpaOp::new();
        op.forward(&fm(q.clone(), Stream::Identity), &fm(k.clone(), Stream::Text), &fm(v.clone(), Stream::Text))
            .unwrap();
        let g = op.backward(&w).unwrap();
        let f = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| {
            let out = SdpaOp::new()
                .forward(&fm(q.clone(), Stream::Identity), &fm(k.clone(), Stream::Text), &fm(v.clone(), Stream::Text))
                .unwrap();
            contract(out.data(), &w)
        };
        errs.push("sdpa q", fd_relative_error(&q, &g.q, |x| f(x, &k, &v)));
        errs.push("sdpa k", fd_relative_error(&k, &g.k, |x| f(&q, x, &v)));
        errs.push("sdpa v", fd_relative_error(&v, &g.v, |x| f(&q, &k, x)));
    }
}

pub fn channel_mean_gradient(errs: &mut Errors) {
    let mut r = stream(110);
    let x = matrix(&mut r, 4, 3);
    let w = Array1::from(vec![0.3, -1.2, 2.0]);
    let mut op = ChannelMeanOp::new();
    op.forward(&fm(x.clone(), Stream::Identity)).unwrap();
    let g = op.backward(&w).unwrap();
    let err = fd_relative_error(&x, &g, |x| {
        ChannelMeanOp::new().forward(&fm(x.clone(), Stream::Identity)).unwrap().dot(&w)
    });
    errs.push("channel_mean", err);
}

pub fn adain_gradients(errs: &mut Errors) {
    for seed in 0..5 {
        let mut r = stream(120 + seed);
        let (x, y) = (matrix(&mut r, 4, 3), matrix(&mut r, 5, 3));
        let w = matrix(&mut r, 4, 3);
        for full in [false, true] {
            let run = |x: &Array2<f64>, y: &Array2<f64>| {
                let (fx, fy) = (fm(x.clone(), Stream::Identity), fm(y.clone(), Stream::Text));
                if full {
                    AdainOp::new().forward(&fx, &fy).unwrap()
                } else {
                    AdainMeanOp::new().forward(&fx, &fy).unwrap()
                }
            };
            let (fx, fy) = (fm(x.clone(), Stream::Identity), fm(y.clone(), Stream::Text));
            let (gx, gy) = if full {
                let mut op = AdainOp::new();
                op.forward(&fx, &fy).unwrap();
                op.backward(&w).unwrap()
            } else {
                let mut op = AdainMeanOp::new();
                op.forward(&fx, &fy).unwrap();
                op.backward(&w).unwrap()
            };
            errs.push("adain x", fd_relative_error(&x, &gx, |x| contract(run(x, &y).data(), &w)));
            errs.push("adain y", fd_relative_error(&y, &gy, |y| contract(run(&x, y).data(), &w)));
        }
    }
}



type PairRun<'a> = dyn Fn(&Array2<f64>, &Array2<f64>, &AttentionProjections, &AttentionProjections) -> Array2<f64> + 'a;

/// Checks every input and projection gradient of a two-stream op.
fn check_pair_op(
    errs: &mut Errors,
    name: &str,
    x: &Instance,
    w: &Array2<f64>,
    grads: &idfusion::attention::PairGrads,
    run: &PairRun<'_>,
) {
    let (zi, zt, pi, pt) = (&x.z_id, &x.z_t, &x.proj_id, &x.proj_t);
    errs.push(&format!("{name} z_id"), fd_relative_error(zi, &grads.z_id, |a| contract(&run(a, zt, pi, pt), w)));
    errs.push(&format!("{name} z_t"), fd_relative_error(zt, &grads.z_t, |a| contract(&run(zi, a, pi, pt), w)));
    let with = |p: &AttentionProjections, which: usize, a: &Array2<f64>| {
        let mut p = p.clone();
        match which {
            0 => p.w_q = a.clone(),
            1 => p.w_k = a.clone(),
            _ => p.w_v = a.clone(),
        }
        p
    };
    for (which, (gi, gt)) in [
        (&grads.proj_id.w_q, &grads.proj_t.w_q),
        (&grads.proj_id.w_k, &grads.proj_t.w_k),
        (&grads.proj_id.w_v, &grads.proj_t.w_v),
    ]
    .into_iter()
    .enumerate()
    {
        let base_i = [&pi.w_q, &pi.w_k, &pi.w_v][which];
        let base_t = [&pt.w_q, &pt.w_k, &pt.w_v][which];
        errs.push(
            &format!("{name} proj_id[{which}]"),
            fd_relative_error(base_i, gi, |a| contract(&run(zi, zt, &with(pi, which, a), pt), w)),
        );
        errs.push(
            &format!("{name} proj_t[{which}]"),
            fd_relative_error(base_t, gt, |a| contract(&run(zi, zt, pi, &with(pt, which, a)), w)),
        );
    }
}

pub fn mixed_attention_gradients(errs: &mut Errors) {
    for (i, style) in STYLES.into_iter().enumerate() {
        for seed in 0..3 {
            let mut r = stream(140 + 10 * i as u64 + seed);
            let x = instance(&mut r, 2);
            let run = |zi: &Array2<f64>, zt: &Array2<f64>, pi: &AttentionProjections, pt: &AttentionProjections| {
                MixedAttentionOp::new(style)
                    .forward(&fm(zi.clone(), Stream::Identity), &fm(zt.clone(), Stream::Text), pi, pt)
                    .unwrap()
                    .into_data()
            };
            let w = matrix(&mut r, x.z_id.nrows(), x.proj_id.d_v());
            let mut op = MixedAttentionOp::new(style);
            op.forward(&fm(x.z_id.clone(), Stream::Identity), &fm(x.z_t.clone(), Stream::Text), &x.proj_id, &x.proj_t)
                .unwrap();
            let g = op.backward(&w).unwrap();
            check_pair_op(errs, &format!("mixed {style:?}"), &x, &w, &g, &run);
        }
    }
}

pub fn mutual_attention_gradients(errs: &mut Errors) {
    for seed in 0..3 {
        let mut r = stream(170 + seed);
        let x = instance(&mut r, 1);
        let run = |zi: &Array2<f64>, zt: &Array2<f64>, pi: &AttentionProjections, pt: &AttentionProjections| {
            MutualAttentionOp::new()
                .forward(&fm(zi.clone(), Stream::Identity), &fm(zt.clone(), Stream::Text), pi, pt)
                .unwrap()
                .into_data()
        };
        let w = matrix(&mut r, x.z_id.nrows(), x.proj_id.d_v());
        let mut op = MutualAttentionOp::new();
        op.forward(&fm(x.z_id.clone(), Stream::Identity), &fm(x.z_t.clone(), Stream::Text), &x.proj_id, &x.proj_t)
            .unwrap();
        let g = op.backward(&w).unwrap();
        check_pair_op(errs, "mutual", &x, &w, &g, &run);
    }
}

pub fn cross_attention_merge_gradients(errs: &mut Errors) {
    for (i, style) in STYLES.into_iter().enumerate() {
        let mut r = stream(180 + i as u64);
        let x = instance(&mut r, 2);
        let q = matrix(&mut r, 3, x.proj_id.d_k());
        let w = matrix(&mut r, 3, x.proj_id.d_v());
        let run = |q: &Array2<f64>, ci: &Array2<f64>, ct: &Array2<f64>, pi: &AttentionProjections, pt: &AttentionProjections| {
            let out = CrossAttentionMergeOp::new(style)
                .forward(
                    &fm(q.clone(), Stream::Identity),
                    &fm(ci.clone(), Stream::Identity),
                    &fm(ct.clone(), Stream::Text),
                    pi,
                    pt,
                )
                .unwrap();
            contract(out.data(), &w)
        };
        let mut op = CrossAttentionMergeOp::new(style);
        op.forward(
            &fm(q.clone(), Stream::Identity),
            &fm(x.z_id.clone(), Stream::Identity),
            &fm(x.z_t.clone(), Stream::Text),
            &x.proj_id,
            &x.proj_t,
        )
        .unwrap();
        let g = op.backward(&w).unwrap();
        let (ci, ct, pi, pt) = (&x.z_id, &x.z_t, &x.proj_id, &x.proj_t);
        let n = format!("merge {style:?}");
        errs.push(&n, fd_relative_error(&q, &g.q, |a| run(a, ci, ct, pi, pt)));
        errs.push(&n, fd_relative_error(ci, &g.c_id, |a| run(&q, a, ct, pi, pt)));
        errs.push(&n, fd_relative_error(ct, &g.c_t, |a| run(&q, ci, a, pi, pt)));
        let set_k = |p: &AttentionProjections, a: &Array2<f64>| AttentionProjections { w_k: a.clone(), ..p.clone() };
        let set_v = |p: &AttentionProjections, a: &Array2<f64>| AttentionProjections { w_v: a.clone(), ..p.clone() };
        errs.push(&n, fd_relative_error(&pi.w_k, &g.proj_id.w_k, |a| run(&q, ci, ct, &set_k(pi, a), pt)));
        errs.push(&n, fd_relative_error(&pi.w_v, &g.proj_id.w_v, |a| run(&q, ci, ct, &set_v(pi, a), pt)));
        errs.push(&n, fd_relative_error(&pt.w_k, &g.proj_t.w_k, |a| run(&q, ci, ct, pi, &set_k(pt, a))));
        errs.push(&n, fd_relative_error(&pt.w_v, &g.proj_t.w_v, |a| run(&q, ci, ct, pi, &set_v(pt, a))));
        let stray = g.proj_id.w_q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        errs.push(&format!("{n} w_q (must be zero)"), stray);
    }
}

pub fn mapper_gradients(errs: &mut Errors) {
    let mut r = stream(190);
    let features = IdentityFeatures {
        clip: matrix(&mut r, 4, 6),
        face: matrix(&mut r, 1, 5),
    };
    let mut mappers = MapperWeights::init(6, 5, 7, 3);
    // Non-trivial biases so their gradients are exercised away from zero.
    mappers.clip_mapper.b = Array1::from_shape_fn(7, |i| 0.1 * i as f64);
    let w = matrix(&mut r, 5, 7);
    let mut grad = mappers.clone();
    grad.fill_zero();
    mappers.backward(&features, w.view(), &mut grad);

    let loss = |m: &MapperWeights| contract(&m.map(&features).unwrap(), &w);
    let run_w = |which: usize, a: &Array2<f64>| {
        let mut m = mappers.clone();
        if which == 0 {
            m.clip_mapper.w = a.clone();
        } else {
            m.face_mapper.w = a.clone();
        }
        loss(&m)
    };
    errs.push("clip_mapper.w", fd_relative_error(&mappers.clip_mapper.w, &grad.clip_mapper.w, |a| run_w(0, a)));
    errs.push("face_mapper.w", fd_relative_error(&mappers.face_mapper.w, &grad.face_mapper.w, |a| run_w(1, a)));
    let as_row = |b: &Array1<f64>| b.clone().insert_axis(ndarray::Axis(0));
    let run_b = |which: usize, a: &Array2<f64>| {
        let mut m = mappers.clone();
        let b = a.row(0).to_owned();
        if which == 0 {
            m.clip_mapper.b = b;
        } else {
            m.face_mapper.b = b;
        }
        loss(&m)
    };
    errs.push(
        "clip_mapper.b",
        fd_relative_error(&as_row(&mappers.clip_mapper.b), &as_row(&grad.clip_mapper.b), |a| run_b(0, a)),
    );
    errs.push(
        "face_mapper.b",
        fd_relative_error(&as_row(&mappers.face_mapper.b), &as_row(&grad.face_mapper.b), |a| run_b(1, a)),
    );
}
