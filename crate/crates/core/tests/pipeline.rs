mod common;

use std::sync::OnceLock;

use common::{tiny_model_config, tiny_run_config};
use idfusion::checkpoint::CheckpointBundle;
use idfusion::image::Image;
use idfusion::inference::{generate, generate_latent, GenerationRequest, Variant};
use idfusion::model::Model;
use idfusion::synth::{generate_synthetic_dataset, SyntheticDataset};
use idfusion::train::{train, TrainMode};
use idfusion::Error;

fn base() -> &'static Model {
    static BASE: OnceLock<Model> = OnceLock::new();
    BASE.get_or_init(|| Model::pretrained(tiny_model_config()).unwrap())
}

fn data() -> &'static SyntheticDataset {
    static DATA: OnceLock<SyntheticDataset> = OnceLock::new();
    DATA.get_or_init(|| generate_synthetic_dataset(&tiny_run_config().data, base().face.as_ref()).unwrap())
}

/// The tiny base after a few adapter steps, so identity tokens matter.
fn trained() -> &'static Model {
    static TRAINED: OnceLock<Model> = OnceLock::new();
    TRAINED.get_or_init(|| {
        let mut m = base().clone();
        train(&mut m, data(), &tiny_run_config().train, None).unwrap();
        m
    })
}

fn face(i: usize) -> Image {
    data().identities[i].images[0].clone()
}

fn request(prompt: &str, ids: Vec<Image>, seed: u64) -> GenerationRequest {
    GenerationRequest::with_defaults(prompt, ids, seed, &tiny_run_config().inference)
}

#[test]
fn generation_is_deterministic() {
    let req = request("a face with red hair", vec![face(0)], 3);
    let (a, pa) = generate(trained(), &req).unwrap();
    let (b, pb) = generate(trained(), &req).unwrap();
    assert_eq!(a.png_bytes().unwrap(), b.png_bytes().unwrap());
    assert_eq!(pa, pb);
    let (c, _) = generate(trained(), &GenerationRequest { seed: 4, ..req }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn guidance_is_rederivable_from_the_record() {
    let mut req = request("a face with blue hair", vec![face(1)], 5);
    req.record_guidance = true;
    req.guidance_scale = 3.5;
    let (_, prov) = generate_latent(trained(), &req).unwrap();
    let records = prov.guidance.unwrap();
    assert_eq!(records.len(), req.steps);
    assert_eq!(prov.guidance_scope, "identity_stream");
    let mut worst = 0.0f64;
    for r in &records {
        for ((c, u), g) in r.eps_cond.iter().zip(&r.eps_uncond).zip(&r.eps_guided) {
            worst = worst.max((u + 3.5 * (c - u) - g).abs());
        }
        assert!(r.eps_cond != r.eps_uncond);
    }
    assert!(worst <= 1e-6, "{worst}");
}

#[test]
fn variants_are_recorded_and_differ() {
    let mut outputs = Vec::new();
    for v in [Variant::MixedAttention, Variant::NoMixedAttention, Variant::MutualAttention] {
        let mut req = request("a face with green hair", vec![face(0)], 7);
        req.variant = v;
        let (z, prov) = generate_latent(trained(), &req).unwrap();
        assert_eq!(prov.variant, v);
        let json = serde_json::to_string(&prov).unwrap();
        assert!(json.contains(v.name()));
        let want = if v == Variant::NoMixedAttention { 0 } else { req.steps };
        assert_eq!(prov.capture_sets_consumed, want);
        outputs.push(z);
    }
    assert_ne!(outputs[0], outputs[1]);
    assert_ne!(outputs[0], outputs[2]);
}

#[test]
fn merge_toggle_and_empty_prompt() {
    let mut req = request("a face with pink hair", vec![face(2)], 9);
    let (merged, p) = generate_latent(trained(), &req).unwrap();
    assert!(p.merge_cross_attention);
    req.merge_cross_attention = false;
    let (plain, p) = generate_latent(trained(), &req).unwrap();
    assert!(!p.merge_cross_attention);
    assert_ne!(merged, plain);

    let mut empty = request("", vec![face(2)], 9);
    assert!(matches!(generate_latent(trained(), &empty), Err(Error::Input(_))));
    empty.merge_cross_attention = false;
    assert!(generate_latent(trained(), &empty).is_ok());
}

#[test]
fn stacked_identities_and_mixing_endpoints() {
    let model = trained();
    let per_id = model.config.encoders.clip_tokens + 1;
    let (_, p) = generate_latent(model, &request("a face", vec![face(0), face(1)], 1)).unwrap();
    assert_eq!(p.identity_tokens, 2 * per_id);
    assert_eq!(p.identity_sources, ["id0", "id1"]);

    let (single0, _) = generate_latent(model, &request("a face", vec![face(0)], 1)).unwrap();
    let (single1, _) = generate_latent(model, &request("a face", vec![face(1)], 1)).unwrap();
    for (w, want) in [([1.0, 0.0], &single0), ([0.0, 1.0], &single1)] {
        let mut req = request("a face", vec![face(0), face(1)], 1);
        req.mix_weights = Some(w.to_vec());
        let (z, p) = generate_latent(model, &req).unwrap();
        assert_eq!(&z, want);
        assert_eq!(p.identity_tokens, per_id);
    }
    let mut bad = request("a face", vec![face(0), face(1)], 1);
    bad.mix_weights = Some(vec![0.7, 0.7]);
    assert!(matches!(generate_latent(model, &bad), Err(Error::Input(_))));
}

#[test]
fn training_touches_only_the_adapters() {
    let before = base().weights.clone();
    let mut m = base().clone();
    let out = train(&mut m, data(), &tiny_run_config().train, None).unwrap();
    assert_eq!(m.weights.frozen_digest(), before.frozen_digest());
    assert_eq!(m.weights.base, before.base);
    assert_ne!(m.weights.trainable_digest(), before.trainable_digest());
    assert_eq!(out.text_cross_grad_max_abs, 0.0);
    assert_eq!(out.loss_trace.len(), tiny_run_config().train.steps);
    assert!(out.loss_trace.iter().all(|l| l.is_finite() && *l > 0.0));
}

#[test]
fn training_is_deterministic_per_seed() {
    let cfg = tiny_run_config().train;
    let run = |seed: u64, mode: TrainMode| {
        let mut m = base().clone();
        let c = idfusion::train::TrainConfig { seed, mode, ..cfg.clone() };
        (train(&mut m, data(), &c, None).unwrap().loss_trace, m.weights.trainable_digest())
    };
    let a = run(1, TrainMode::IdentityEnhanced);
    assert_eq!(a, run(1, TrainMode::IdentityEnhanced));
    assert_ne!(a.0, run(2, TrainMode::IdentityEnhanced).0);
    assert_ne!(a.1, run(1, TrainMode::Entangled).1);
}

#[test]
fn checkpoints_reproduce_generation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut run = tiny_run_config();
    run.model = trained().config.clone();
    let bundle = CheckpointBundle {
        config: run.clone(),
        weights: trained().weights.clone(),
        optimizer: None,
    };
    bundle.save(&path).unwrap();
    let loaded = CheckpointBundle::load(&path).unwrap();
    let model = Model::from_weights(loaded.config.model, loaded.weights).unwrap();
    let req = request("a face with teal hair", vec![face(1)], 11);
    assert_eq!(generate(&model, &req).unwrap(), generate(trained(), &req).unwrap());
}
