//! Synthetic faces, a pretrained base, then adapter training. Only the
//! identity adapters move; the base stays bit-identical.

use idfusion::config::RunConfig;
use idfusion::model::Model;
use idfusion::synth::generate_synthetic_dataset;
use idfusion::train::{smoothed_endpoints, train, TrainMode};

fn main() -> idfusion::Result<()> {
    let mut cfg = RunConfig::quick();
    if let Some(mode) = std::env::args().nth(1) {
        cfg.train.mode = mode.parse::<TrainMode>()?;
    }
    let base = Model::pretrained(cfg.model.clone())?;
    let data = generate_synthetic_dataset(&cfg.data, base.face.as_ref())?;
    println!(
        "{} identities x {} variants, e.g. \"{}\"",
        data.identities.len(),
        cfg.data.variants_per_identity,
        data.identities[0].caption(1)
    );

    let mut model = base.clone();
    let out = train(&mut model, &data, &cfg.train, None)?;
    for (i, chunk) in out.loss_trace.chunks(10).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("steps {:3}..{:3}  loss {mean:.4}", i * 10, i * 10 + chunk.len());
    }
    if let Some((first, last)) = smoothed_endpoints(&out.loss_trace, 10) {
        println!("smoothed loss {first:.4} -> {last:.4}");
    }
    println!("mode {:?}", cfg.train.mode);
    println!("base unchanged: {}", model.weights.frozen_digest() == base.weights.frozen_digest());
    println!("largest text K/V gradient: {}", out.text_cross_grad_max_abs);
    Ok(())
}
