//! Run configuration as TOML, and a checkpoint that restores a model able
//! to reproduce a generation bit for bit.

use idfusion::checkpoint::CheckpointBundle;
use idfusion::config::RunConfig;
use idfusion::inference::{generate, GenerationRequest};
use idfusion::model::Model;
use idfusion::synth::generate_synthetic_dataset;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = RunConfig::quick();
    let text = cfg.to_toml();
    println!("config digest {}", &cfg.digest()[..16]);
    assert_eq!(RunConfig::from_toml(&text)?, cfg);
    match RunConfig::from_toml("[train]\nlearning_rat = 0.1") {
        Err(e) => println!("misspelt key rejected: {e}"),
        Ok(_) => unreachable!(),
    }

    let model = Model::pretrained(cfg.model.clone())?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.ckpt");
    let bundle = CheckpointBundle { config: cfg.clone(), weights: model.weights.clone(), optimizer: None };
    bundle.save(&path)?;
    println!("checkpoint {} bytes, seeds {:?}", std::fs::metadata(&path)?.len(), bundle.seeds());

    let loaded = CheckpointBundle::load(&path)?;
    let restored = Model::from_weights(loaded.config.model, loaded.weights)?;
    let data = generate_synthetic_dataset(&cfg.data, model.face.as_ref())?;
    let req = GenerationRequest::with_defaults("a face", vec![data.identities[0].images[0].clone()], 1, &cfg.inference);
    let same = generate(&model, &req)?.0 == generate(&restored, &req)?.0;
    println!("restored model reproduces the image: {same}");
    Ok(())
}
