//! Identity embeddings from reference faces: one embedding per face,
//! stacking several faces, and interpolating between two.

use idfusion::config::RunConfig;
use idfusion::eval::cosine;
use idfusion::identity::{interpolate_identities, stack_identities, IdentityEmbedding, MapperWeights};
use idfusion::model::Model;
use idfusion::synth::generate_synthetic_dataset;

fn main() -> idfusion::Result<()> {
    let cfg = RunConfig::quick();
    let enc = &cfg.model.encoders;
    let (clip, face) = (enc.clip_backend()?, enc.face_backend()?);
    let data = generate_synthetic_dataset(&cfg.data, &face)?;
    let mappers = MapperWeights::init(enc.clip_dim, enc.face_dim, cfg.model.unet.d_model, 0);

    let embed = |i: usize, v: usize| -> idfusion::Result<IdentityEmbedding> {
        let feats = idfusion::identity::encode_identity_features(
            &data.identities[i].images[v], &clip, &face, enc.align_size,
        )?;
        IdentityEmbedding::new(mappers.map(&feats)?, vec![format!("id{i}")])
    };
    let (a, a2, b) = (embed(0, 0)?, embed(0, 1)?, embed(1, 0)?);
    println!("{} tokens per identity, d_model {}", a.tokens_per_identity(), a.d_model());

    let flat = |e: &IdentityEmbedding| e.tokens().iter().copied().collect::<Vec<_>>();
    println!("same person, two variants: cosine {:.3}", cosine(&flat(&a), &flat(&a2))?);
    println!("two different people:      cosine {:.3}", cosine(&flat(&a), &flat(&b))?);

    let both = stack_identities(&[a.clone(), b.clone()])?;
    println!("stacked: {} tokens from {:?}", both.n_tokens(), both.source_ids());

    for w in [0.0, 0.25, 0.5, 1.0] {
        let mix = interpolate_identities(&a, &b, w)?;
        println!(
            "w={w:.2}  labels {:?}  cos to a {:.3}  cos to b {:.3}",
            mix.source_ids(),
            cosine(&flat(&mix), &flat(&a))?,
            cosine(&flat(&mix), &flat(&b))?
        );
    }

    // A model bundles the same pieces behind one call.
    let model = Model::from_weights(cfg.model.clone(), idfusion::diffusion::ModelWeights::attach(
        idfusion::diffusion::UNet::init(&cfg.model.unet, 0)?,
        mappers.clone(),
    ))?;
    let e = model.identity_embedding(&data.identities[0].images[0], "id0")?;
    println!("model embedding matches manual one: {}", e.tokens() == a.tokens());
    Ok(())
}
