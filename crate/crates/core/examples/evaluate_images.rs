//! Scores image pairs with the three metrics and fuses the two identity
//! metrics into one z-scored number per method.

use idfusion::config::RunConfig;
use idfusion::eval::{summarize, EvalRecord, RecordReport};
use idfusion::synth::generate_synthetic_dataset;
use std::path::PathBuf;

fn main() -> idfusion::Result<()> {
    let cfg = RunConfig::quick();
    let evaluator = cfg.evaluator()?;
    let data = generate_synthetic_dataset(&cfg.data, evaluator.face.as_ref())?;

    // "same" pairs a face with another variant of itself; "other" with a different person.
    let mut records = Vec::new();
    for i in 0..data.identities.len() {
        let j = (i + 1) % data.identities.len();
        for (method, generated) in [("same", &data.identities[i].images[1]), ("other", &data.identities[j].images[1])] {
            let rec = EvalRecord {
                generated: generated.clone(),
                reference: data.identities[i].images[0].clone(),
                prompt: data.identities[i].caption(1),
            };
            let scores = evaluator.score(&rec)?;
            println!(
                "{method:<5} id{i}: CLIP-T {:.3}  CLIP-I {:.3}  M_FaceNet {:.3}",
                scores.clip_t, scores.clip_i, scores.m_facenet
            );
            records.push(RecordReport {
                generated: PathBuf::from(format!("{method}{i}.png")),
                reference: PathBuf::from(format!("ref{i}.png")),
                prompt: rec.prompt,
                method: method.to_string(),
                scores: Some(scores),
                error: None,
            });
        }
    }
    let report = summarize(records);
    for m in &report.methods {
        println!("{:<5} fused identity score {:?}", m.method, m.fused_identity);
    }
    Ok(())
}
