//! The attention operators on small random feature matrices, with the
//! properties they are built around printed alongside.

use idfusion::attention::{
    adain_mean, channel_mean, cross_attention_merge, mixed_attention, mutual_attention,
    scaled_dot_product_attention, AttentionProjections, FeatureMatrix, Stream, StyleAlignMode,
};
use idfusion::rng;
use ndarray::Array2;

fn features(seed: u64, tokens: usize, channels: usize, stream: Stream) -> FeatureMatrix {
    let mut r = rng::stream(seed, "example");
    FeatureMatrix::new(rng::normal(&mut r, (tokens, channels), 1.0), stream).unwrap()
}

fn projections(seed: u64, c: usize, d: usize) -> AttentionProjections {
    let mut r = rng::stream(seed, "proj");
    let scale = 1.0 / (c as f64).sqrt();
    let mut w = || rng::normal(&mut r, (c, d), scale);
    AttentionProjections::new(w(), w(), w()).unwrap()
}

fn max_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn main() -> idfusion::Result<()> {
    let (c, d) = (6, 4);
    let z_id = features(1, 5, c, Stream::Identity);
    let z_t = features(2, 7, c, Stream::Text);
    let (p_id, p_t) = (projections(3, c, d), projections(4, c, d));

    let mixed = mixed_attention(&z_id, &z_t, &p_id, &p_t, StyleAlignMode::Off)?;
    let mutual = mutual_attention(&z_id, &z_t, &p_id, &p_t)?;
    println!("mixed attention: {} tokens x {} channels", mixed.n_tokens(), mixed.n_channels());
    println!("mutual attention: {} tokens x {} channels", mutual.n_tokens(), mutual.n_channels());

    // With an empty text stream, mixed attention is plain self-attention.
    let empty = FeatureMatrix::empty(c, Stream::Text);
    let alone = mixed_attention(&z_id, &empty, &p_id, &p_t, StyleAlignMode::Off)?;
    let q = FeatureMatrix::new(z_id.data().dot(&p_id.w_q), Stream::Identity)?;
    let k = FeatureMatrix::new(z_id.data().dot(&p_id.w_k), Stream::Identity)?;
    let v = FeatureMatrix::new(z_id.data().dot(&p_id.w_v), Stream::Identity)?;
    let plain = scaled_dot_product_attention(&q, &k, &v)?;
    println!("empty text stream vs self-attention: max diff {:.2e}", max_diff(alone.data(), plain.data()));

    // AdaIN-mean moves the channel means and nothing else.
    let aligned = adain_mean(&z_id, &z_t)?;
    let mean_gap = (&channel_mean(&aligned)? - &channel_mean(&z_t)?).mapv(f64::abs).fold(0.0, |a: f64, b| a.max(*b));
    println!("AdaIN-mean channel-mean gap: {mean_gap:.2e}");
    let styled = mixed_attention(&z_id, &z_t, &p_id, &p_t, StyleAlignMode::AdainMean)?;
    println!("style alignment changes mixed attention by {:.3}", max_diff(styled.data(), mixed.data()));

    // Merged cross-attention: identity tokens and text tokens attended separately, then summed.
    let c_id = features(5, 3, c, Stream::Identity);
    let c_t = features(6, 9, c, Stream::Text);
    let merged = cross_attention_merge(&q, &c_id, &c_t, &p_id, &p_t, StyleAlignMode::Off)?;
    println!("merged cross-attention output: {:?}", merged.data().dim());
    Ok(())
}
