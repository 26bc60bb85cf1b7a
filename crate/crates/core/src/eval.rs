//! Identity-fidelity and prompt-consistency metrics over generated images.
//!
//! * `M_FaceNet`: cosine of face-recognition embeddings of the aligned
//!   generated and reference faces.
//! * `CLIP-I`: cosine of token-mean image-encoder embeddings of the aligned
//!   faces.
//! * `CLIP-T`: cosine between the image-encoder embedding of the full
//!   generated image and a text embedding of the prompt.
//!
//! Identity fidelity across methods is fused as the mean of the z-scored
//! `M_FaceNet` and `CLIP-I` columns.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identity::{EncoderBackend, EncoderKind};
use crate::image::{align_face, Image};
use crate::io;
use crate::rng;
use crate::synth::canonical_render;
use crate::text::HashTextEncoder;

/// `u·v / (‖u‖‖v‖)`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!("cosine of lengths {} and {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateInput("cosine of a zero vector".into()));
    }
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv))
}

fn pool_tokens(tokens: &Array2<f64>) -> Result<Array1<f64>> {
    tokens
        .mean_axis(Axis(0))
        .ok_or_else(|| Error::DegenerateInput("encoder emitted no tokens".into()))
}

/// Maps a prompt into the image-encoder embedding space.
pub trait TextEmbedder: Send + Sync + std::fmt::Debug {
    fn embed(&self, prompt: &str) -> Result<Array1<f64>>;
}

/// Mean of hashed word vectors through a fixed random projection into the
/// image embedding width.
#[derive(Debug, Clone)]
pub struct HashProjectionText {
    words: HashTextEncoder,
    projection: Array2<f64>,
}

impl HashProjectionText {
    pub fn new(word_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "clip-text-projection");
        Self {
            words: HashTextEncoder::new(word_dim, seed),
            projection: rng::normal(&mut r, (word_dim, embed_dim), 1.0 / (word_dim as f64).sqrt()),
        }
    }
}

impl TextEmbedder for HashProjectionText {
    fn embed(&self, prompt: &str) -> Result<Array1<f64>> {
        let pooled = self
            .words
            .pooled(prompt)
            .ok_or_else(|| Error::DegenerateInput("prompt has no words".into()))?;
        Ok(pooled.dot(&self.projection))
    }
}

/// Embeds a prompt as the image embedding of the sprite it describes, so an
/// image that matches its caption exactly scores 1.
#[derive(Debug, Clone)]
pub struct CanonicalRenderText {
    clip: Arc<dyn EncoderBackend>,
    size: usize,
}

impl CanonicalRenderText {
    pub fn new(clip: Arc<dyn EncoderBackend>, size: usize) -> Self {
        Self { clip, size }
    }
}

impl TextEmbedder for CanonicalRenderText {
    fn embed(&self, prompt: &str) -> Result<Array1<f64>> {
        let img = canonical_render(prompt, self.size)?;
        pool_tokens(&self.clip.encode(&img)?)
    }
}

#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub generated: Image,
    pub reference: Image,
    pub prompt: String,
}

/// Encoders used by every metric.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub clip: Arc<dyn EncoderBackend>,
    pub face: Arc<dyn EncoderBackend>,
    pub text: Arc<dyn TextEmbedder>,
    pub align_size: usize,
}

impl Evaluator {
    pub fn new(
        clip: Arc<dyn EncoderBackend>,
        face: Arc<dyn EncoderBackend>,
        text: Arc<dyn TextEmbedder>,
        align_size: usize,
    ) -> Result<Self> {
        if clip.kind() != EncoderKind::ClipLike || face.kind() != EncoderKind::FaceLike {
            return Err(Error::input("evaluator needs a clip-like and a face-like backend"));
        }
        Ok(Self {
            clip,
            face,
            text,
            align_size,
        })
    }

    pub fn m_facenet(&self, rec: &EvalRecord) -> Result<f64> {
        let g = self.face.encode(&align_face(&rec.generated, self.align_size)?)?;
        let r = self.face.encode(&align_face(&rec.reference, self.align_size)?)?;
        cosine(g.as_slice().expect("standard"), r.as_slice().expect("standard"))
    }

    pub fn clip_i(&self, rec: &EvalRecord) -> Result<f64> {
        let g = pool_tokens(&self.clip.encode(&align_face(&rec.generated, self.align_size)?)?)?;
        let r = pool_tokens(&self.clip.encode(&align_face(&rec.reference, self.align_size)?)?)?;
        cosine(g.as_slice().expect("standard"), r.as_slice().expect("standard"))
    }

    pub fn clip_t(&self, rec: &EvalRecord) -> Result<f64> {
        let g = pool_tokens(&self.clip.encode(&rec.generated)?)?;
        let t = self.text.embed(&rec.prompt)?;
        cosine(g.as_slice().expect("standard"), t.as_slice().expect("standard"))
    }

    pub fn score(&self, rec: &EvalRecord) -> Result<Scores> {
        Ok(Scores {
            clip_t: self.clip_t(rec)?,
            clip_i: self.clip_i(rec)?,
            m_facenet: self.m_facenet(rec)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub clip_t: f64,
    pub clip_i: f64,
    pub m_facenet: f64,
}

/// Population z-scores; a constant vector maps to zeros.
pub fn z_scores(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - mean) / sd).collect()
}

/// Mean of the z-scored `M_FaceNet` and `CLIP-I` vectors, one entry per
/// method.
pub fn z_score_fuse(m_facenet: &[f64], clip_i: &[f64]) -> Result<Vec<f64>> {
    if m_facenet.len() != clip_i.len() {
        return Err(Error::shape("metric vectors differ in length"));
    }
    if m_facenet.len() < 2 {
        return Err(Error::input("z-score fusion needs at least two methods"));
    }
    Ok(z_scores(m_facenet)
        .into_iter()
        .zip(z_scores(clip_i))
        .map(|(a, b)| (a + b) / 2.0)
        .collect())
}

/// One line of an evaluation manifest. Paths are relative to the manifest's
/// directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub generated: PathBuf,
    pub reference: PathBuf,
    pub prompt: String,
    #[serde(default)]
    pub method: Option<String>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = io::read_to_string(path)?;
    let entries = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::input(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect::<Result<Vec<ManifestEntry>>>()?;
    if entries.is_empty() {
        return Err(Error::input(format!("{} lists no records", path.display())));
    }
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordReport {
    pub generated: PathBuf,
    pub reference: PathBuf,
    pub prompt: String,
    pub method: String,
    pub scores: Option<Scores>,
    /// Why the record could not be scored.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub n_scored: usize,
    pub means: Option<Scores>,
    /// Fused identity fidelity; present when at least two methods were
    /// scored.
    pub fused_identity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Digest of the configuration that produced the report, when known.
    pub config_digest: Option<String>,
    pub records: Vec<RecordReport>,
    /// Means over every scored record.
    pub aggregate: Option<Scores>,
    pub methods: Vec<MethodSummary>,
}

/// Label given to records without a `method` field.
pub const DEFAULT_METHOD: &str = "default";

fn mean_scores(s: &[Scores]) -> Option<Scores> {
    if s.is_empty() {
        return None;
    }
    let n = s.len() as f64;
    Some(Scores {
        clip_t: s.iter().map(|x| x.clip_t).sum::<f64>() / n,
        clip_i: s.iter().map(|x| x.clip_i).sum::<f64>() / n,
        m_facenet: s.iter().map(|x| x.m_facenet).sum::<f64>() / n,
    })
}

/// Scores every record; failures are recorded per record, not raised.
pub fn evaluate_records(
    evaluator: &Evaluator,
    entries: &[ManifestEntry],
    base_dir: &Path,
) -> MetricReport {
    let records: Vec<RecordReport> = entries
        .iter()
        .map(|e| {
            let load = |p: &Path| Image::load_png(&base_dir.join(p));
            let result = (|| {
                let rec = EvalRecord {
                    generated: load(&e.generated)?,
                    reference: load(&e.reference)?,
                    prompt: e.prompt.clone(),
                };
                evaluator.score(&rec)
            })();
            RecordReport {
                generated: e.generated.clone(),
                reference: e.reference.clone(),
                prompt: e.prompt.clone(),
                method: e.method.clone().unwrap_or_else(|| DEFAULT_METHOD.to_string()),
                scores: result.as_ref().ok().copied(),
                error: result.err().map(|err| err.to_string()),
            }
        })
        .collect();
    summarize(records)
}

/// Aggregates and fuses already scored records.
pub fn summarize(records: Vec<RecordReport>) -> MetricReport {
    let all: Vec<Scores> = records.iter().filter_map(|r| r.scores).collect();
    let mut by_method: BTreeMap<&str, Vec<Scores>> = BTreeMap::new();
    for r in &records {
        let slot = by_method.entry(r.method.as_str()).or_default();
        if let Some(s) = r.scores {
            slot.push(s);
        }
    }
    let mut methods: Vec<MethodSummary> = by_method
        .iter()
        .map(|(m, s)| MethodSummary {
            method: m.to_string(),
            n_scored: s.len(),
            means: mean_scores(s),
            fused_identity: None,
        })
        .collect();
    let scored: Vec<usize> = (0..methods.len()).filter(|&i| methods[i].means.is_some()).collect();
    if scored.len() >= 2 {
        let face: Vec<f64> = scored.iter().map(|&i| methods[i].means.unwrap().m_facenet).collect();
        let clip: Vec<f64> = scored.iter().map(|&i| methods[i].means.unwrap().clip_i).collect();
        let fused = z_score_fuse(&face, &clip).expect("lengths agree and >= 2");
        for (&i, f) in scored.iter().zip(fused) {
            methods[i].fused_identity = Some(f);
        }
    }
    MetricReport {
        config_digest: None,
        aggregate: mean_scores(&all),
        records,
        methods,
    }
}

/// Column order of the summary table.
pub const CSV_HEADER: [&str; 5] = ["method", "CLIP-T", "CLIP-I", "M_FaceNet", "ID-fidelity-z"];

pub fn report_csv(report: &MetricReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for m in &report.methods {
        w.write_record([
            m.method.clone(),
            fmt(m.means.map(|s| s.clip_t)),
            fmt(m.means.map(|s| s.clip_i)),
            fmt(m.means.map(|s| s.m_facenet)),
            fmt(m.fused_identity),
        ])?;
    }
    w.into_inner().map_err(|e| Error::input(e.to_string()))
}

/// Writes `report.json` and `report.csv` into `dir`.
pub fn write_report(report: &MetricReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::write_atomic(&dir.join("report.json"), &serde_json::to_vec_pretty(report)?)?;
    io::write_atomic(&dir.join("report.csv"), &report_csv(report)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::make_stub_backend;

    #[test]
    fn cosine_hand_cases() {
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn z_scores_by_hand() {
        // μ = 2, σ = √(2/3).
        let z = z_scores(&[1.0, 2.0, 3.0]);
        let s = (2.0f64 / 3.0).sqrt();
        assert!((z[0] + 1.0 / s).abs() < 1e-12);
        assert_eq!(z[1], 0.0);
        assert!((z[2] - 1.0 / s).abs() < 1e-12);
        assert_eq!(z_scores(&[4.0, 4.0]), vec![0.0, 0.0]);
        assert!(z_score_fuse(&[1.0], &[1.0]).is_err());
    }

    fn evaluator() -> Evaluator {
        let clip: Arc<dyn EncoderBackend> =
            Arc::new(make_stub_backend(EncoderKind::ClipLike, 4, 32, 0).unwrap());
        let face: Arc<dyn EncoderBackend> =
            Arc::new(make_stub_backend(EncoderKind::FaceLike, 1, 32, 0).unwrap());
        let text = Arc::new(CanonicalRenderText::new(clip.clone(), 32));
        Evaluator::new(clip, face, text, 32).unwrap()
    }

    #[test]
    fn self_pairs_score_one() {
        let ev = evaluator();
        let prompt = "a face with teal hair on a yellow background";
        let img = canonical_render(prompt, 32).unwrap();
        let rec = EvalRecord {
            generated: img.clone(),
            reference: img,
            prompt: prompt.into(),
        };
        let s = ev.score(&rec).unwrap();
        for v in [s.clip_t, s.clip_i, s.m_facenet] {
            assert!((v - 1.0).abs() < 1e-12, "{s:?}");
        }
    }

    #[test]
    fn hash_text_embeds_into_image_space() {
        let t = HashProjectionText::new(16, 32, 0);
        assert_eq!(t.embed("a red face").unwrap().len(), 32);
        assert!(t.embed("   ").is_err());
    }
}
