//! Procedural face-like sprites standing in for a face dataset.
//!
//! An identity fixes the colours and geometry of a layered sprite (hair,
//! face, eyes). A variant moves, rotates and changes the mouth curvature of
//! that sprite and picks a background colour named in the caption.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identity::{EncoderBackend, EncoderKind};
use crate::image::Image;
use crate::io;
use crate::rng;

pub const SKIN_TONES: [(&str, [f64; 3]); 6] = [
    ("pale", [0.96, 0.86, 0.80]),
    ("light", [0.91, 0.76, 0.64]),
    ("tan", [0.82, 0.64, 0.46]),
    ("olive", [0.72, 0.60, 0.40]),
    ("brown", [0.55, 0.38, 0.26]),
    ("dark", [0.36, 0.24, 0.17]),
];

pub const HAIR_COLORS: [(&str, [f64; 3]); 8] = [
    ("black", [0.08, 0.07, 0.07]),
    ("brown", [0.40, 0.24, 0.12]),
    ("blonde", [0.93, 0.80, 0.45]),
    ("auburn", [0.62, 0.22, 0.10]),
    ("gray", [0.60, 0.60, 0.62]),
    ("white", [0.95, 0.95, 0.93]),
    ("pink", [0.93, 0.45, 0.65]),
    ("teal", [0.10, 0.55, 0.55]),
];

pub const EYE_COLORS: [(&str, [f64; 3]); 5] = [
    ("brown", [0.30, 0.18, 0.08]),
    ("blue", [0.15, 0.35, 0.85]),
    ("green", [0.15, 0.60, 0.25]),
    ("gray", [0.45, 0.48, 0.52]),
    ("amber", [0.85, 0.55, 0.10]),
];

pub const BACKGROUNDS: [(&str, [f64; 3]); 6] = [
    ("red", [0.85, 0.25, 0.25]),
    ("green", [0.30, 0.75, 0.35]),
    ("blue", [0.25, 0.40, 0.85]),
    ("yellow", [0.92, 0.85, 0.30]),
    ("purple", [0.60, 0.35, 0.75]),
    ("gray", [0.55, 0.55, 0.55]),
];

const MOUTH_COLOR: [f64; 3] = [0.55, 0.12, 0.15];

/// Base parameters of one identity. Lengths are in units of 1/32 of the
/// image side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticIdentitySpec {
    pub identity_id: usize,
    pub skin: usize,
    pub hair: usize,
    pub eyes: usize,
    pub face_rx: f64,
    pub face_ry: f64,
    pub eye_spacing: f64,
    pub eye_height: f64,
    pub eye_radius: f64,
    /// Hair coverage below the top of the face, 0 (bald crown) to 1 (long).
    pub hair_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub dx: f64,
    pub dy: f64,
    /// Radians.
    pub rotation: f64,
    /// Mouth curvature: positive smiles, negative frowns.
    pub mouth_curve: f64,
    pub background: usize,
}

impl VariantSpec {
    /// Centred, upright, neutral variant on a gray background.
    pub fn neutral() -> Self {
        Self {
            dx: 0.0,
            dy: 0.0,
            rotation: 0.0,
            mouth_curve: 0.0,
            background: BACKGROUNDS.len() - 1,
        }
    }
}

impl SyntheticIdentitySpec {
    fn sample(identity_id: usize, skin: usize, hair: usize, r: &mut impl Rng) -> Self {
        Self {
            identity_id,
            skin,
            hair,
            eyes: r.random_range(0..EYE_COLORS.len()),
            face_rx: r.random_range(7.5..10.5),
            face_ry: r.random_range(9.0..12.0),
            eye_spacing: r.random_range(3.0..5.0),
            eye_height: r.random_range(1.0..3.0),
            eye_radius: r.random_range(1.2..2.2),
            hair_length: r.random_range(0.0..1.0),
        }
    }

    /// Short caption naming the hair colour and the variant's background.
    pub fn caption(&self, variant: &VariantSpec) -> String {
        format!(
            "a face with {} hair on a {} background",
            HAIR_COLORS[self.hair].0, BACKGROUNDS[variant.background].0
        )
    }

    /// Renders the sprite at `size × size` with 2×2 supersampling, quantized
    /// to 8 bits.
    pub fn render(&self, variant: &VariantSpec, size: usize) -> Result<Image> {
        if size < crate::image::MIN_SIDE {
            return Err(Error::input(format!("sprite size {size} below minimum")));
        }
        let unit = size as f64 / 32.0;
        let c = size as f64 / 2.0;
        let (sin, cos) = variant.rotation.sin_cos();
        let mut px = Array3::zeros((size, size, 3));
        for y in 0..size {
            for x in 0..size {
                let mut acc = [0.0; 3];
                for sy in 0..2 {
                    for sx in 0..2 {
                        let gx = x as f64 + 0.25 + 0.5 * sx as f64 - c - variant.dx * unit;
                        let gy = y as f64 + 0.25 + 0.5 * sy as f64 - c - variant.dy * unit;
                        // Into the sprite frame (inverse rotation), in sprite units.
                        let u = (cos * gx + sin * gy) / unit;
                        let v = (-sin * gx + cos * gy) / unit;
                        let rgb = self.shade(u, v, variant);
                        for k in 0..3 {
                            acc[k] += rgb[k] / 4.0;
                        }
                    }
                }
                for k in 0..3 {
                    px[[y, x, k]] = acc[k];
                }
            }
        }
        Ok(Image::new(px)?.quantized())
    }

    fn shade(&self, u: f64, v: f64, variant: &VariantSpec) -> [f64; 3] {
        let in_ellipse = |cx: f64, cy: f64, rx: f64, ry: f64| {
            let a = (u - cx) / rx;
            let b = (v - cy) / ry;
            a * a + b * b <= 1.0
        };
        let (rx, ry) = (self.face_rx, self.face_ry);
        let mut rgb = BACKGROUNDS[variant.background].1;
        // Hair: a larger ellipse behind the face, cut off at a length-dependent
        // height.
        let hair_bottom = -ry * 0.2 + self.hair_length * ry * 0.9;
        if in_ellipse(0.0, -1.0, rx + 2.0, ry + 1.5) && v <= hair_bottom {
            rgb = HAIR_COLORS[self.hair].1;
        }
        if in_ellipse(0.0, 0.0, rx, ry) {
            rgb = SKIN_TONES[self.skin].1;
            // Fringe over the top of the face.
            if v < -ry * 0.55 {
                rgb = HAIR_COLORS[self.hair].1;
            }
        }
        let eye_y = -self.eye_height;
        for side in [-1.0, 1.0] {
            if in_ellipse(side * self.eye_spacing, eye_y, self.eye_radius, self.eye_radius) {
                rgb = EYE_COLORS[self.eyes].1;
            }
        }
        // Mouth: a parabolic band below the eyes.
        let mouth_y = ry * 0.45;
        let half_width = rx * 0.45;
        if u.abs() <= half_width {
            let centre = mouth_y - variant.mouth_curve * 2.0 * (1.0 - (u / half_width).powi(2));
            if (v - centre).abs() <= 0.7 {
                rgb = MOUTH_COLOR;
            }
        }
        rgb
    }
}

/// Renders the canonical image a caption describes: a neutral mid-range
/// identity with the named hair colour on the named background. Unnamed
/// attributes fall back to the first hair colour and the gray background.
pub fn canonical_render(prompt: &str, size: usize) -> Result<Image> {
    let words = crate::text::tokenize(prompt);
    let before = |anchor: &str| {
        words
            .windows(2)
            .find(|w| w[1] == anchor)
            .map(|w| w[0].clone())
    };
    let hair = before("hair")
        .and_then(|w| HAIR_COLORS.iter().position(|(n, _)| *n == w))
        .unwrap_or(0);
    let background = before("background")
        .and_then(|w| BACKGROUNDS.iter().position(|(n, _)| *n == w))
        .unwrap_or(BACKGROUNDS.len() - 1);
    let spec = SyntheticIdentitySpec {
        identity_id: 0,
        skin: 1,
        hair,
        eyes: 0,
        face_rx: 9.0,
        face_ry: 10.5,
        eye_spacing: 4.0,
        eye_height: 2.0,
        eye_radius: 1.7,
        hair_length: 0.5,
    };
    spec.render(
        &VariantSpec {
            background,
            ..VariantSpec::neutral()
        },
        size,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub variants_per_identity: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_identities: 8,
            variants_per_identity: 4,
            image_size: 32,
            seed: 0,
        }
    }
}

/// One identity's variants, rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityRecord {
    pub spec: SyntheticIdentitySpec,
    pub variants: Vec<VariantSpec>,
    pub images: Vec<Image>,
}

impl IdentityRecord {
    pub fn caption(&self, variant: usize) -> String {
        self.spec.caption(&self.variants[variant])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: SynthConfig,
    /// Seed the accepted draw came from (differs from `config.seed` after a
    /// retry).
    pub effective_seed: u64,
    pub identities: Vec<IdentityRecord>,
}

/// A reference image and a different variant of the same identity to denoise.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub identity_id: usize,
    pub id_variant: usize,
    pub target_variant: usize,
    pub id_image: Image,
    pub target_image: Image,
    pub caption: String,
}

/// Cross-identity cosine that triggers a redraw.
pub const MAX_CROSS_IDENTITY_COSINE: f64 = 0.9;
pub const MAX_SYNTH_ATTEMPTS: usize = 6;

fn draw(config: &SynthConfig, seed: u64) -> Result<Vec<IdentityRecord>> {
    let mut r = rng::stream(seed, "synthetic-dataset");
    // Spread hair colours and skin tones across identities before repeating.
    let mut hair: Vec<usize> = (0..HAIR_COLORS.len()).collect();
    let mut skin: Vec<usize> = (0..SKIN_TONES.len()).collect();
    hair.shuffle(&mut r);
    skin.shuffle(&mut r);
    (0..config.n_identities)
        .map(|i| {
            let spec = SyntheticIdentitySpec::sample(
                i,
                skin[i % skin.len()],
                hair[i % hair.len()],
                &mut r,
            );
            let variants: Vec<VariantSpec> = (0..config.variants_per_identity)
                .map(|_| VariantSpec {
                    dx: r.random_range(-2.0..2.0),
                    dy: r.random_range(-2.0..2.0),
                    rotation: r.random_range(-0.2..0.2),
                    mouth_curve: r.random_range(-1.0..1.0),
                    background: r.random_range(0..BACKGROUNDS.len()),
                })
                .collect();
            let images = variants
                .iter()
                .map(|v| spec.render(v, config.image_size))
                .collect::<Result<_>>()?;
            Ok(IdentityRecord {
                spec,
                variants,
                images,
            })
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Largest face-embedding cosine between the neutral renders of two distinct
/// identities.
pub fn max_cross_identity_cosine(
    identities: &[IdentityRecord],
    face_backend: &dyn EncoderBackend,
    image_size: usize,
) -> Result<f64> {
    if face_backend.kind() != EncoderKind::FaceLike {
        return Err(Error::input("identity separation is checked with a face-like backend"));
    }
    let embeddings = identities
        .iter()
        .map(|rec| {
            let img = rec.spec.render(&VariantSpec::neutral(), image_size)?;
            Ok(face_backend.encode(&img)?.iter().copied().collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut worst = f64::NEG_INFINITY;
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            worst = worst.max(cosine(&embeddings[i], &embeddings[j]));
        }
    }
    Ok(worst)
}

/// Draws a dataset, redrawing with a derived seed while any two identities
/// look too alike to the face encoder.
pub fn generate_synthetic_dataset(
    config: &SynthConfig,
    face_backend: &dyn EncoderBackend,
) -> Result<SyntheticDataset> {
    if config.n_identities < 2 || config.variants_per_identity < 2 {
        return Err(Error::input("need at least 2 identities and 2 variants per identity"));
    }
    let mut worst = f64::NAN;
    for attempt in 0..MAX_SYNTH_ATTEMPTS {
        let seed = if attempt == 0 {
            config.seed
        } else {
            rng::stream(config.seed, &format!("synthetic-retry/{attempt}")).random()
        };
        let identities = draw(config, seed)?;
        worst = max_cross_identity_cosine(&identities, face_backend, config.image_size)?;
        if worst < MAX_CROSS_IDENTITY_COSINE {
            return Ok(SyntheticDataset {
                config: config.clone(),
                effective_seed: seed,
                identities,
            });
        }
    }
    Err(Error::Generation(format!(
        "no draw separated the identities after {MAX_SYNTH_ATTEMPTS} attempts (last max cosine {worst:.3})"
    )))
}

impl SyntheticDataset {
    pub fn n_images(&self) -> usize {
        self.identities.iter().map(|r| r.images.len()).sum()
    }

    /// Every ordered pair of distinct variants within each identity.
    pub fn pairs(&self) -> Vec<TrainingPair> {
        let mut out = Vec::new();
        for (i, rec) in self.identities.iter().enumerate() {
            for a in 0..rec.images.len() {
                for b in 0..rec.images.len() {
                    if a != b {
                        out.push(TrainingPair {
                            identity_id: i,
                            id_variant: a,
                            target_variant: b,
                            id_image: rec.images[a].clone(),
                            target_image: rec.images[b].clone(),
                            caption: rec.caption(b),
                        });
                    }
                }
            }
        }
        out
    }

    pub fn file_name(identity: usize, variant: usize) -> String {
        format!("id{identity:03}_v{variant:02}.png")
    }

    /// Writes one PNG per image, then the manifest.
    pub fn export(&self, dir: &Path) -> Result<()> {
        self.export_tagged(dir, None)
    }

    /// [`export`](Self::export), recording the digest of the run
    /// configuration in the manifest.
    pub fn export_tagged(&self, dir: &Path, config_digest: Option<&str>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = DatasetManifest {
            config: self.config.clone(),
            config_digest: config_digest.map(str::to_string),
            effective_seed: self.effective_seed,
            identities: BTreeMap::new(),
        };
        for (i, rec) in self.identities.iter().enumerate() {
            let mut files = Vec::new();
            for (v, img) in rec.images.iter().enumerate() {
                let name = Self::file_name(i, v);
                img.save_png(&dir.join(&name))?;
                files.push(ManifestVariant {
                    file: name,
                    caption: rec.caption(v),
                    params: rec.variants[v].clone(),
                });
            }
            manifest.identities.insert(
                format!("{i:03}"),
                ManifestIdentity {
                    spec: rec.spec.clone(),
                    variants: files,
                },
            );
        }
        let json = serde_json::to_vec_pretty(&manifest)?;
        io::write_atomic(&dir.join(MANIFEST_NAME), &json)
    }

    /// Reads a directory written by [`SyntheticDataset::export`].
    pub fn import(dir: &Path) -> Result<Self> {
        let text = io::read_to_string(&dir.join(MANIFEST_NAME))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let mut identities = Vec::new();
        for (key, ident) in manifest.identities {
            let mut variants = Vec::new();
            let mut images = Vec::new();
            for v in ident.variants {
                let img = Image::load_png(&dir.join(&v.file))?;
                let size = manifest.config.image_size;
                if img.height() != size || img.width() != size {
                    return Err(Error::input(format!("{} is not {size}x{size}", v.file)));
                }
                variants.push(v.params);
                images.push(img);
            }
            if ident.spec.identity_id != identities.len() {
                return Err(Error::input(format!("manifest identity {key} out of order")));
            }
            identities.push(IdentityRecord {
                spec: ident.spec,
                variants,
                images,
            });
        }
        Ok(Self {
            config: manifest.config,
            effective_seed: manifest.effective_seed,
            identities,
        })
    }
}

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    config: SynthConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
    effective_seed: u64,
    /// Identity id (zero-padded) → its variant files.
    identities: BTreeMap<String, ManifestIdentity>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestIdentity {
    spec: SyntheticIdentitySpec,
    variants: Vec<ManifestVariant>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestVariant {
    file: String,
    caption: String,
    params: VariantSpec,
}
