//! Command-line surface: `synth-data`, `pretrain`, `train`, `generate` and
//! `evaluate`. Flags override values from the `--config` file. Relative
//! output paths are re-rooted under `$IDFUSION_OUTPUT_ROOT` when it is set.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attention::StyleAlignMode;
use crate::checkpoint::CheckpointBundle;
use crate::config::{RunConfig, TextBackend};
use crate::diffusion::ModelWeights;
use crate::error::{Error, Result};
use crate::eval;
use crate::identity::MapperWeights;
use crate::image::Image;
use crate::inference::{generate, GenerationRequest, Variant};
use crate::io::{output_path, write_atomic};
use crate::model::Model;
use crate::synth::{generate_synthetic_dataset, SyntheticDataset};
use crate::train::{smoothed_endpoints, train, write_loss_csv, TrainMode};

/// Exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "idfusion", version, about = "Identity-conditioned toy diffusion: data, training, generation, evaluation")]
pub struct Cli {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic identity dataset to a directory.
    SynthData(SynthArgs),
    /// Pretrain the base U-Net and save it with fresh adapters.
    Pretrain(PretrainArgs),
    /// Train the identity adapters on a dataset directory.
    Train(TrainArgs),
    /// Generate one image from a checkpoint.
    Generate(GenerateArgs),
    /// Score a JSON-lines manifest of generated/reference pairs.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_identities: Option<usize>,
    #[arg(long)]
    pub variants: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `synth-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write; the loss CSV and run summary go next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Start from this checkpoint's base (from `pretrain`) instead of
    /// pretraining in-process. Its model configuration must match.
    #[arg(long, conflicts_with = "resume")]
    pub base: Option<PathBuf>,
    /// Continue from a trained checkpoint, optimizer state included.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON request; flags given alongside it take precedence.
    #[arg(long)]
    pub request: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub negative_prompt: Option<String>,
    /// Reference face; repeat to stack several identities.
    #[arg(long = "id-image")]
    pub id_images: Vec<PathBuf>,
    /// One weight per `--id-image` to interpolate instead of stacking.
    #[arg(long = "mix-weight")]
    pub mix_weights: Vec<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance_scale: Option<f64>,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Disable merging text cross-attention into the identity stream.
    #[arg(long)]
    pub no_merge: bool,
    /// Keep the sampler's clean-latent estimates unclamped.
    #[arg(long)]
    pub no_clip_sample: bool,
    #[arg(long)]
    pub style: Option<StyleAlignMode>,
    #[arg(long)]
    pub cross_style: Option<StyleAlignMode>,
    /// Record per-step guidance inputs in the provenance file.
    #[arg(long)]
    pub record_guidance: bool,
    /// Output PNG; provenance is written to the same path with `.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for `report.json` and `report.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub text_backend: Option<TextBackend>,
}

/// Request file accepted by `generate --request`. Image paths are relative
/// to the file's directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RequestFile {
    pub prompt: Option<String>,
    pub negative_prompt: Option<String>,
    pub id_images: Vec<PathBuf>,
    pub mix_weights: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub guidance_scale: Option<f64>,
    pub variant: Option<Variant>,
    pub merge_cross_attention: Option<bool>,
    pub clip_sample: Option<bool>,
    pub style: Option<StyleAlignMode>,
    pub cross_style: Option<StyleAlignMode>,
}

/// Written next to a trained checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_digest: String,
    pub frozen_digest: String,
    pub trainable_digest: String,
    pub mode: TrainMode,
    pub steps: usize,
    pub final_loss: Option<f64>,
    /// Means of the first and last 50 losses.
    pub smoothed_initial: Option<f64>,
    pub smoothed_final: Option<f64>,
    pub text_cross_grad_max_abs: f64,
}

impl std::str::FromStr for TextBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical_render" => Ok(Self::CanonicalRender),
            "hash_projection" => Ok(Self::HashProjection),
            other => Err(Error::input(format!("unknown text backend `{other}`"))),
        }
    }
}

/// Parses arguments, runs the command and maps the outcome to an exit code,
/// printing any error to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::SynthData(a) => synth_data(config, a),
        Command::Pretrain(a) => pretrain(config, a),
        Command::Train(a) => train_cmd(config, a),
        Command::Generate(a) => generate_cmd(cli.config.is_some().then_some(config), a),
        Command::Evaluate(a) => evaluate_cmd(config, a),
    }
}

fn synth_data(mut config: RunConfig, a: &SynthArgs) -> Result<()> {
    if let Some(s) = a.seed {
        config.data.seed = s;
    }
    if let Some(n) = a.n_identities {
        config.data.n_identities = n;
    }
    if let Some(v) = a.variants {
        config.data.variants_per_identity = v;
    }
    config.validate()?;
    let face = config.model.encoders.face_backend()?;
    let ds = generate_synthetic_dataset(&config.data, &face)?;
    let out = output_path(&a.out);
    ds.export_tagged(&out, Some(&config.digest()))?;
    println!("wrote {} images to {}", ds.n_images(), out.display());
    Ok(())
}

fn pretrain(mut config: RunConfig, a: &PretrainArgs) -> Result<()> {
    if let Some(s) = a.steps {
        config.model.pretrain.steps = s;
    }
    config.validate()?;
    let model = Model::pretrained(config.model.clone())?;
    let bundle = CheckpointBundle {
        config,
        weights: model.weights,
        optimizer: None,
    };
    let out = output_path(&a.out);
    bundle.save(&out)?;
    println!("frozen digest {}", bundle.weights.frozen_digest());
    Ok(())
}

/// Sibling of `path` with its extension replaced.
pub fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn train_cmd(mut config: RunConfig, a: &TrainArgs) -> Result<()> {
    let mut optimizer = None;
    let weights = if let Some(p) = &a.resume {
        let b = CheckpointBundle::load(p)?;
        // A resumed run keeps the checkpoint's configuration.
        config = b.config;
        optimizer = b.optimizer;
        Some(b.weights)
    } else if let Some(p) = &a.base {
        let b = CheckpointBundle::load(p)?;
        if b.config.model != config.model {
            return Err(Error::Config(format!(
                "{} was built with a different model configuration",
                p.display()
            )));
        }
        let m = &config.model;
        let mappers =
            MapperWeights::init(m.encoders.clip_dim, m.encoders.face_dim, m.unet.d_model, m.seed);
        Some(ModelWeights::attach(b.weights.base, mappers))
    } else {
        None
    };
    if let Some(s) = a.steps {
        config.train.steps = s;
    }
    if let Some(s) = a.seed {
        config.train.seed = s;
    }
    if let Some(m) = a.mode {
        config.train.mode = m;
    }
    if let Some(lr) = a.learning_rate {
        config.train.learning_rate = lr;
    }
    config.validate()?;
    let dataset = SyntheticDataset::import(&a.data)?;
    if dataset.config.image_size != config.model.image_size {
        return Err(Error::input("dataset image size differs from the model's"));
    }
    let mut model = match weights {
        Some(w) => Model::from_weights(config.model.clone(), w)?,
        None => Model::pretrained(config.model.clone())?,
    };
    let outcome = train(&mut model, &dataset, &config.train, optimizer)?;
    let out = output_path(&a.out);
    let bundle = CheckpointBundle {
        config,
        weights: model.weights,
        optimizer: Some(outcome.optimizer),
    };
    bundle.save(&out)?;
    write_loss_csv(&sibling(&out, "loss.csv"), &outcome.loss_trace)?;
    let smoothed = smoothed_endpoints(&outcome.loss_trace, 50);
    let summary = TrainSummary {
        config_digest: bundle.config.digest(),
        frozen_digest: bundle.weights.frozen_digest(),
        trainable_digest: bundle.weights.trainable_digest(),
        mode: bundle.config.train.mode,
        steps: outcome.loss_trace.len(),
        final_loss: outcome.loss_trace.last().copied(),
        smoothed_initial: smoothed.map(|s| s.0),
        smoothed_final: smoothed.map(|s| s.1),
        text_cross_grad_max_abs: outcome.text_cross_grad_max_abs,
    };
    write_atomic(&sibling(&out, "summary.json"), &serde_json::to_vec_pretty(&summary)?)?;
    println!("trained {} steps, checkpoint {}", summary.steps, out.display());
    Ok(())
}

fn generate_cmd(override_config: Option<RunConfig>, a: &GenerateArgs) -> Result<()> {
    let bundle = CheckpointBundle::load(&a.checkpoint)?;
    let bundle_trained = bundle.optimizer.is_some();
    let mut config = bundle.config;
    if let Some(c) = override_config {
        if c.model != config.model {
            return Err(Error::Config("--config describes a different model than the checkpoint".into()));
        }
        config.inference = c.inference;
    }
    let model = Model::from_weights(config.model.clone(), bundle.weights)?;

    let (file, file_dir) = match &a.request {
        Some(p) => {
            let text = crate::io::read_to_string(p)?;
            let f: RequestFile = serde_json::from_str(&text)
                .map_err(|e| Error::input(format!("{}: {e}", p.display())))?;
            (f, p.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (RequestFile::default(), PathBuf::new()),
    };
    let prompt = a
        .prompt
        .clone()
        .or(file.prompt)
        .ok_or_else(|| Error::input("a prompt is required (--prompt or the request file)"))?;
    let image_paths: Vec<PathBuf> = if a.id_images.is_empty() {
        file.id_images.iter().map(|p| file_dir.join(p)).collect()
    } else {
        a.id_images.clone()
    };
    let id_images = image_paths
        .iter()
        .map(|p| Image::load_png(p))
        .collect::<Result<Vec<_>>>()?;
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let mut req = GenerationRequest::with_defaults(prompt, id_images, seed, &config.inference);
    if let Some(n) = a.negative_prompt.clone().or(file.negative_prompt) {
        req.negative_prompt = n;
    }
    req.mix_weights = if a.mix_weights.is_empty() {
        file.mix_weights
    } else {
        Some(a.mix_weights.clone())
    };
    if let Some(s) = a.steps.or(file.steps) {
        req.steps = s;
    }
    if let Some(g) = a.guidance_scale.or(file.guidance_scale) {
        req.guidance_scale = g;
    }
    if let Some(v) = a.variant.or(file.variant) {
        req.variant = v;
    }
    if a.no_merge {
        req.merge_cross_attention = false;
    } else if let Some(m) = file.merge_cross_attention {
        req.merge_cross_attention = m;
    }
    if a.no_clip_sample {
        req.clip_sample = false;
    } else if let Some(c) = file.clip_sample {
        req.clip_sample = c;
    }
    if let Some(s) = a.style.or(file.style) {
        req.style = s;
    }
    req.cross_style = a.cross_style.or(file.cross_style);
    req.record_guidance = a.record_guidance;

    let (img, mut prov) = generate(&model, &req)?;
    prov.config_digest = config.digest();
    // Only trained checkpoints carry optimizer state.
    prov.training_mode = bundle_trained.then_some(config.train.mode);
    let out = output_path(&a.out);
    img.save_png(&out)?;
    write_atomic(&sibling(&out, "json"), &serde_json::to_vec_pretty(&prov)?)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn evaluate_cmd(mut config: RunConfig, a: &EvaluateArgs) -> Result<()> {
    if let Some(t) = a.text_backend {
        config.eval.text_backend = t;
    }
    config.validate()?;
    let entries = eval::read_manifest(&a.manifest)?;
    let evaluator = config.evaluator()?;
    let base_dir = a.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut report = eval::evaluate_records(&evaluator, &entries, &base_dir);
    report.config_digest = Some(config.digest());
    let out = output_path(&a.out);
    eval::write_report(&report, &out)?;
    let failed = report.records.iter().filter(|r| r.error.is_some()).count();
    println!(
        "scored {} of {} records into {}",
        report.records.len() - failed,
        report.records.len(),
        out.display()
    );
    Ok(())
}
