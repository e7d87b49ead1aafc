use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use threem::Result;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "threem", version, about = "Multi-style image captioning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write its best checkpoint, log and config.
    Train(TrainArgs),
    /// Caption images with a trained checkpoint.
    Generate(GenerateArgs),
    /// Score generated captions against references.
    Eval(EvalArgs),
    /// Compare analytic and numeric gradients of a random small model.
    Gradcheck(GradcheckArgs),
    /// Train, decode and score the full model and each single-component ablation.
    Ablate(AblateArgs),
    /// Write the synthetic multi-style corpus and a matching config.
    MakeToy(MakeToyArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset (JSON lines).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation dataset; the training set is used when absent.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Feature file used instead of each record's `features_ref`.
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs between learning-rate decays.
    #[arg(long)]
    pub decay_every: Option<usize>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    /// Iterations between validation passes.
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// Stop once end-of-epoch validation loss is below this.
    #[arg(long)]
    pub stop_below: Option<f64>,
    /// Minimum token frequency for the vocabulary.
    #[arg(long)]
    pub min_freq: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblationFlags {
    /// Drop the style embedding from the decoder input.
    #[arg(long)]
    pub no_style: bool,
    /// Drop the dense-caption branch.
    #[arg(long)]
    pub no_text: bool,
    /// Drop the visual branch.
    #[arg(long)]
    pub no_visual: bool,
}

#[derive(Debug, Args)]
pub struct DecodeFlags {
    /// Beam size; 1 decodes greedily.
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub repeat_penalty: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub ablation: AblationFlags,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Images to caption (dataset format; captions are ignored).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeFlags,
    /// Caption every image in this style.
    #[arg(long, conflicts_with = "all_styles")]
    pub style: Option<String>,
    /// Caption every image in every known style.
    #[arg(long)]
    pub all_styles: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Generated captions (JSON lines with image_id, style, caption).
    #[arg(long)]
    pub candidates: PathBuf,
    /// Reference captions in the same shape; a dataset file works too.
    #[arg(long)]
    pub references: PathBuf,
    /// Directory for metrics.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Coordinates sampled per parameter tensor.
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    /// Caption length of the checked loss.
    #[arg(long, default_value_t = 4)]
    pub caption_len: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[command(flatten)]
    pub ablation: AblationFlags,
    /// Corrupt the backward rule of one operation.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

#[derive(Debug, Args)]
pub struct MakeToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub images: usize,
    #[arg(long, default_value_t = 2)]
    pub styles: usize,
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub regions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl ConfigArgs {
    /// Loads `--config` (or defaults) and applies the shared flags.
    pub fn resolve(&self, command: &str) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path, command)?,
            None => RunConfig::defaults(command),
        };
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        set(&mut cfg.train.seed, self.seed);
        Ok(cfg)
    }
}

impl DataArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        for (slot, v) in [
            (&mut cfg.data, &self.data),
            (&mut cfg.val, &self.val),
            (&mut cfg.features, &self.features),
        ] {
            if v.is_some() {
                *slot = v.clone();
            }
        }
    }
}

impl TrainFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.initial_lr, self.lr);
        set(&mut t.decay_every, self.decay_every);
        set(&mut t.decay_factor, self.decay_factor);
        set(&mut t.eval_interval, self.eval_interval);
        if self.stop_below.is_some() {
            t.stop_below = self.stop_below;
        }
        set(&mut cfg.min_frequency, self.min_freq);
    }
}

impl AblationFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if self.no_style {
            cfg.ablation.use_style = false;
        }
        if self.no_text {
            cfg.ablation.use_text = false;
        }
        if self.no_visual {
            cfg.ablation.use_visual = false;
        }
    }
}

impl DecodeFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let d = &mut cfg.decode;
        set(&mut d.beam, self.beam);
        set(&mut d.max_len, self.max_len);
        set(&mut d.min_len, self.min_len);
        set(&mut d.repeat_penalty, self.repeat_penalty);
    }
}
