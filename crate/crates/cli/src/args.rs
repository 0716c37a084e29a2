//! Command-line surface. Flags that correspond to config keys only override
//! them when given; see [`crate::config`] for the layering.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use toml::Value;

use crate::config::{parse_assignment, Overrides};

#[derive(Debug, Parser)]
#[command(
    name = "kinevae",
    version,
    about = "Train and sample a semi-supervised conditional motion VAE"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.epochs=20`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (out_dir).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print a machine-readable JSON summary on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Single worker thread, for bit-identical reruns.
    #[arg(long, global = true)]
    pub reproducible: bool,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize a dataset and report its sliding windows.
    Prepare(PrepareArgs),
    /// Expand a label file with the between-fill and frame-extension rules.
    Augment(AugmentArgs),
    /// Fit the model; writes checkpoints and a metrics log.
    Train(TrainArgs),
    /// Sample sequences of one class from a checkpoint.
    Generate(GenerateArgs),
    /// Diversity and label agreement of a checkpoint on the test split.
    Evaluate(EvaluateArgs),
    /// Run the labeling service.
    Serve(ServeArgs),
    /// Write the synthetic three-class corpus and its labels.
    Toy(ToyArgs),
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub window_length: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub radius: Option<usize>,
    /// Defaults to `<out>/labels_augmented.csv`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub grad_clip_norm: Option<f64>,
    #[arg(long)]
    pub agreement_samples: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub num_recurrent_layers: Option<usize>,
    #[arg(long)]
    pub classifier_hidden: Option<usize>,
    #[arg(long)]
    pub classifier_layers: Option<usize>,
    #[arg(long)]
    pub sigma_sq: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub mc_samples: Option<usize>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Defaults to `<out>/last.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Class name, matched case-insensitively.
    #[arg(long)]
    pub label: String,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Output path stem; `.kpd` and `.csv` are appended. Defaults to `<out>/generated_<label>`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Generated sequences per class, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,
    #[arg(long)]
    pub num_pairs: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    #[arg(long)]
    pub start_index: Option<usize>,
    #[arg(long)]
    pub lock_timeout_ms: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long)]
    pub streams: Option<usize>,
    #[arg(long)]
    pub frames_per_stream: Option<usize>,
    #[arg(long)]
    pub noise_level: Option<f64>,
    #[arg(long)]
    pub labeled_fraction: Option<f64>,
}

fn put<T: Serialize>(o: &mut Overrides, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        o.insert(key.to_string(), Value::try_from(v).expect("flag values serialize"));
    }
}

impl DataArgs {
    fn overrides(&self, o: &mut Overrides) {
        put(o, "data.dataset", &self.dataset);
        put(o, "data.labels", &self.labels);
        put(o, "data.window_length", &self.window_length);
        put(o, "data.stride", &self.stride);
    }
}

impl Cli {
    /// Config overrides from `--set` followed by the dedicated flags.
    pub fn overrides(&self) -> anyhow::Result<Overrides> {
        let mut o = Overrides::new();
        for s in &self.global.set {
            let (k, v) = parse_assignment(s)?;
            o.insert(k, v);
        }
        put(&mut o, "out_dir", &self.global.out);
        put(&mut o, "seed", &self.global.seed);
        match &self.command {
            Command::Prepare(a) => a.data.overrides(&mut o),
            Command::Augment(a) => {
                a.data.overrides(&mut o);
                put(&mut o, "data.augment_radius", &a.radius);
            }
            Command::Train(a) => {
                a.data.overrides(&mut o);
                put(&mut o, "train.epochs", &a.epochs);
                put(&mut o, "train.batch_size", &a.batch_size);
                put(&mut o, "train.learning_rate", &a.learning_rate);
                put(&mut o, "train.checkpoint_every", &a.checkpoint_every);
                put(&mut o, "train.grad_clip_norm", &a.grad_clip_norm);
                put(&mut o, "train.agreement_samples", &a.agreement_samples);
                put(&mut o, "model.latent_dim", &a.latent_dim);
                put(&mut o, "model.hidden_dim", &a.hidden_dim);
                put(&mut o, "model.num_recurrent_layers", &a.num_recurrent_layers);
                put(&mut o, "model.classifier_hidden", &a.classifier_hidden);
                put(&mut o, "model.classifier_layers", &a.classifier_layers);
                put(&mut o, "model.sigma_sq", &a.sigma_sq);
                put(&mut o, "objective.alpha", &a.alpha);
                put(&mut o, "objective.mc_samples", &a.mc_samples);
            }
            Command::Generate(a) => {
                a.data.overrides(&mut o);
                put(&mut o, "generate.count", &a.count);
                put(&mut o, "generate.temperature", &a.temperature);
            }
            Command::Evaluate(a) => {
                a.data.overrides(&mut o);
                put(&mut o, "evaluate.counts", &a.counts);
                put(&mut o, "evaluate.num_pairs", &a.num_pairs);
                put(&mut o, "evaluate.temperature", &a.temperature);
            }
            Command::Serve(a) => {
                a.data.overrides(&mut o);
                put(&mut o, "serve.host", &a.host);
                put(&mut o, "serve.port", &a.port);
                put(&mut o, "serve.static_dir", &a.static_dir);
                put(&mut o, "serve.start_index", &a.start_index);
                put(&mut o, "serve.lock_timeout_ms", &a.lock_timeout_ms);
            }
            Command::Toy(a) => {
                put(&mut o, "toy.streams", &a.streams);
                put(&mut o, "toy.frames_per_stream", &a.frames_per_stream);
                put(&mut o, "toy.noise_level", &a.noise_level);
                put(&mut o, "toy.labeled_fraction", &a.labeled_fraction);
            }
        }
        Ok(o)
    }
}
