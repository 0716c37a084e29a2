//! Layered run configuration: built-in defaults, then a TOML file, then
//! `KINEVAE_*` environment variables, then command-line flags.
//!
//! Every layer is merged as an untyped TOML table and the result is
//! deserialized once, so overrides from any layer are type-checked against
//! the same schema and unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kinevae_core::data::SplitFractions;
use kinevae_core::evaluation::ToyConfig;
use kinevae_core::objective::ObjectiveConfig;
use kinevae_core::training::TrainConfig;
use kinevae_core::{ClassNames, ModelConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const ENV_PREFIX: &str = "KINEVAE_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Base seed for splitting, initialization, shuffling, generation and evaluation.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub objective: ObjectiveSection,
    pub train: TrainSection,
    pub generate: GenerateSection,
    pub evaluate: EvaluateSection,
    pub serve: ServeSection,
    pub toy: ToySection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataSection::default(),
            model: ModelSection::default(),
            objective: ObjectiveSection::default(),
            train: TrainSection::default(),
            generate: GenerateSection::default(),
            evaluate: EvaluateSection::default(),
            serve: ServeSection::default(),
            toy: ToySection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dataset: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub window_length: usize,
    pub stride: usize,
    pub class_names: Vec<String>,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub augment_radius: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let f = SplitFractions::default();
        Self {
            dataset: None,
            labels: None,
            window_length: 40,
            stride: 1,
            class_names: ClassNames::default().names().to_vec(),
            split: [f.train, f.val, f.test],
            augment_radius: kinevae_core::data::DEFAULT_EXTEND_RADIUS,
        }
    }
}

impl DataSection {
    pub fn classes(&self) -> Result<ClassNames> {
        ClassNames::new(&self.class_names).context("data.class_names must be non-empty and distinct")
    }

    pub fn fractions(&self) -> Result<SplitFractions> {
        let [a, b, c] = self.split;
        SplitFractions::new(a, b, c).context("data.split must be three positive fractions summing to 1")
    }

    pub fn dataset_path(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .context("no dataset given (data.dataset or --dataset)")
    }
}

/// Model hyperparameters; input width, sequence length and class count come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub num_recurrent_layers: usize,
    pub classifier_hidden: usize,
    pub classifier_layers: usize,
    pub sigma_sq: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            latent_dim: m.latent_dim,
            hidden_dim: m.hidden_dim,
            num_recurrent_layers: m.num_recurrent_layers,
            classifier_hidden: m.classifier_hidden,
            classifier_layers: m.classifier_layers,
            sigma_sq: m.sigma_sq,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, input_dim: usize, seq_len: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            seq_len,
            latent_dim: self.latent_dim,
            hidden_dim: self.hidden_dim,
            num_recurrent_layers: self.num_recurrent_layers,
            classifier_hidden: self.classifier_hidden,
            classifier_layers: self.classifier_layers,
            num_classes,
            sigma_sq: self.sigma_sq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSection {
    /// Classifier weight; unset means `0.1 · training windows / labeled windows`.
    pub alpha: Option<f64>,
    /// Label prior; unset means uniform.
    pub prior_pi: Option<Vec<f64>>,
    pub mc_samples: usize,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        Self {
            alpha: None,
            prior_pi: None,
            mc_samples: 1,
        }
    }
}

impl ObjectiveSection {
    pub fn resolve(&self, num_classes: usize, total_windows: usize, labeled_windows: usize) -> ObjectiveConfig {
        let alpha = self
            .alpha
            .unwrap_or_else(|| ObjectiveConfig::default_alpha(total_windows, labeled_windows));
        let mut config = ObjectiveConfig::uniform(num_classes, alpha);
        if let Some(pi) = &self.prior_pi {
            config.prior_pi = pi.clone();
        }
        config.mc_samples = self.mc_samples;
        config
    }
}

/// [`TrainConfig`] minus the seed, which comes from the top-level key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub checkpoint_every: usize,
    pub grad_clip_norm: Option<f64>,
    pub agreement_samples: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            checkpoint_every: t.checkpoint_every,
            grad_clip_norm: t.grad_clip_norm,
            agreement_samples: t.agreement_samples,
        }
    }
}

impl TrainSection {
    pub fn resolve(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            seed,
            checkpoint_every: self.checkpoint_every,
            grad_clip_norm: self.grad_clip_norm,
            agreement_samples: self.agreement_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub count: usize,
    pub temperature: f64,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            count: 75,
            temperature: kinevae_core::generation::DEFAULT_TEMPERATURE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Generated sequences per class.
    pub counts: Vec<usize>,
    pub num_pairs: usize,
    pub temperature: f64,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            counts: vec![75; 3],
            num_pairs: kinevae_core::evaluation::DEFAULT_NUM_PAIRS,
            temperature: kinevae_core::generation::DEFAULT_TEMPERATURE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub host: String,
    pub port: u16,
    pub static_dir: Option<PathBuf>,
    pub start_index: usize,
    pub lock_timeout_ms: u64,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: kinevae_annotate::DEFAULT_PORT,
            static_dir: None,
            start_index: 0,
            lock_timeout_ms: kinevae_annotate::DEFAULT_LOCK_TIMEOUT.as_millis() as u64,
        }
    }
}

/// Layout of the synthetic corpus written by `kinevae toy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    pub streams: usize,
    pub frames_per_stream: usize,
    pub noise_level: f64,
    pub labeled_fraction: f64,
}

impl Default for ToySection {
    fn default() -> Self {
        let t = ToyConfig::default();
        Self {
            streams: t.num_streams,
            frames_per_stream: t.frames_per_stream,
            noise_level: t.noise_level,
            labeled_fraction: t.labeled_fraction,
        }
    }
}

/// Overrides keyed by dotted path, e.g. `train.epochs`.
pub type Overrides = BTreeMap<String, Value>;

/// Parse `raw` as a TOML value, falling back to a plain string.
pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// `KINEVAE_TRAIN__EPOCHS=5` becomes `train.epochs = 5`.
pub fn env_overrides<I>(vars: I) -> Overrides
where
    I: IntoIterator<Item = (String, String)>,
{
    vars.into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            let key = rest.to_lowercase().split("__").collect::<Vec<_>>().join(".");
            Some((key, parse_value(&v)))
        })
        .collect()
}

/// Parse a `key=value` flag.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .with_context(|| format!("expected key=value, got {s:?}"))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .with_context(|| format!("empty config key {key:?}"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("config key {key:?}: {p:?} is not a section"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Where each layer comes from.
#[derive(Debug, Default)]
pub struct Layers {
    pub file: Option<PathBuf>,
    pub env: Overrides,
    pub flags: Overrides,
}

impl Config {
    pub fn load(layers: &Layers) -> Result<Self> {
        let mut table = Table::try_from(Config::default()).context("serializing defaults")?;
        if let Some(path) = &layers.file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let file: Table = text
                .parse()
                .with_context(|| format!("parsing config {}", path.display()))?;
            merge(&mut table, file);
        }
        for (source, overrides) in [("environment", &layers.env), ("flag", &layers.flags)] {
            for (k, v) in overrides {
                set_path(&mut table, k, v.clone()).with_context(|| format!("{source} override"))?;
            }
        }
        let config: Config = Value::Table(table).try_into().context("invalid configuration")?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_survive_an_empty_merge() {
        assert_eq!(Config::load(&Layers::default()).unwrap(), Config::default());
    }

    #[test]
    fn env_names_map_to_dotted_keys() {
        let env = env_overrides([
            ("KINEVAE_TRAIN__EPOCHS".to_string(), "7".to_string()),
            ("KINEVAE_OUT_DIR".to_string(), "x/y".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ]);
        assert_eq!(env.len(), 2);
        assert_eq!(env["train.epochs"], Value::Integer(7));
        assert_eq!(env["out_dir"], Value::String("x/y".into()));
    }

    #[test]
    fn values_parse_as_toml_first() {
        assert_eq!(parse_value("0.5"), Value::Float(0.5));
        assert_eq!(
            parse_value("[1, 2]"),
            Value::Array(vec![Value::Integer(1), Value::Integer(2)])
        );
        assert_eq!(parse_value("high"), Value::String("high".into()));
    }

    #[test]
    fn overrides_are_type_checked() {
        let bad = Layers {
            flags: [("train.epochs".to_string(), Value::String("many".into()))].into(),
            ..Layers::default()
        };
        assert!(Config::load(&bad).is_err());
        let unknown = Layers {
            flags: [("train.epoch".to_string(), Value::Integer(1))].into(),
            ..Layers::default()
        };
        assert!(Config::load(&unknown).is_err());
    }
}
