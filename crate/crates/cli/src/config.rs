//! Flat `key = value` run configuration with `[section]` headers.
//!
//! Keys outside any section, and override keys given without a section,
//! resolve to the single section that defines them.

use std::fmt;
use std::path::PathBuf;

use iclmsr::data::{AugmentConfig, ConfoundedSpec, FillMode, View};
use iclmsr::eval::{ProbeConfig, ProbeFeatures};
use iclmsr::losses::NegativesMode;
use iclmsr::nn::{Downsample, ModelConfig, WeightActivation};
use iclmsr::train::{OptimizerKind, TrainingConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(line: Option<usize>, message: impl Into<String>) -> Self {
        Self {
            line,
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Where training and evaluation images come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generated from the `[data]` spec.
    Synthetic,
    /// A dataset file written by `gen-data`.
    File,
    /// CIFAR-10 binary batches.
    Cifar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub out: PathBuf,
    pub seed: u64,
    /// Training view for `train` and `eval`.
    pub view: View,
    /// Epochs between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub source: DataSource,
    /// Dataset file, or comma-separated CIFAR training batches.
    pub path: String,
    /// Comma-separated CIFAR test batches.
    pub test_path: String,
    /// Checkpoint evaluated by `eval`.
    pub checkpoint: String,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub data: ConfoundedSpec,
    pub augment: AugmentConfig,
    pub probe: ProbeConfig,
    pub knn_k: usize,
    pub features: ProbeFeatures,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs"),
            seed: 0,
            view: View::Full,
            checkpoint_every: 0,
            source: DataSource::Synthetic,
            path: String::new(),
            test_path: String::new(),
            checkpoint: String::new(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            data: ConfoundedSpec::default(),
            augment: AugmentConfig::default(),
            probe: ProbeConfig::default(),
            knn_k: 5,
            features: ProbeFeatures::Encoder,
        }
    }
}

trait Value: Sized {
    fn parse(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(usize, u64, String);

impl Value for f64 {
    fn parse(s: &str) -> Result<Self, String> {
        let v: f64 = s.parse().map_err(|_| format!("invalid number `{s}`"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("non-finite number `{s}`"))
        }
    }
    fn render(&self) -> String {
        // shortest representation that parses back to the same bits
        format!("{self:?}")
    }
}

impl Value for bool {
    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(format!("expected true or false, got `{s}`")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for PathBuf {
    fn parse(s: &str) -> Result<Self, String> {
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl<T: Value> Value for Option<T> {
    fn parse(s: &str) -> Result<Self, String> {
        if s == "none" {
            Ok(None)
        } else {
            T::parse(s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.as_ref().map_or_else(|| "none".into(), T::render)
    }
}

impl Value for Vec<usize> {
    fn parse(s: &str) -> Result<Self, String> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| usize::parse(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

impl Value for (f64, f64) {
    fn parse(s: &str) -> Result<Self, String> {
        let (a, b) = s
            .split_once(',')
            .ok_or_else(|| format!("expected `lo,hi`, got `{s}`"))?;
        Ok((f64::parse(a.trim())?, f64::parse(b.trim())?))
    }
    fn render(&self) -> String {
        format!("{},{}", self.0.render(), self.1.render())
    }
}

macro_rules! name_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Result<Self, String> {
                serde_json::from_value(serde_json::Value::String(s.into()))
                    .map_err(|_| format!("unknown variant `{s}`"))
            }
            fn render(&self) -> String {
                match serde_json::to_value(self) {
                    Ok(serde_json::Value::String(s)) => s,
                    _ => unreachable!("unit variants serialize as strings"),
                }
            }
        }
    )*};
}

name_value!(
    OptimizerKind,
    NegativesMode,
    Downsample,
    WeightActivation,
    FillMode,
    View,
    ProbeFeatures,
    DataSource
);

struct Key {
    section: &'static str,
    name: &'static str,
    set: fn(&mut RunConfig, &str) -> Result<(), String>,
    get: fn(&RunConfig) -> String,
}

macro_rules! keys {
    ($($sec:literal $key:literal => $($field:ident).+;)*) => {
        static KEYS: &[Key] = &[$(Key {
            section: $sec,
            name: $key,
            set: |c, v| {
                c.$($field).+ = Value::parse(v)?;
                Ok(())
            },
            get: |c| Value::render(&c.$($field).+),
        }),*];
    };
}

keys! {
    "run" "out" => out;
    "run" "seed" => seed;
    "run" "view" => view;
    "run" "checkpoint_every" => checkpoint_every;
    "run" "source" => source;
    "run" "path" => path;
    "run" "test_path" => test_path;
    "run" "checkpoint" => checkpoint;

    "model" "image_size" => model.image_size;
    "model" "in_channels" => model.in_channels;
    "model" "encoder_channels" => model.encoder_channels;
    "model" "downsample" => model.downsample;
    "model" "projection_hidden" => model.projection_hidden;
    "model" "projection_dim" => model.projection_dim;
    "model" "msr_channels" => model.msr_channels;
    "model" "semantic_vectors" => model.semantic_vectors;
    "model" "weight_activation" => model.weight_activation;

    "training" "lambda" => training.lambda;
    "training" "gamma" => training.gamma;
    "training" "t" => training.t;
    "training" "tau" => training.tau;
    "training" "alpha" => training.alpha;
    "training" "beta" => training.beta;
    "training" "batch_size" => training.batch_size;
    "training" "epochs" => training.epochs;
    "training" "optimizer" => training.optimizer;
    "training" "meta_optimizer" => training.meta_optimizer;
    "training" "warmup_iters" => training.warmup_iters;
    "training" "lr_drop_epochs" => training.lr_drop_epochs;
    "training" "lr_drop" => training.lr_drop;
    "training" "weight_decay" => training.weight_decay;
    "training" "meta_weight_decay" => training.meta_weight_decay;
    "training" "meta_steps" => training.meta_steps;
    "training" "negatives" => training.negatives;
    "training" "deterministic" => training.deterministic;
    "training" "first_order" => training.first_order;

    "data" "image_size" => data.image_size;
    "data" "classes" => data.classes;
    "data" "rho" => data.rho;
    "data" "rho_test" => data.rho_test;
    "data" "train_per_class" => data.train_per_class;
    "data" "test_per_class" => data.test_per_class;
    "data" "fill" => data.fill;

    "augment" "crop_scale" => augment.crop_scale;
    "augment" "crop_ratio" => augment.crop_ratio;
    "augment" "flip_p" => augment.flip_p;
    "augment" "brightness" => augment.brightness;
    "augment" "contrast" => augment.contrast;
    "augment" "saturation" => augment.saturation;
    "augment" "hue" => augment.hue;
    "augment" "jitter_p" => augment.jitter_p;
    "augment" "grayscale_p" => augment.grayscale_p;

    "probe" "epochs" => probe.epochs;
    "probe" "optimizer" => probe.optimizer;
    "probe" "lr" => probe.lr;
    "probe" "batch_size" => probe.batch_size;
    "probe" "knn_k" => knn_k;
    "probe" "features" => features;
}

const SECTIONS: &[&str] = &["run", "model", "training", "data", "augment", "probe"];

fn lookup(section: Option<&str>, name: &str) -> Result<&'static Key, String> {
    match section {
        Some(s) => KEYS
            .iter()
            .find(|k| k.section == s && k.name == name)
            .ok_or_else(|| format!("unknown key `{name}` in section [{s}]")),
        None => {
            let hits: Vec<&Key> = KEYS.iter().filter(|k| k.name == name).collect();
            match hits.as_slice() {
                [k] => Ok(k),
                [] => Err(format!("unknown key `{name}`")),
                _ => {
                    let s: Vec<String> = hits.iter().map(|k| format!("{}.{}", k.section, k.name)).collect();
                    Err(format!("ambiguous key `{name}`; use one of {}", s.join(", ")))
                }
            }
        }
    }
}

impl RunConfig {
    /// Applies the text of a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = Some(i + 1);
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::at(line_no, format!("malformed section header `{line}`")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(ConfigError::at(line_no, format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::at(line_no, format!("expected `key = value`, got `{line}`")))?;
            self.set(section.as_deref(), key.trim(), value.trim())
                .map_err(|m| ConfigError::at(line_no, m))?;
        }
        Ok(())
    }

    /// Applies `key=value` or `section.key=value`.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| ConfigError::at(None, format!("override `{spec}` is not key=value")))?;
        let key = key.trim();
        let (section, name) = match key.split_once('.') {
            Some((s, n)) => (Some(s), n),
            None => (None, key),
        };
        self.set(section, name, value.trim())
            .map_err(|m| ConfigError::at(None, format!("override `{spec}`: {m}")))
    }

    fn set(&mut self, section: Option<&str>, name: &str, value: &str) -> Result<(), String> {
        let key = lookup(section, name)?;
        (key.set)(self, value).map_err(|e| format!("{}.{}: {e}", key.section, key.name))
    }

    /// Every key with its resolved value, in a form `apply_text` reads back.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for &s in SECTIONS {
            out.push_str(&format!("[{s}]\n"));
            for k in KEYS.iter().filter(|k| k.section == s) {
                out.push_str(&format!("{} = {}\n", k.name, (k.get)(self)));
            }
            out.push('\n');
        }
        out
    }

    /// Propagates the run seed into every seeded component.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.training.seed = seed;
        c.data.seed = seed;
        c.probe.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| ConfigError::at(None, m);
        self.model.validate().map_err(|e| bad(e.to_string()))?;
        self.training.validate(&self.model).map_err(|e| bad(e.to_string()))?;
        self.augment.validate().map_err(|e| bad(e.to_string()))?;
        if self.source == DataSource::Synthetic {
            self.data.validate().map_err(|e| bad(e.to_string()))?;
            if self.data.image_size != self.model.image_size {
                return Err(bad(format!(
                    "data.image_size {} differs from model.image_size {}",
                    self.data.image_size, self.model.image_size
                )));
            }
        } else if self.path.is_empty() {
            return Err(bad("run.path is required for file and cifar sources".into()));
        }
        if self.knn_k == 0 {
            return Err(bad("probe.knn_k must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("[training]\nlambda = 0.3\nmeta_steps = 4\n[augment]\ncrop_scale = 0.08, 1\n")
            .unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.echo()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.training.meta_steps, Some(4));
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let mut c = RunConfig::default();
        let e = c.apply_text("[training]\n\nlamda = 1\n").unwrap_err();
        assert_eq!(e.line, Some(3));
        assert!(e.message.contains("lamda"), "{e}");
    }

    #[test]
    fn bare_keys_resolve_when_unique() {
        let mut c = RunConfig::default();
        c.apply_override("lambda=0").unwrap();
        assert_eq!(c.training.lambda, 0.0);
        let e = c.apply_override("epochs=3").unwrap_err();
        assert!(e.message.contains("ambiguous"), "{e}");
        c.apply_override("probe.epochs=3").unwrap();
        assert_eq!(c.probe.epochs, 3);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("[training]\ndeterministic = yes\n").is_err());
        assert!(c.apply_text("[training]\noptimizer = lbfgs\n").is_err());
        assert!(c.apply_text("[nope]\n").is_err());
        assert!(c.apply_text("just words\n").is_err());
    }

    #[test]
    fn floats_accept_scientific_notation() {
        let mut c = RunConfig::default();
        c.apply_text("alpha = 3e-3\nbeta = 0.5E1\n").unwrap();
        assert_eq!(c.training.alpha, 3e-3);
        assert_eq!(c.training.beta, 5.0);
    }
}
