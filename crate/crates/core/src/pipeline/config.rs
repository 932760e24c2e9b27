//! Flat `key = value` experiment configuration with dotted keys.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! one of [`KEYS`]; later assignments override earlier ones.

use std::collections::BTreeMap;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::attention::{AttentionMode, StratifiedWeights};
use crate::denoiser::{DenoiserConfig, TrainParams, NULL_CLASS};
use crate::error::{Error, Result};
use crate::eval::{GuidanceKind, PositiveCond, RunSettings};
use crate::sampler::{make_schedule, FusionSchedule, NoiseSchedule};

use super::dataset::{DatasetSpec, NEGATIVE_CLASS};

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data.seed", "1", "dataset generator seed"),
    ("data.per_class", "64", "images per class"),
    ("data.classes", "4", "shape classes (2-4)"),
    ("data.negative", "true", "include the corrupted negative class"),
    ("data.texture_min", "2", "shortest texture period in pixels"),
    ("data.texture_max", "4", "longest texture period in pixels"),
    ("data.texture_amplitude", "0.35", "texture contrast inside shapes"),
    ("model.checkpoint", "", "weights file (required except for train and make-data)"),
    ("model.token_dim", "32", "token width"),
    ("model.heads", "2", "attention heads"),
    ("model.blocks", "4", "transformer blocks; the second half receive injection"),
    ("train.steps", "4000", "optimizer steps"),
    ("train.batch", "8", "samples per step"),
    ("train.lr", "0.1", "step size"),
    ("train.clip", "1.0", "global gradient-norm clip"),
    ("train.cond_drop", "0.15", "probability of training on the null class"),
    ("train.log_every", "50", "steps per training-log row"),
    ("train.seed", "0", "initialisation and batch-order seed"),
    ("schedule.train_steps", "1000", "diffusion timesteps"),
    ("schedule.inference_steps", "50", "DDIM steps"),
    ("schedule.beta_start", "0.0001", "first beta of the linear schedule"),
    ("schedule.beta_end", "0.02", "last beta of the linear schedule"),
    ("guidance.scale", "7.5", "classifier-free guidance scale"),
    ("guidance.mode", "conflict-free", "conflicting | conflict-free | negative-image | none"),
    ("guidance.positive", "prompt", "positive condition: prompt | null | <class id>"),
    ("guidance.negative", "5", "negative condition class id"),
    ("fusion.schedule", "stratified-concat", "stratified-concat | rival | concat | stratified | replacement | original"),
    ("fusion.stratified_steps", "10", "leading steps using stratified (or replacement for rival) attention"),
    ("fusion.lambda_g", "0.5", "stratified weight of the generated stream"),
    ("fusion.lambda_p", "0.5", "stratified weight of the prompt stream"),
    ("inversion.cond", "prompt", "condition during inversion: prompt | null"),
    ("run.prompts", "0,1,2,3", "dataset indices of the image prompts"),
    ("run.prompt_files", "", "comma-separated P6 pixmaps used as prompts instead"),
    ("run.prompt_class", "1", "class of prompts loaded from files"),
    ("run.seed", "0", "first sampling seed"),
    ("run.seeds", "1", "number of consecutive sampling seeds"),
    ("run.images", "4", "images generated per prompt and seed"),
    ("ablate.target", "lambda", "lambda | guidance | fusion"),
    ("ablate.lambdas", "0,0.33,0.5,0.67,1.0", "prompt-stream weights for the lambda ablation"),
    ("ablate.scales", "1,2.5,5,7.5", "guidance scales for the guidance ablation"),
    ("output.dir", "out", "output root when neither --out nor STRATA_OUT_DIR is given"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|(k, v, _)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d)
}

/// Help table listing every key with its default.
pub fn keys_help() -> String {
    let width = KEYS.iter().map(|(k, _, _)| k.len()).max().unwrap_or(0);
    let mut s = String::new();
    for (k, d, h) in KEYS {
        let d = if d.is_empty() { "\"\"" } else { d };
        s.push_str(&format!("  {k:width$}  {h} [default: {d}]\n"));
    }
    s
}

impl ExperimentConfig {
    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if default_of(key).is_none() {
            return Err(Error::config(key, "unknown key"));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Parses one `key=value` assignment.
    pub fn apply_assignment(&mut self, line: &str) -> Result<()> {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(line.trim(), "expected key=value"))?;
        self.set(k.trim(), v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            cfg.apply_assignment(line)?;
        }
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .or_else(|| default_of(key))
            .unwrap_or_else(|| panic!("key `{key}` is not declared"))
    }

    /// Sorted `key=value` lines of the full effective configuration.
    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of [`ExperimentConfig::canonical`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| Error::config(key, format!("cannot parse `{}`", self.get(key))))
    }

    fn usize(&self, key: &str, min: usize) -> Result<usize> {
        let v: usize = self.parse_as(key)?;
        if v < min {
            return Err(Error::config(key, format!("must be at least {min}")));
        }
        Ok(v)
    }

    fn f64(&self, key: &str) -> Result<f64> {
        let v: f64 = self.parse_as(key)?;
        if !v.is_finite() {
            return Err(Error::config(key, "must be finite"));
        }
        Ok(v)
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.get(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::config(key, format!("cannot parse list item `{}`", p.trim())))
            })
            .collect()
    }

    /// Validates every key and resolves typed settings.
    pub fn resolve(&self) -> Result<Settings> {
        let dataset = DatasetSpec {
            image_size: 16,
            per_class: self.usize("data.per_class", 1)?,
            shape_classes: self.usize("data.classes", 2)?,
            include_negative: self.parse_as("data.negative")?,
            texture_period: (self.usize("data.texture_min", 1)?, self.usize("data.texture_max", 1)?),
            texture_amplitude: self.f64("data.texture_amplitude")?,
        };
        if dataset.shape_classes > 4 {
            return Err(Error::config("data.classes", "at most 4 shape classes"));
        }
        if dataset.texture_period.0 > dataset.texture_period.1 {
            return Err(Error::config("data.texture_max", "must not be below data.texture_min"));
        }
        if !(0.0..=1.0).contains(&dataset.texture_amplitude) {
            return Err(Error::config("data.texture_amplitude", "must be in [0, 1]"));
        }

        let mut model = DenoiserConfig::new(
            16,
            self.usize("model.token_dim", 1)?,
            self.usize("model.heads", 1)?,
            self.usize("model.blocks", 1)?,
            NEGATIVE_CLASS + 1,
        );
        model.injection_layers = (model.num_blocks / 2..model.num_blocks).collect();
        model
            .validate()
            .map_err(|e| Error::config("model.token_dim", e.to_string()))?;
        let checkpoint = match self.get("model.checkpoint") {
            "" => None,
            p => Some(PathBuf::from(p)),
        };

        let train = TrainParams {
            steps: self.usize("train.steps", 1)?,
            batch_size: self.usize("train.batch", 1)?,
            lr: self.f64("train.lr")?,
            clip_norm: self.f64("train.clip")?,
            cond_drop: self.f64("train.cond_drop")?,
            log_every: self.usize("train.log_every", 1)?,
        };
        if train.lr <= 0.0 {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if train.clip_norm <= 0.0 {
            return Err(Error::config("train.clip", "must be positive"));
        }
        if !(0.0..=1.0).contains(&train.cond_drop) {
            return Err(Error::config("train.cond_drop", "must be in [0, 1]"));
        }

        let train_steps = self.usize("schedule.train_steps", 2)?;
        let inference_steps = self.usize("schedule.inference_steps", 1)?;
        if inference_steps > train_steps {
            return Err(Error::config("schedule.inference_steps", "must not exceed schedule.train_steps"));
        }
        let (beta_start, beta_end) = (self.f64("schedule.beta_start")?, self.f64("schedule.beta_end")?);
        if beta_start <= 0.0 || beta_start >= beta_end {
            return Err(Error::config("schedule.beta_start", "need 0 < beta_start < beta_end"));
        }
        if beta_end >= 1.0 {
            return Err(Error::config("schedule.beta_end", "must be below 1"));
        }
        let schedule = make_schedule(train_steps, inference_steps, beta_start, beta_end)?;
        let steps = schedule.inference_steps.len();

        let scale = self.f64("guidance.scale")?;
        if scale < 0.0 {
            return Err(Error::config("guidance.scale", "must be nonnegative"));
        }
        let kind = GuidanceKind::parse(self.get("guidance.mode"))
            .ok_or_else(|| Error::config("guidance.mode", format!("unknown mode `{}`", self.get("guidance.mode"))))?;
        let positive = match self.get("guidance.positive") {
            "prompt" => PositiveCond::Prompt,
            "null" => PositiveCond::Null,
            _ => {
                let c = self.usize("guidance.positive", 0)?;
                if c >= model.num_classes {
                    return Err(Error::config("guidance.positive", format!("unknown class {c}")));
                }
                PositiveCond::Class(c)
            }
        };
        let negative_cond = self.usize("guidance.negative", 0)?;
        if negative_cond >= model.num_classes {
            return Err(Error::config("guidance.negative", format!("unknown class {negative_cond}")));
        }

        let (lg, lp) = (self.f64("fusion.lambda_g")?, self.f64("fusion.lambda_p")?);
        let weights = StratifiedWeights::new(lg, lp)
            .map_err(|_| Error::config("fusion.lambda_p", "lambda_g and lambda_p must lie in [0, 1] and sum to 1"))?;
        let lead = self.usize("fusion.stratified_steps", 0)?;
        if lead > steps {
            return Err(Error::config("fusion.stratified_steps", format!("exceeds {steps} inference steps")));
        }
        let fusion = match self.get("fusion.schedule") {
            "stratified-concat" => FusionSchedule::stratified_then_concat(steps, lead, weights),
            "rival" => FusionSchedule::rival(steps, lead),
            "concat" => FusionSchedule::uniform(steps, AttentionMode::Concatenation),
            "stratified" => FusionSchedule::uniform(steps, AttentionMode::Stratified(weights)),
            "replacement" => FusionSchedule::uniform(steps, AttentionMode::Replacement),
            "original" => FusionSchedule::uniform(steps, AttentionMode::Original),
            other => return Err(Error::config("fusion.schedule", format!("unknown schedule `{other}`"))),
        };

        let inversion_null = match self.get("inversion.cond") {
            "prompt" => false,
            "null" => true,
            other => return Err(Error::config("inversion.cond", format!("expected prompt or null, got `{other}`"))),
        };

        let prompt_files: Vec<PathBuf> = self
            .list::<String>("run.prompt_files")?
            .into_iter()
            .map(PathBuf::from)
            .collect();
        let prompts: Vec<usize> = self.list("run.prompts")?;
        let dataset_len = dataset.per_class * (dataset.shape_classes + usize::from(dataset.include_negative));
        if prompt_files.is_empty() {
            if prompts.is_empty() {
                return Err(Error::config("run.prompts", "at least one prompt is required"));
            }
            if let Some(&bad) = prompts.iter().find(|&&i| i >= dataset_len) {
                return Err(Error::config("run.prompts", format!("index {bad} outside dataset of {dataset_len}")));
            }
        }
        if let Some(missing) = prompt_files.iter().find(|p| !p.is_file()) {
            return Err(Error::config("run.prompt_files", format!("{} does not exist", missing.display())));
        }
        let prompt_class = self.usize("run.prompt_class", 1)?;
        if prompt_class >= model.num_classes {
            return Err(Error::config("run.prompt_class", format!("unknown class {prompt_class}")));
        }

        let lambdas: Vec<f64> = self.list("ablate.lambdas")?;
        if lambdas.is_empty() || lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::config("ablate.lambdas", "need one or more values in [0, 1]"));
        }
        let scales: Vec<f64> = self.list("ablate.scales")?;
        if scales.is_empty() || scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::config("ablate.scales", "need one or more nonnegative values"));
        }
        let ablate_target = match self.get("ablate.target") {
            "lambda" => AblateTarget::Lambda,
            "guidance" => AblateTarget::Guidance,
            "fusion" => AblateTarget::Fusion,
            other => return Err(Error::config("ablate.target", format!("unknown target `{other}`"))),
        };

        Ok(Settings {
            dataset,
            data_seed: self.parse_as("data.seed")?,
            model,
            checkpoint,
            train,
            train_seed: self.parse_as("train.seed")?,
            schedule,
            run: RunSettings {
                kind,
                scale,
                positive,
                negative_cond,
                fusion,
            },
            stratified: weights,
            inversion_null,
            prompts,
            prompt_files,
            prompt_class,
            seed: self.parse_as("run.seed")?,
            num_seeds: self.usize("run.seeds", 1)?,
            images: self.usize("run.images", 1)?,
            ablate_target,
            lambdas,
            scales,
            output_dir: PathBuf::from(self.get("output.dir")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateTarget {
    Lambda,
    Guidance,
    Fusion,
}

/// Typed view of a validated [`ExperimentConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub dataset: DatasetSpec,
    pub data_seed: u64,
    pub model: DenoiserConfig,
    pub checkpoint: Option<PathBuf>,
    pub train: TrainParams,
    pub train_seed: u64,
    pub schedule: NoiseSchedule,
    pub run: RunSettings,
    pub stratified: StratifiedWeights,
    pub inversion_null: bool,
    pub prompts: Vec<usize>,
    pub prompt_files: Vec<PathBuf>,
    pub prompt_class: usize,
    pub seed: u64,
    pub num_seeds: usize,
    pub images: usize,
    pub ablate_target: AblateTarget,
    pub lambdas: Vec<f64>,
    pub scales: Vec<f64>,
    pub output_dir: PathBuf,
}

impl Settings {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.num_seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    pub fn inversion_cond(&self, prompt_class: usize) -> usize {
        if self.inversion_null {
            NULL_CLASS
        } else {
            prompt_class
        }
    }
}
