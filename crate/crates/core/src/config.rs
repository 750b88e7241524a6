//! Experiment configuration and its INI form.
//!
//! The file is a list of `[section]` headers followed by `key = value` lines;
//! `#` and `;` start comment lines. Unknown sections and keys are errors.
//! Keys left out keep their defaults.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset::DatasetSpec;
use crate::diffusion::{NoiseSchedule, SigmaMode};
use crate::error::{Error, Result};
use crate::matching::{MatchingLoss, Variant};
use crate::model::ModelSpec;
use crate::weather::WeatherKind;

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma: SigmaMode,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { steps: 50, beta_start: 1e-4, beta_end: 0.02, sigma: SigmaMode::Posterior }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Model hyperparameters that are not implied by the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch: usize,
    pub latent_channels: usize,
    pub embed_dim: usize,
    pub decoder_channels: [usize; 2],
    pub head_hidden: usize,
    pub dropout: f64,
    pub global_context: bool,
    pub input_skip: bool,
    pub variant: Variant,
    pub matching_loss: MatchingLoss,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let m = ModelSpec::default();
        Self {
            patch: m.patch,
            latent_channels: m.latent_channels,
            embed_dim: m.embed_dim,
            decoder_channels: m.decoder_channels,
            head_hidden: m.head_hidden,
            dropout: m.dropout,
            global_context: m.global_context,
            input_skip: m.input_skip,
            variant: Variant::Joint,
            matching_loss: MatchingLoss::CrossEntropy,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Accumulate the loss over every t instead of sampling one per batch.
    pub full_chain: bool,
    /// Let L_mat's gradient flow back through ẑ_0 into the restoration path.
    pub mat_through_restoration: bool,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 0.01,
            lr_head: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch: 16,
            epochs: 30,
            full_chain: false,
            mat_through_restoration: false,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Evaluate every this many epochs during training; 0 disables.
    pub eval_every: usize,
    /// Share of each training location's drone views held out for evaluation.
    pub held_out_fraction: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: vec![1, 5, 10], eval_every: 0, held_out_fraction: 0.2, seed: 11 }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub schedule: ScheduleSpec,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// The small default experiment (32×32 images, 64 locations).
    pub fn toy() -> Self {
        Self { output_dir: PathBuf::from("run"), ..Self::default() }
    }

    /// Same experiment at the full 448×448 input size; the patch grows so the
    /// latent grid stays small.
    pub fn full_scale() -> Self {
        let mut c = Self::toy();
        c.dataset.image_size = 448;
        c.model.patch = 16;
        c
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            image_size: self.dataset.image_size,
            channels: 3,
            patch: self.model.patch,
            latent_channels: self.model.latent_channels,
            embed_dim: self.model.embed_dim,
            decoder_channels: self.model.decoder_channels,
            head_hidden: self.model.head_hidden,
            dropout: self.model.dropout,
            classes: self.dataset.locations,
            global_context: self.model.global_context,
            input_skip: self.model.input_skip,
            steps: self.schedule.steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        self.dataset.validate()?;
        self.schedule.build()?;
        self.model_spec().validate()?;
        let o = &self.optim;
        if !(o.lr_backbone > 0.0 && o.lr_backbone.is_finite() && o.lr_head > 0.0 && o.lr_head.is_finite()) {
            return err("learning rates must be positive and finite");
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return err("momentum must lie in [0, 1)");
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return err("weight decay must be non-negative");
        }
        if o.batch == 0 {
            return err("batch size must be positive");
        }
        let e = &self.eval;
        if e.ks.is_empty() || e.ks[0] == 0 || e.ks.windows(2).any(|w| w[0] >= w[1]) {
            return err("ks must be positive and strictly ascending");
        }
        if !(e.held_out_fraction > 0.0 && e.held_out_fraction < 1.0) {
            return err("held_out_fraction must lie in (0, 1)");
        }
        if self.dataset.views_per_location < 2 {
            return err("need at least 2 drone views per location to hold some out");
        }
        Ok(())
    }

    pub fn to_ini(&self) -> String {
        let d = &self.dataset;
        let s = &self.schedule;
        let m = &self.model;
        let o = &self.optim;
        let e = &self.eval;
        let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let _ = writeln!(out, "[dataset]");
        let _ = writeln!(out, "locations = {}", d.locations);
        let _ = writeln!(out, "views_per_location = {}", d.views_per_location);
        let _ = writeln!(out, "unseen_locations = {}", d.unseen_locations);
        let _ = writeln!(out, "distractors = {}", d.distractors);
        let _ = writeln!(out, "image_size = {}", d.image_size);
        let _ = writeln!(out, "conditions = {}", join(&mut d.conditions.iter().map(|k| k.to_string())));
        let _ = writeln!(out, "intensity_min = {:?}", d.intensity_min);
        let _ = writeln!(out, "intensity_max = {:?}", d.intensity_max);
        let _ = writeln!(out, "seed = {}", d.seed);
        let _ = writeln!(out, "\n[schedule]");
        let _ = writeln!(out, "steps = {}", s.steps);
        let _ = writeln!(out, "beta_start = {:?}", s.beta_start);
        let _ = writeln!(out, "beta_end = {:?}", s.beta_end);
        let _ = writeln!(out, "sigma = {}", s.sigma);
        let _ = writeln!(out, "\n[model]");
        let _ = writeln!(out, "patch = {}", m.patch);
        let _ = writeln!(out, "latent_channels = {}", m.latent_channels);
        let _ = writeln!(out, "embed_dim = {}", m.embed_dim);
        let _ = writeln!(out, "decoder_channels = {},{}", m.decoder_channels[0], m.decoder_channels[1]);
        let _ = writeln!(out, "head_hidden = {}", m.head_hidden);
        let _ = writeln!(out, "dropout = {:?}", m.dropout);
        let _ = writeln!(out, "global_context = {}", m.global_context);
        let _ = writeln!(out, "input_skip = {}", m.input_skip);
        let _ = writeln!(out, "variant = {}", m.variant);
        let _ = writeln!(out, "matching_loss = {}", m.matching_loss);
        let _ = writeln!(out, "\n[optim]");
        let _ = writeln!(out, "lr_backbone = {:?}", o.lr_backbone);
        let _ = writeln!(out, "lr_head = {:?}", o.lr_head);
        let _ = writeln!(out, "momentum = {:?}", o.momentum);
        let _ = writeln!(out, "weight_decay = {:?}", o.weight_decay);
        let _ = writeln!(out, "batch = {}", o.batch);
        let _ = writeln!(out, "epochs = {}", o.epochs);
        let _ = writeln!(out, "full_chain = {}", o.full_chain);
        let _ = writeln!(out, "mat_through_restoration = {}", o.mat_through_restoration);
        let _ = writeln!(out, "seed = {}", o.seed);
        let _ = writeln!(out, "\n[eval]");
        let _ = writeln!(out, "ks = {}", join(&mut e.ks.iter().map(|k| k.to_string())));
        let _ = writeln!(out, "eval_every = {}", e.eval_every);
        let _ = writeln!(out, "held_out_fraction = {:?}", e.held_out_fraction);
        let _ = writeln!(out, "seed = {}", e.seed);
        let _ = writeln!(out, "\n[output]");
        let _ = writeln!(out, "dir = {}", self.output_dir.display());
        out
    }

    pub fn from_ini(text: &str) -> Result<Self> {
        let mut cfg = Self::toy();
        let mut section: Option<String> = None;
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {lineno}: malformed section header")))?
                    .trim();
                if !["dataset", "schedule", "model", "optim", "eval", "output"].contains(&name) {
                    return Err(Error::Config(format!("line {lineno}: unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {lineno}: expected `key = value`")))?;
            let (key, value) = (key.trim(), value.trim());
            let sec = section
                .as_deref()
                .ok_or_else(|| Error::Config(format!("line {lineno}: key `{key}` outside any section")))?;
            if !seen.insert(format!("{sec}.{key}")) {
                return Err(Error::Config(format!("line {lineno}: duplicate key {sec}.{key}")));
            }
            cfg.set(sec, key, value)
                .map_err(|e| Error::Config(format!("line {lineno}: {sec}.{key}: {}", strip_config(e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_ini(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ini())?;
        Ok(())
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let d = &mut self.dataset;
        let s = &mut self.schedule;
        let m = &mut self.model;
        let o = &mut self.optim;
        let e = &mut self.eval;
        match (section, key) {
            ("dataset", "locations") => d.locations = parse(v)?,
            ("dataset", "views_per_location") => d.views_per_location = parse(v)?,
            ("dataset", "unseen_locations") => d.unseen_locations = parse(v)?,
            ("dataset", "distractors") => d.distractors = parse(v)?,
            ("dataset", "image_size") => d.image_size = parse(v)?,
            ("dataset", "conditions") => d.conditions = parse_list(v)?,
            ("dataset", "intensity_min") => d.intensity_min = parse(v)?,
            ("dataset", "intensity_max") => d.intensity_max = parse(v)?,
            ("dataset", "seed") => d.seed = parse(v)?,
            ("schedule", "steps") => s.steps = parse(v)?,
            ("schedule", "beta_start") => s.beta_start = parse(v)?,
            ("schedule", "beta_end") => s.beta_end = parse(v)?,
            ("schedule", "sigma") => s.sigma = parse(v)?,
            ("model", "patch") => m.patch = parse(v)?,
            ("model", "latent_channels") => m.latent_channels = parse(v)?,
            ("model", "embed_dim") => m.embed_dim = parse(v)?,
            ("model", "decoder_channels") => {
                let list: Vec<usize> = parse_list(v)?;
                m.decoder_channels = list
                    .try_into()
                    .map_err(|_| Error::Config("expected two comma-separated widths".into()))?;
            }
            ("model", "head_hidden") => m.head_hidden = parse(v)?,
            ("model", "dropout") => m.dropout = parse(v)?,
            ("model", "global_context") => m.global_context = parse(v)?,
            ("model", "input_skip") => m.input_skip = parse(v)?,
            ("model", "variant") => m.variant = parse(v)?,
            ("model", "matching_loss") => m.matching_loss = parse(v)?,
            ("optim", "lr_backbone") => o.lr_backbone = parse(v)?,
            ("optim", "lr_head") => o.lr_head = parse(v)?,
            ("optim", "momentum") => o.momentum = parse(v)?,
            ("optim", "weight_decay") => o.weight_decay = parse(v)?,
            ("optim", "batch") => o.batch = parse(v)?,
            ("optim", "epochs") => o.epochs = parse(v)?,
            ("optim", "full_chain") => o.full_chain = parse(v)?,
            ("optim", "mat_through_restoration") => o.mat_through_restoration = parse(v)?,
            ("optim", "seed") => o.seed = parse(v)?,
            ("eval", "ks") => e.ks = parse_list(v)?,
            ("eval", "eval_every") => e.eval_every = parse(v)?,
            ("eval", "held_out_fraction") => e.held_out_fraction = parse(v)?,
            ("eval", "seed") => e.seed = parse(v)?,
            ("output", "dir") => self.output_dir = PathBuf::from(v),
            _ => return Err(Error::Config("unknown key".into())),
        }
        Ok(())
    }
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

fn parse<T: FromStr>(v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| Error::Config(format!("cannot parse `{v}`: {e}")))
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|p| parse(p.trim())).collect()
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_ini(s)
    }
}

/// Names accepted by the `conditions` key.
pub fn condition_names() -> Vec<&'static str> {
    WeatherKind::ALL.iter().map(|k| k.name()).collect()
}
