//! Run configuration and its text format.
//!
//! A config file is a list of `key = value` lines. `#` starts a comment,
//! blank lines are ignored and every key may appear at most once:
//!
//! ```text
//! # planted rank-4 task
//! task.spectrum_profile = 4, 3, 2, 1
//! train.total_epochs = 100
//! train.restart_interval = 10
//! output.dir = out/default
//! ```
//!
//! Keys that are not given keep their defaults. A file whose first
//! non-blank character is `{`, or whose name ends in `.json`, is read as the
//! JSON form of [`RunConfig`] instead. Command-line overrides use the same
//! keys and take precedence over the file.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use autorank::task::linear_profile;
use autorank::{Optimizer, TaskSpec, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub emit_plots: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            train: TrainConfig::default(),
            output_dir: PathBuf::from("out/run"),
            emit_plots: false,
        }
    }
}

/// Where a config value came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Line { file: String, line: usize },
    File(String),
    Override(String),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line { file, line } => write!(f, "{file}:{line}"),
            Origin::File(file) => f.write_str(file),
            Origin::Override(text) => write!(f, "override `{text}`"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{origin}: {message}")]
pub struct ConfigError {
    pub origin: Origin,
    pub message: String,
}

impl ConfigError {
    fn new(origin: Origin, message: impl Into<String>) -> Self {
        Self {
            origin,
            message: message.into(),
        }
    }

    /// Line number within the config file, when the error has one.
    pub fn line(&self) -> Option<usize> {
        match self.origin {
            Origin::Line { line, .. } => Some(line),
            _ => None,
        }
    }
}

macro_rules! keys {
    ($($variant:ident => $name:literal),* $(,)?) => {
        /// Every key the text format accepts, in the order they are applied.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum Key { $($variant),* }

        impl Key {
            pub const ALL: &'static [Key] = &[$(Key::$variant),*];

            pub fn name(self) -> &'static str {
                match self { $(Key::$variant => $name),* }
            }

            pub fn from_name(name: &str) -> Option<Key> {
                match name { $($name => Some(Key::$variant),)* _ => None }
            }
        }
    };
}

keys! {
    TaskD => "task.d",
    TaskK => "task.k",
    TaskRank => "task.rank",
    TaskProfile => "task.spectrum_profile",
    TaskLabelNoise => "task.label_noise_std",
    TaskInputStd => "task.input_std",
    TaskSeed => "task.seed",
    TotalEpochs => "train.total_epochs",
    RestartInterval => "train.restart_interval",
    BatchesPerEpoch => "train.batches_per_epoch",
    BatchSize => "train.batch_size",
    LearningRate => "train.learning_rate",
    Optimizer => "train.optimizer",
    AdamBeta1 => "train.adam_beta1",
    AdamBeta2 => "train.adam_beta2",
    AdamEps => "train.adam_eps",
    WeightDecay => "train.weight_decay",
    MaxRank => "train.max_rank",
    UnionScope => "train.union_scope",
    Mode => "train.mode",
    TrainSeed => "train.seed",
    TrainSamples => "train.train_samples",
    EvalSamples => "train.eval_samples",
    LossFloor => "train.loss_floor",
    LossCeiling => "train.loss_ceiling",
    OutputDir => "output.dir",
    OutputPlots => "output.plots",
}

fn parse_num<T: std::str::FromStr>(value: &str, what: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("expected {what}, got `{value}`"))
}

fn parse_list(value: &str) -> Result<Vec<f64>, String> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|s| parse_num::<f64>(s.trim(), "a comma-separated list of numbers"))
        .collect()
}

fn adam_params(train: &mut TrainConfig, key: Key) -> Result<(&mut f64, &mut f64, &mut f64), String> {
    match &mut train.optimizer {
        Optimizer::Adam { beta1, beta2, eps } => Ok((beta1, beta2, eps)),
        Optimizer::Sgd => Err(format!("{} needs train.optimizer = adam", key.name())),
    }
}

impl Key {
    fn apply(self, c: &mut RunConfig, value: &str) -> Result<(), String> {
        const UINT: &str = "a non-negative integer";
        const REAL: &str = "a number";
        let t = &mut c.train;
        match self {
            Key::TaskD => c.task.d = parse_num(value, UINT)?,
            Key::TaskK => c.task.k = parse_num(value, UINT)?,
            Key::TaskRank => c.task.spectrum_profile = linear_profile(parse_num(value, UINT)?),
            Key::TaskProfile => c.task.spectrum_profile = parse_list(value)?,
            Key::TaskLabelNoise => c.task.label_noise_std = parse_num(value, REAL)?,
            Key::TaskInputStd => c.task.input_std = parse_num(value, REAL)?,
            Key::TaskSeed => c.task.seed = parse_num(value, UINT)?,
            Key::TotalEpochs => t.total_epochs = parse_num(value, UINT)?,
            Key::RestartInterval => t.restart_interval = parse_num(value, UINT)?,
            Key::BatchesPerEpoch => t.batches_per_epoch = parse_num(value, UINT)?,
            Key::BatchSize => t.batch_size = parse_num(value, UINT)?,
            Key::LearningRate => t.learning_rate = parse_num(value, REAL)?,
            Key::Optimizer => {
                t.optimizer = match (value, t.optimizer) {
                    ("sgd", _) => Optimizer::Sgd,
                    ("adam", Optimizer::Adam { .. }) => t.optimizer,
                    ("adam", Optimizer::Sgd) => Optimizer::adam(),
                    _ => return Err(format!("expected `sgd` or `adam`, got `{value}`")),
                }
            }
            Key::AdamBeta1 => *adam_params(t, self)?.0 = parse_num(value, REAL)?,
            Key::AdamBeta2 => *adam_params(t, self)?.1 = parse_num(value, REAL)?,
            Key::AdamEps => *adam_params(t, self)?.2 = parse_num(value, REAL)?,
            Key::WeightDecay => t.weight_decay = parse_num(value, REAL)?,
            Key::MaxRank => t.max_rank = parse_num(value, UINT)?,
            Key::UnionScope => t.union_scope = value.parse().map_err(|e| format!("{e}"))?,
            Key::Mode => t.mode = value.parse().map_err(|e| format!("{e}"))?,
            Key::TrainSeed => t.seed = parse_num(value, UINT)?,
            Key::TrainSamples => t.train_samples = parse_num(value, UINT)?,
            Key::EvalSamples => t.eval_samples = parse_num(value, UINT)?,
            Key::LossFloor => t.loss_floor = parse_num(value, REAL)?,
            Key::LossCeiling => t.loss_ceiling = parse_num(value, REAL)?,
            Key::OutputDir => {
                if value.is_empty() {
                    return Err("output directory must not be empty".into());
                }
                c.output_dir = PathBuf::from(value)
            }
            Key::OutputPlots => {
                c.emit_plots = match value {
                    "true" => true,
                    "false" => false,
                    _ => return Err(format!("expected `true` or `false`, got `{value}`")),
                }
            }
        }
        Ok(())
    }

    /// The value this key holds in `c`, or `None` if it is not written out.
    fn render(self, c: &RunConfig) -> Option<String> {
        let t = &c.train;
        let adam = match t.optimizer {
            Optimizer::Adam { beta1, beta2, eps } => Some((beta1, beta2, eps)),
            Optimizer::Sgd => None,
        };
        Some(match self {
            Key::TaskD => c.task.d.to_string(),
            Key::TaskK => c.task.k.to_string(),
            Key::TaskRank => return None,
            Key::TaskProfile => c
                .task
                .spectrum_profile
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(", "),
            Key::TaskLabelNoise => c.task.label_noise_std.to_string(),
            Key::TaskInputStd => c.task.input_std.to_string(),
            Key::TaskSeed => c.task.seed.to_string(),
            Key::TotalEpochs => t.total_epochs.to_string(),
            Key::RestartInterval => t.restart_interval.to_string(),
            Key::BatchesPerEpoch => t.batches_per_epoch.to_string(),
            Key::BatchSize => t.batch_size.to_string(),
            Key::LearningRate => t.learning_rate.to_string(),
            Key::Optimizer => if adam.is_some() { "adam" } else { "sgd" }.to_string(),
            Key::AdamBeta1 => adam?.0.to_string(),
            Key::AdamBeta2 => adam?.1.to_string(),
            Key::AdamEps => adam?.2.to_string(),
            Key::WeightDecay => t.weight_decay.to_string(),
            Key::MaxRank => t.max_rank.to_string(),
            Key::UnionScope => t.union_scope.to_string(),
            Key::Mode => t.mode.to_string(),
            Key::TrainSeed => t.seed.to_string(),
            Key::TrainSamples => t.train_samples.to_string(),
            Key::EvalSamples => t.eval_samples.to_string(),
            Key::LossFloor => t.loss_floor.to_string(),
            Key::LossCeiling => t.loss_ceiling.to_string(),
            Key::OutputDir => c.output_dir.to_string_lossy().into_owned(),
            Key::OutputPlots => c.emit_plots.to_string(),
        })
    }
}

struct Assignment {
    key: Key,
    value: String,
    origin: Origin,
}

fn split_assignment(text: &str) -> Result<(Key, String), String> {
    let (key, value) = text
        .split_once('=')
        .ok_or_else(|| format!("expected `key = value`, got `{text}`"))?;
    let key = key.trim();
    let key = Key::from_name(key).ok_or_else(|| format!("unknown key `{key}`"))?;
    Ok((key, value.trim().to_string()))
}

fn parse_lines(text: &str, file: &str) -> Result<Vec<Assignment>, ConfigError> {
    let mut out: Vec<Assignment> = Vec::new();
    let mut seen: HashMap<Key, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let origin = Origin::Line {
            file: file.to_string(),
            line,
        };
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = split_assignment(content).map_err(|m| ConfigError::new(origin.clone(), m))?;
        if let Some(first) = seen.insert(key, line) {
            return Err(ConfigError::new(
                origin,
                format!("duplicate key `{}` (first set on line {first})", key.name()),
            ));
        }
        out.push(Assignment { key, value, origin });
    }
    Ok(out)
}

fn parse_overrides(overrides: &[String]) -> Result<Vec<Assignment>, ConfigError> {
    overrides
        .iter()
        .map(|text| {
            let origin = Origin::Override(text.clone());
            let (key, value) = split_assignment(text).map_err(|m| ConfigError::new(origin.clone(), m))?;
            Ok(Assignment { key, value, origin })
        })
        .collect()
}

impl RunConfig {
    /// Reads a config file and applies `key=value` overrides on top.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let file = path.display().to_string();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(Origin::File(file.clone()), format!("cannot read config: {e}")))?;
        let is_json = path.extension().is_some_and(|e| e == "json")
            || text.trim_start().starts_with('{');
        if is_json {
            let base = serde_json::from_str::<RunConfig>(&text).map_err(|e| {
                let origin = Origin::Line {
                    file: file.clone(),
                    line: e.line(),
                };
                ConfigError::new(origin, format!("column {}: {e}", e.column()))
            })?;
            Self::assemble(base, Vec::new(), overrides, &file)
        } else {
            let lines = parse_lines(&text, &file)?;
            Self::assemble(RunConfig::default(), lines, overrides, &file)
        }
    }

    /// Parses the text format from a string.
    pub fn from_text(text: &str, file: &str) -> Result<Self, ConfigError> {
        Self::assemble(RunConfig::default(), parse_lines(text, file)?, &[], file)
    }

    fn assemble(
        mut config: RunConfig,
        lines: Vec<Assignment>,
        overrides: &[String],
        file: &str,
    ) -> Result<Self, ConfigError> {
        let mut latest: HashMap<Key, Assignment> = HashMap::new();
        for a in lines.into_iter().chain(parse_overrides(overrides)?) {
            latest.insert(a.key, a);
        }
        if let (Some(rank), Some(profile)) = (latest.get(&Key::TaskRank), latest.get(&Key::TaskProfile)) {
            let later = match (&rank.origin, &profile.origin) {
                (Origin::Line { line: a, .. }, Origin::Line { line: b, .. }) if a < b => profile,
                (Origin::Override(_), _) => rank,
                _ => profile,
            };
            return Err(ConfigError::new(
                later.origin.clone(),
                "set either task.rank or task.spectrum_profile, not both",
            ));
        }

        let mut ordered: Vec<&Assignment> = latest.values().collect();
        ordered.sort_by_key(|a| a.key);
        for a in &ordered {
            a.key
                .apply(&mut config, &a.value)
                .map_err(|m| ConfigError::new(a.origin.clone(), format!("{}: {m}", a.key.name())))?;
        }

        let origin_of = |keys: &[Key]| {
            keys.iter()
                .find_map(|k| latest.get(k).map(|a| a.origin.clone()))
                .unwrap_or_else(|| Origin::File(file.to_string()))
        };
        if let Err((keys, message)) = config.check() {
            return Err(ConfigError::new(origin_of(keys), message));
        }
        if let Err(e) = config.train.validate() {
            return Err(ConfigError::new(Origin::File(file.to_string()), e.to_string()));
        }
        Ok(config)
    }

    /// Value constraints, each naming the keys that can fix it.
    fn check(&self) -> Result<(), (&'static [Key], String)> {
        let task = &self.task;
        let t = &self.train;
        let min_dim = task.d.min(task.k);
        let fail = |keys: &'static [Key], msg: String| Err((keys, msg));

        if task.d == 0 {
            return fail(&[Key::TaskD], "task.d must be at least 1".into());
        }
        if task.k == 0 {
            return fail(&[Key::TaskK], "task.k must be at least 1".into());
        }
        if task.spectrum_profile.len() > min_dim {
            return fail(
                &[Key::TaskProfile, Key::TaskRank, Key::TaskD, Key::TaskK],
                format!(
                    "task rank {} exceeds min(task.d, task.k) = {min_dim}",
                    task.spectrum_profile.len()
                ),
            );
        }
        if task.spectrum_profile.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return fail(&[Key::TaskProfile], "task.spectrum_profile entries must be positive".into());
        }
        if !(task.label_noise_std >= 0.0 && task.label_noise_std.is_finite()) {
            return fail(&[Key::TaskLabelNoise], "task.label_noise_std must be non-negative".into());
        }
        if !(task.input_std > 0.0 && task.input_std.is_finite()) {
            return fail(&[Key::TaskInputStd], "task.input_std must be positive".into());
        }

        let at_least_one: [(&'static [Key], usize); 5] = [
            (&[Key::TotalEpochs], t.total_epochs),
            (&[Key::RestartInterval], t.restart_interval),
            (&[Key::BatchesPerEpoch], t.batches_per_epoch),
            (&[Key::BatchSize], t.batch_size),
            (&[Key::MaxRank], t.max_rank),
        ];
        for (keys, value) in at_least_one {
            if value == 0 {
                return fail(keys, format!("{} must be at least 1", keys[0].name()));
            }
        }
        if t.max_rank > min_dim {
            return fail(
                &[Key::MaxRank, Key::TaskD, Key::TaskK],
                format!("train.max_rank {} exceeds min(task.d, task.k) = {min_dim}", t.max_rank),
            );
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return fail(&[Key::LearningRate], "train.learning_rate must be positive".into());
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return fail(&[Key::WeightDecay], "train.weight_decay must be non-negative".into());
        }
        if let Optimizer::Adam { beta1, beta2, eps } = t.optimizer {
            if !(0.0..1.0).contains(&beta1) {
                return fail(&[Key::AdamBeta1, Key::Optimizer], "train.adam_beta1 must lie in [0, 1)".into());
            }
            if !(0.0..1.0).contains(&beta2) {
                return fail(&[Key::AdamBeta2, Key::Optimizer], "train.adam_beta2 must lie in [0, 1)".into());
            }
            if !(eps > 0.0 && eps.is_finite()) {
                return fail(&[Key::AdamEps, Key::Optimizer], "train.adam_eps must be positive".into());
            }
        }
        if !(t.loss_floor > 0.0 && t.loss_floor < t.loss_ceiling && t.loss_ceiling < 1.0) {
            return fail(
                &[Key::LossFloor, Key::LossCeiling],
                "need 0 < train.loss_floor < train.loss_ceiling < 1".into(),
            );
        }
        Ok(())
    }

    /// The text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in Key::ALL {
            let Some(value) = key.render(self) else {
                continue;
            };
            let prefix = key.name().split('.').next().unwrap_or("");
            if prefix != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = prefix;
            }
            out.push_str(&format!("{} = {value}\n", key.name()));
        }
        out
    }

    /// Same config with both the task and the training seed set to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.task.seed = seed;
        c.train.seed = seed;
        c
    }

    /// Output directory, placed under `root` when it is relative.
    pub fn resolved_output(&self, root: Option<&Path>) -> PathBuf {
        match root {
            Some(root) if self.output_dir.is_relative() => root.join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}
