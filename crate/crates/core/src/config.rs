//! Flat `key=value` run configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::Modality;
use crate::model::ModelConfig;
use crate::train::OptimConfig;
use crate::{Error, Result};

/// Every accepted key.
pub const KEYS: [&str; 23] = [
    "num_classes",
    "layout",
    "hyper_joints",
    "frames",
    "channels",
    "strides",
    "layers_per_stage",
    "k_scales",
    "label_smoothing",
    "activation",
    "momentum",
    "weight_decay",
    "base_lr",
    "warmup_epochs",
    "step_epochs",
    "step_factors",
    "epochs",
    "batch_size",
    "clip_norm",
    "manifest",
    "modality",
    "seed",
    "checkpoint_every",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    /// Absolute or base-resolved manifest path; required by `train` and `eval`.
    pub manifest: Option<PathBuf>,
    pub modality: Modality,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            manifest: None,
            modality: Modality::Joint,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses config text; relative paths resolve against `base` and must exist.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            seen.push(key);
            cfg.set(key, value, base)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let (m, o) = (&mut self.model, &mut self.optim);
        match key {
            "num_classes" => m.num_classes = parse_value(key, value)?,
            "layout" => m.layout = value.to_string(),
            "hyper_joints" => m.hyper_joints = parse_value(key, value)?,
            "frames" => m.frames = parse_value(key, value)?,
            "channels" => m.channels = parse_list(key, value)?,
            "strides" => m.strides = parse_list(key, value)?,
            "layers_per_stage" => m.layers_per_stage = parse_value(key, value)?,
            "k_scales" => m.k_scales = parse_list(key, value)?,
            "label_smoothing" => m.label_smoothing = parse_value(key, value)?,
            "activation" => m.activation = value.parse()?,
            "momentum" => o.momentum = parse_value(key, value)?,
            "weight_decay" => o.weight_decay = parse_value(key, value)?,
            "base_lr" => o.base_lr = parse_value(key, value)?,
            "warmup_epochs" => o.warmup_epochs = parse_value(key, value)?,
            "step_epochs" => o.step_epochs = parse_list(key, value)?,
            "step_factors" => o.step_factors = parse_list(key, value)?,
            "epochs" => o.total_epochs = parse_value(key, value)?,
            "batch_size" => o.batch_size = parse_value(key, value)?,
            "clip_norm" => o.clip_norm = if value == "none" { None } else { Some(parse_value(key, value)?) },
            "manifest" => {
                let path = base.join(value);
                if !path.is_file() {
                    return Err(Error::Config(format!("manifest: {} does not exist", path.display())));
                }
                self.manifest = Some(path);
            }
            "modality" => self.modality = value.parse()?,
            "seed" => self.seed = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()
    }

    /// Serializes every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let (m, o) = (&self.model, &self.optim);
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        put("num_classes", m.num_classes.to_string());
        put("layout", m.layout.clone());
        put("hyper_joints", m.hyper_joints.to_string());
        put("frames", m.frames.to_string());
        put("channels", join(&m.channels));
        put("strides", join(&m.strides));
        put("layers_per_stage", m.layers_per_stage.to_string());
        put("k_scales", join(&m.k_scales));
        put("label_smoothing", m.label_smoothing.to_string());
        put("activation", m.activation.name().into());
        put("momentum", o.momentum.to_string());
        put("weight_decay", o.weight_decay.to_string());
        put("base_lr", o.base_lr.to_string());
        put("warmup_epochs", o.warmup_epochs.to_string());
        put("step_epochs", join(&o.step_epochs));
        put("step_factors", join(&o.step_factors));
        put("epochs", o.total_epochs.to_string());
        put("batch_size", o.batch_size.to_string());
        put("clip_norm", o.clip_norm.map_or("none".into(), |c| c.to_string()));
        if let Some(p) = &self.manifest {
            put("manifest", p.display().to_string());
        }
        put("modality", self.modality.name().into());
        put("seed", self.seed.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        s
    }
}
