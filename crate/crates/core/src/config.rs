//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored; values run to the
//! end of the line with surrounding whitespace trimmed. Lists are
//! comma-separated. `preset` (model) is applied before any other key,
//! regardless of its position.
//!
//! Model keys: `preset`, `image_size`, `patch_size`, `in_channels`,
//! `embed_dim`, `depths`, `num_heads`, `mlp_ratio`, `candidate_windows`,
//! `fixed_window`, `num_classes`, `selection` (`soft`|`hard`),
//! `dynamic_window`, `cross_scale`, `cross_scale_from`.
//!
//! Training keys: `epochs`, `lr`, `batch_size`, `tau`, `pseudo_weight`,
//! `warmup_epochs`, `optimizer` (`adam`|`sgd`), `momentum`, `scheduler`
//! (`cosine`|`step`|`constant`), `min_lr_factor`, `step_size`,
//! `step_gamma`, `consistency`, `consistency_weight`, `diffusion_steps`,
//! `beta_start`, `beta_end`, `t_max`, `augment_pseudo`, `seed`, `num_runs`,
//! `seeds`, `eval_batch_size`, `checkpoint_every`, `record_wall_time`.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Parses `key = value` lines, reporting the 1-based line of any error.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(|s| parse_value(key, s.trim()))
        .collect()
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

pub fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    /// Applies one key; returns `false` when the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "preset" => *self = ModelConfig::preset(value)?,
            "image_size" => self.image_size = parse_value(key, value)?,
            "patch_size" => self.patch_size = parse_value(key, value)?,
            "in_channels" => self.in_channels = parse_value(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "depths" => self.depths = parse_list(key, value)?,
            "num_heads" => self.num_heads = parse_list(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse_value(key, value)?,
            "candidate_windows" => self.candidate_windows = parse_list(key, value)?,
            "fixed_window" => self.fixed_window = parse_value(key, value)?,
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "selection" => self.selection = value.parse()?,
            "dynamic_window" => self.dynamic_window = parse_bool(key, value)?,
            "cross_scale" => self.cross_scale = parse_bool(key, value)?,
            "cross_scale_from" => self.cross_scale_from = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_size", self.image_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("depths", join(&self.depths)),
            ("num_heads", join(&self.num_heads)),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("candidate_windows", join(&self.candidate_windows)),
            ("fixed_window", self.fixed_window.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("selection", self.selection.as_str().to_string()),
            ("dynamic_window", self.dynamic_window.to_string()),
            ("cross_scale", self.cross_scale.to_string()),
            ("cross_scale_from", self.cross_scale_from.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        render(&self.to_pairs())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg = ModelConfig::default();
        apply_preset_first(&pairs, |k, v| cfg.set(k, v))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn apply_preset_first(pairs: &[(String, String)], mut set: impl FnMut(&str, &str) -> Result<bool>) -> Result<()> {
    let ordered = pairs
        .iter()
        .filter(|(k, _)| k == "preset")
        .chain(pairs.iter().filter(|(k, _)| k != "preset"));
    for (k, v) in ordered {
        if !set(k, v)? {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
    }
    Ok(())
}

fn render(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Model and training settings read from one file.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut model = ModelConfig::default();
        let mut train = TrainConfig::default();
        apply_preset_first(&pairs, |k, v| Ok(model.set(k, v)? || train.set(k, v)?))?;
        model.validate()?;
        train.validate()?;
        Ok(Self { model, train })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# model\n");
        out += &render(&self.model.to_pairs());
        out += "\n# training\n";
        out += &render(&self.train.to_pairs());
        out
    }
}
