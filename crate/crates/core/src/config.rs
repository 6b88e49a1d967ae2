//! `key = value` run configuration with exhaustive validation and a
//! canonical snapshot form.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::ModelKind;
use crate::signal::ChannelSet;
use crate::tensor::AdamConfig;

/// How the holdout folds are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    /// Independent stratified random train/test splits.
    Holdout,
    /// A stratified partition into `folds` disjoint test sets.
    Partition,
}

impl SplitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitMode::Holdout => "holdout",
            SplitMode::Partition => "partition",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Path to `dataset.csv`.
    pub dataset: Option<PathBuf>,
    pub channel_set: ChannelSet,
    pub model: ModelKind,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub folds: usize,
    pub train_frac: f64,
    pub split_mode: SplitMode,
    pub group_by_subject: bool,
    pub augment: bool,
    /// Allow augmentation for models other than the capsule network.
    pub augment_all_models: bool,
    pub augmentation: AugmentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            channel_set: ChannelSet::Fz,
            model: ModelKind::CapsNet,
            out: None,
            seed: 0,
            epochs: 500,
            batch_size: 32,
            adam: AdamConfig::default(),
            folds: 5,
            train_frac: 0.8,
            split_mode: SplitMode::Holdout,
            group_by_subject: false,
            augment: false,
            augment_all_models: false,
            augmentation: AugmentConfig::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "dataset",
    "channel_set",
    "model",
    "out",
    "seed",
    "epochs",
    "batch_size",
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "folds",
    "train_frac",
    "split_mode",
    "group_by_subject",
    "augment",
    "augment_all_models",
    "aug_zoom_range",
    "aug_width_shift",
    "aug_height_shift",
    "aug_rotation_deg",
    "aug_brightness_min",
    "aug_brightness_max",
    "aug_dropout_frac",
    "aug_dropout_prob_min",
    "aug_dropout_prob_max",
    "aug_dropout_downscale",
    "aug_expansion_factor",
    "aug_seed",
];

/// Parses `key = value` lines; `#` starts a comment. Every problem is
/// collected before failing.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => out.push((k.trim().to_string(), v.trim().to_string())),
            _ => errors.push(format!("line {}: expected `key = value`, got `{line}`", i + 1)),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(Error::Config(errors))
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{v}` is not a valid number"))
}

impl RunConfig {
    /// Applies entries in order; later entries win.
    pub fn apply(&mut self, entries: &[(String, String)]) -> Result<()> {
        let mut errors = Vec::new();
        for (key, value) in entries {
            let v = value.as_str();
            let r: std::result::Result<(), String> = (|| {
                let a = &mut self.augmentation;
                match key.as_str() {
                    "dataset" => self.dataset = Some(PathBuf::from(v)),
                    "channel_set" => self.channel_set = v.parse().map_err(|e: Error| e.to_string())?,
                    "model" => self.model = v.parse().map_err(|e: Error| e.to_string())?,
                    "out" => self.out = Some(PathBuf::from(v)),
                    "seed" => self.seed = parse_num(v)?,
                    "epochs" => self.epochs = parse_num(v)?,
                    "batch_size" => self.batch_size = parse_num(v)?,
                    "learning_rate" => self.adam.lr = parse_num(v)?,
                    "beta1" => self.adam.beta1 = parse_num(v)?,
                    "beta2" => self.adam.beta2 = parse_num(v)?,
                    "epsilon" => self.adam.eps = parse_num(v)?,
                    "folds" => self.folds = parse_num(v)?,
                    "train_frac" => self.train_frac = parse_num(v)?,
                    "split_mode" => {
                        self.split_mode = match v.to_ascii_lowercase().as_str() {
                            "holdout" => SplitMode::Holdout,
                            "partition" => SplitMode::Partition,
                            _ => return Err(format!("`{v}` is not holdout or partition")),
                        }
                    }
                    "group_by_subject" => self.group_by_subject = parse_bool(v)?,
                    "augment" => self.augment = parse_bool(v)?,
                    "augment_all_models" => self.augment_all_models = parse_bool(v)?,
                    "aug_zoom_range" => a.zoom_range = parse_num(v)?,
                    "aug_width_shift" => a.width_shift = parse_num(v)?,
                    "aug_height_shift" => a.height_shift = parse_num(v)?,
                    "aug_rotation_deg" => a.rotation_deg = parse_num(v)?,
                    "aug_brightness_min" => a.brightness_range.0 = parse_num(v)?,
                    "aug_brightness_max" => a.brightness_range.1 = parse_num(v)?,
                    "aug_dropout_frac" => a.coarse_dropout.pixel_frac = parse_num(v)?,
                    "aug_dropout_prob_min" => a.coarse_dropout.apply_prob.0 = parse_num(v)?,
                    "aug_dropout_prob_max" => a.coarse_dropout.apply_prob.1 = parse_num(v)?,
                    "aug_dropout_downscale" => a.coarse_dropout.downscale = parse_num(v)?,
                    "aug_expansion_factor" => a.expansion_factor = parse_num(v)?,
                    "aug_seed" => a.seed = parse_num(v)?,
                    _ => return Err("unknown key".to_string()),
                }
                Ok(())
            })();
            if let Err(e) = r {
                errors.push(format!("{key}: {e}"));
            }
        }
        // The augmentation stream follows the run seed unless pinned separately.
        if entries.iter().any(|(k, _)| k == "seed") && !entries.iter().any(|(k, _)| k == "aug_seed") {
            self.augmentation.seed = self.seed;
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply(&parse_key_values(&text)?)?;
        Ok(cfg)
    }

    /// Every violated invariant, in key order.
    pub fn problems(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.epochs < 1 {
            errors.push("epochs must be at least 1".to_string());
        }
        if self.batch_size < 1 {
            errors.push("batch_size must be at least 1".to_string());
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            errors.push(format!("learning_rate {} must be positive", self.adam.lr));
        }
        for (name, b) in [("beta1", self.adam.beta1), ("beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errors.push(format!("{name} {b} must be in [0, 1)"));
            }
        }
        if self.adam.eps.is_nan() || self.adam.eps <= 0.0 {
            errors.push(format!("epsilon {} must be positive", self.adam.eps));
        }
        if self.folds < 2 {
            errors.push("folds must be at least 2".to_string());
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            errors.push(format!("train_frac {} must be in (0, 1)", self.train_frac));
        }
        if self.augment && self.model != ModelKind::CapsNet && !self.augment_all_models {
            errors.push(format!(
                "augment is only enabled for capsnet; set augment_all_models = true to augment {} training sets",
                self.model
            ));
        }
        if self.augment {
            errors.extend(self.augmentation.validate());
        }
        errors
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// The resolved configuration in `key = value` form, one key per line in
    /// [`KEYS`] order. Parsing it back yields the same configuration.
    pub fn snapshot(&self) -> String {
        let a = &self.augmentation;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let values: BTreeMap<&str, String> = [
            ("dataset", path(&self.dataset)),
            ("channel_set", self.channel_set.to_string()),
            ("model", self.model.to_string()),
            ("out", path(&self.out)),
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.adam.lr.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("epsilon", self.adam.eps.to_string()),
            ("folds", self.folds.to_string()),
            ("train_frac", self.train_frac.to_string()),
            ("split_mode", self.split_mode.as_str().to_string()),
            ("group_by_subject", self.group_by_subject.to_string()),
            ("augment", self.augment.to_string()),
            ("augment_all_models", self.augment_all_models.to_string()),
            ("aug_zoom_range", a.zoom_range.to_string()),
            ("aug_width_shift", a.width_shift.to_string()),
            ("aug_height_shift", a.height_shift.to_string()),
            ("aug_rotation_deg", a.rotation_deg.to_string()),
            ("aug_brightness_min", a.brightness_range.0.to_string()),
            ("aug_brightness_max", a.brightness_range.1.to_string()),
            ("aug_dropout_frac", a.coarse_dropout.pixel_frac.to_string()),
            ("aug_dropout_prob_min", a.coarse_dropout.apply_prob.0.to_string()),
            ("aug_dropout_prob_max", a.coarse_dropout.apply_prob.1.to_string()),
            ("aug_dropout_downscale", a.coarse_dropout.downscale.to_string()),
            ("aug_expansion_factor", a.expansion_factor.to_string()),
            ("aug_seed", a.seed.to_string()),
        ]
        .into_iter()
        .collect();
        let mut out = String::new();
        for key in KEYS {
            let v = &values[key];
            if v.is_empty() {
                continue;
            }
            writeln!(out, "{key} = {v}").expect("write to String");
        }
        out
    }
}
