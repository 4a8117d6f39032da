//! Flat `key = value` run configuration.
//!
//! One file configures every stage. Lines are `key = value`; `#` starts a
//! comment; blank lines are ignored. Unknown or repeated keys are rejected.
//! `RunConfig::default().to_text()` lists every key with its default.

use std::fmt::Display;
use std::str::FromStr;

use segforge_core::augment::AugmentConfig;
use segforge_core::losses::LossKind;
use segforge_core::model::ModelConfig;
use segforge_core::phantom::PhantomConfig;
use segforge_core::postprocess::PostprocessConfig;
use segforge_core::preprocess::MODEL_SIZE;
use segforge_core::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("configuration key `{0}` given twice")]
    Duplicate(String),
    #[error("bad value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Master seed; phantom volume `i` uses `seed + i`, and the model,
    /// shuffling and augmentation streams all derive from it.
    pub seed: u64,
    pub phantom: PhantomConfig,
    /// `(width, height)` of preprocessed slices and of the model input.
    pub slice_size: (usize, usize),
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Fraction held out as an unused test part when no validation
    /// directory is given.
    pub test_fraction: f64,
    pub postprocess: PostprocessConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            phantom: PhantomConfig::default(),
            slice_size: (MODEL_SIZE, MODEL_SIZE),
            augment: AugmentConfig::default(),
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            test_fraction: 0.2,
            postprocess: PostprocessConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue { key: key.into(), value: value.into() })
}

fn entry(k: &str, v: impl Display) -> (String, String) {
    (k.to_string(), v.to_string())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(ConfigError::Duplicate(k.into()));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key and its current value, in file order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let (p, a, t, m) = (&self.phantom, &self.augment, &self.train, &self.model);
        let pw = |w: Option<f32>| w.map_or("auto".to_string(), |v| v.to_string());
        vec![
            entry("seed", self.seed),
            entry("phantom.width", p.dims.0),
            entry("phantom.height", p.dims.1),
            entry("phantom.slices", p.dims.2),
            entry("phantom.spacing_x", p.spacing.0),
            entry("phantom.spacing_y", p.spacing.1),
            entry("phantom.spacing_z", p.spacing.2),
            entry("phantom.lung_hu", p.lung_hu),
            entry("phantom.tissue_hu", p.tissue_hu),
            entry("phantom.bone_hu", p.bone_hu),
            entry("phantom.infection_hu", p.infection_hu),
            entry("phantom.blob_count_min", p.blob_count_range.0),
            entry("phantom.blob_count_max", p.blob_count_range.1),
            entry("phantom.blob_radius_min", p.blob_radius_range.0),
            entry("phantom.blob_radius_max", p.blob_radius_range.1),
            entry("phantom.noise_sigma", p.noise_sigma),
            entry("preprocess.width", self.slice_size.0),
            entry("preprocess.height", self.slice_size.1),
            entry("augment.rot_max_deg", a.rot_max_deg),
            entry("augment.translate_max_frac", a.translate_max_frac),
            entry("augment.scale_min", a.scale_range.0),
            entry("augment.scale_max", a.scale_range.1),
            entry("augment.elastic_alpha", a.elastic_alpha),
            entry("augment.elastic_sigma", a.elastic_sigma),
            entry("augment.blur_sigma_min", a.blur_sigma_range.0),
            entry("augment.blur_sigma_max", a.blur_sigma_range.1),
            entry("augment.brightness_delta_max", a.brightness_delta_max),
            entry("augment.contrast_min", a.contrast_range.0),
            entry("augment.contrast_max", a.contrast_range.1),
            entry("augment.p_rotate", a.probs.rotate),
            entry("augment.p_translate", a.probs.translate),
            entry("augment.p_scale", a.probs.scale),
            entry("augment.p_elastic", a.probs.elastic),
            entry("augment.p_blur", a.probs.blur),
            entry("augment.p_brightness", a.probs.brightness),
            entry("augment.p_contrast", a.probs.contrast),
            entry("model.depth", m.depth),
            entry("model.base_channels", m.base_channels),
            entry("model.attention", m.attention_enabled),
            entry("train.lr0", t.lr0),
            entry("train.lr_min", t.lr_min),
            entry("train.batch_size", t.batch_size),
            entry("train.max_epochs", t.max_epochs),
            entry("train.patience", t.patience),
            entry("train.val_fraction", t.val_fraction),
            entry("train.test_fraction", self.test_fraction),
            entry("train.loss", t.loss.name()),
            entry("train.bce_weight", t.loss_cfg.bce_weight),
            entry("train.pos_weight", pw(t.loss_cfg.pos_weight)),
            entry("train.alpha", t.loss_cfg.alpha),
            entry("train.eps", t.loss_cfg.eps),
            entry("postprocess.threshold", self.postprocess.threshold),
            entry("postprocess.min_component_px", self.postprocess.min_component_px),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let (p, a, t, m) = (&mut self.phantom, &mut self.augment, &mut self.train, &mut self.model);
        let f64v = || parse::<f64>(key, v);
        let f32v = || parse::<f32>(key, v);
        let usz = || parse::<usize>(key, v);
        match key {
            "seed" => self.seed = parse(key, v)?,
            "phantom.width" => p.dims.0 = usz()?,
            "phantom.height" => p.dims.1 = usz()?,
            "phantom.slices" => p.dims.2 = usz()?,
            "phantom.spacing_x" => p.spacing.0 = f32v()?,
            "phantom.spacing_y" => p.spacing.1 = f32v()?,
            "phantom.spacing_z" => p.spacing.2 = f32v()?,
            "phantom.lung_hu" => p.lung_hu = f32v()?,
            "phantom.tissue_hu" => p.tissue_hu = f32v()?,
            "phantom.bone_hu" => p.bone_hu = f32v()?,
            "phantom.infection_hu" => p.infection_hu = f32v()?,
            "phantom.blob_count_min" => p.blob_count_range.0 = usz()?,
            "phantom.blob_count_max" => p.blob_count_range.1 = usz()?,
            "phantom.blob_radius_min" => p.blob_radius_range.0 = f64v()?,
            "phantom.blob_radius_max" => p.blob_radius_range.1 = f64v()?,
            "phantom.noise_sigma" => p.noise_sigma = f32v()?,
            "preprocess.width" => self.slice_size.0 = usz()?,
            "preprocess.height" => self.slice_size.1 = usz()?,
            "augment.rot_max_deg" => a.rot_max_deg = f64v()?,
            "augment.translate_max_frac" => a.translate_max_frac = f64v()?,
            "augment.scale_min" => a.scale_range.0 = f64v()?,
            "augment.scale_max" => a.scale_range.1 = f64v()?,
            "augment.elastic_alpha" => a.elastic_alpha = f64v()?,
            "augment.elastic_sigma" => a.elastic_sigma = f64v()?,
            "augment.blur_sigma_min" => a.blur_sigma_range.0 = f64v()?,
            "augment.blur_sigma_max" => a.blur_sigma_range.1 = f64v()?,
            "augment.brightness_delta_max" => a.brightness_delta_max = f32v()?,
            "augment.contrast_min" => a.contrast_range.0 = f32v()?,
            "augment.contrast_max" => a.contrast_range.1 = f32v()?,
            "augment.p_rotate" => a.probs.rotate = f64v()?,
            "augment.p_translate" => a.probs.translate = f64v()?,
            "augment.p_scale" => a.probs.scale = f64v()?,
            "augment.p_elastic" => a.probs.elastic = f64v()?,
            "augment.p_blur" => a.probs.blur = f64v()?,
            "augment.p_brightness" => a.probs.brightness = f64v()?,
            "augment.p_contrast" => a.probs.contrast = f64v()?,
            "model.depth" => m.depth = usz()?,
            "model.base_channels" => m.base_channels = usz()?,
            "model.attention" => m.attention_enabled = parse(key, v)?,
            "train.lr0" => t.lr0 = f64v()?,
            "train.lr_min" => t.lr_min = f64v()?,
            "train.batch_size" => t.batch_size = usz()?,
            "train.max_epochs" => t.max_epochs = usz()?,
            "train.patience" => t.patience = usz()?,
            "train.val_fraction" => t.val_fraction = f64v()?,
            "train.test_fraction" => self.test_fraction = f64v()?,
            "train.loss" => {
                t.loss = LossKind::from_name(v).ok_or(ConfigError::BadValue { key: key.into(), value: v.into() })?
            }
            "train.bce_weight" => t.loss_cfg.bce_weight = f32v()?,
            "train.pos_weight" => t.loss_cfg.pos_weight = if v == "auto" { None } else { Some(f32v()?) },
            "train.alpha" => t.loss_cfg.alpha = f32v()?,
            "train.eps" => t.loss_cfg.eps = f32v()?,
            "postprocess.threshold" => self.postprocess.threshold = f32v()?,
            "postprocess.min_component_px" => self.postprocess.min_component_px = usz()?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn Display| ConfigError::Invalid(e.to_string());
        let mut p = self.phantom.clone();
        p.seed = self.seed;
        p.validate().map_err(|e| inv(&e))?;
        let (w, h) = self.slice_size;
        if w == 0 || h == 0 {
            return Err(ConfigError::Invalid("preprocess size must be positive".into()));
        }
        self.augment_config().validate().map_err(|e| inv(&e))?;
        self.model_config().validate().map_err(|e| inv(&e))?;
        self.train_config().validate().map_err(|e| inv(&e))?;
        let (vf, tf) = (self.train.val_fraction, self.test_fraction);
        if !(tf > 0.0 && vf + tf < 1.0) {
            return Err(ConfigError::Invalid(format!("train.test_fraction {tf} must be positive with val_fraction + test_fraction < 1")));
        }
        self.postprocess.validate().map_err(|e| inv(&e))?;
        Ok(())
    }

    /// Phantom settings for volume `index`.
    pub fn phantom_config(&self, index: u64) -> PhantomConfig {
        PhantomConfig { seed: self.seed.wrapping_add(index), ..self.phantom.clone() }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig { output_size: self.slice_size, seed: self.seed, ..self.augment.clone() }
    }

    pub fn model_config(&self) -> ModelConfig {
        let (w, h) = self.slice_size;
        ModelConfig { in_channels: 1, input_size: (h, w), init_seed: self.seed, ..self.model.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }
}
