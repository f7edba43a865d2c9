//! Flat `key = value` run configuration with `#` comments.

use std::path::PathBuf;

use crate::data::SyntheticSpec;
use crate::erasure::MaskConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::models::{DiscriminatorConfig, RecognizerConfig};
use crate::training::TrainConfig;

/// Every setting of a run. Only `out_dir` lacks a default.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub recognizer: RecognizerConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    /// Explicit mask sizes; `None` derives them from the image side.
    pub h_mask: Option<usize>,
    pub w_mask: Option<usize>,
    pub synthetic: SyntheticSpec,
    /// Image tree to train on instead of synthetic data.
    pub dataset_root: Option<PathBuf>,
    pub pairs_per_group: usize,
    pub positive_fraction: f64,
    pub folds: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            recognizer: RecognizerConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            train: TrainConfig::default(),
            h_mask: None,
            w_mask: None,
            synthetic: SyntheticSpec::default(),
            dataset_root: None,
            pairs_per_group: 600,
            positive_fraction: 0.5,
            folds: 1,
            out_dir: None,
        }
    }
}

/// Keys accepted by [`RunConfig::set`].
pub const KEYS: &[&str] = &[
    "stage_widths",
    "embedding_dim",
    "disc_widths",
    "disc_hidden",
    "s",
    "m",
    "t_confidence",
    "n_mask",
    "h_mask",
    "w_mask",
    "fill_value",
    "epochs",
    "steps_per_epoch",
    "batch_size",
    "lr",
    "discriminator_lr",
    "momentum",
    "weight_decay",
    "milestones",
    "seed",
    "use_gam_ct",
    "use_gam_sfre",
    "use_conf_loss",
    "use_random_erase_baseline",
    "penalty_scale",
    "dataset_root",
    "side",
    "groups",
    "ids_per_group",
    "eval_ids_per_group",
    "images_per_id",
    "data_seed",
    "group_signal_strength",
    "id_signal_strength",
    "local_signal_strength",
    "localization",
    "broad_tradeoff",
    "code_corruption",
    "eval_code_corruption",
    "noise",
    "jitter",
    "pairs_per_group",
    "positive_fraction",
    "folds",
    "out_dir",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for key {key}"))),
    }
}

impl RunConfig {
    /// Parses file contents on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {line:?}", n + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "stage_widths" => self.recognizer.stage_widths = parse_list(key, value)?,
            "embedding_dim" => self.recognizer.embedding_dim = parse(key, value)?,
            "disc_widths" => self.discriminator.stage_widths = parse_list(key, value)?,
            "disc_hidden" => self.discriminator.hidden = parse(key, value)?,
            "s" => t.loss.scale = parse(key, value)?,
            "m" => t.loss.margin = parse(key, value)?,
            "t_confidence" => t.loss.t_confidence = parse(key, value)?,
            "n_mask" => t.mask.n_mask = parse(key, value)?,
            "h_mask" => self.h_mask = Some(parse(key, value)?),
            "w_mask" => self.w_mask = Some(parse(key, value)?),
            "fill_value" => t.mask.fill_value = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "steps_per_epoch" => t.steps_per_epoch = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "discriminator_lr" => t.discriminator_lr = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "milestones" => t.milestones = parse_list(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "use_gam_ct" => t.use_gam_ct = parse_bool(key, value)?,
            "use_gam_sfre" => t.use_gam_sfre = parse_bool(key, value)?,
            "use_conf_loss" => t.use_conf_loss = parse_bool(key, value)?,
            "use_random_erase_baseline" => t.use_random_erase_baseline = parse_bool(key, value)?,
            "penalty_scale" => t.penalty_scale = parse(key, value)?,
            "dataset_root" => self.dataset_root = Some(PathBuf::from(value)),
            "side" => self.synthetic.side = parse(key, value)?,
            "groups" => self.synthetic.groups = parse(key, value)?,
            "ids_per_group" => self.synthetic.ids_per_group = parse(key, value)?,
            "eval_ids_per_group" => self.synthetic.eval_ids_per_group = parse(key, value)?,
            "images_per_id" => self.synthetic.images_per_id = parse(key, value)?,
            "data_seed" => self.synthetic.seed = parse(key, value)?,
            "group_signal_strength" => self.synthetic.group_signal_strength = parse(key, value)?,
            "id_signal_strength" => self.synthetic.id_signal_strength = parse(key, value)?,
            "local_signal_strength" => self.synthetic.local_signal_strength = parse(key, value)?,
            "localization" => self.synthetic.localization = parse_list(key, value)?,
            "broad_tradeoff" => self.synthetic.broad_tradeoff = parse(key, value)?,
            "code_corruption" => self.synthetic.code_corruption = parse(key, value)?,
            "eval_code_corruption" => {
                self.synthetic.eval_code_corruption = parse(key, value)?
            }
            "noise" => self.synthetic.noise = parse(key, value)?,
            "jitter" => self.synthetic.jitter = parse(key, value)?,
            "pairs_per_group" => self.pairs_per_group = parse(key, value)?,
            "positive_fraction" => self.positive_fraction = parse(key, value)?,
            "folds" => self.folds = parse(key, value)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Training settings with mask sizes resolved for `side`.
    pub fn train_config(&self, side: usize) -> TrainConfig {
        let derived = MaskConfig::for_image(side, side);
        let mut t = self.train.clone();
        t.mask.h_mask = self.h_mask.unwrap_or(derived.h_mask);
        t.mask.w_mask = self.w_mask.unwrap_or(derived.w_mask);
        t
    }

    pub fn loss(&self) -> &LossConfig {
        &self.train.loss
    }

    pub fn validate(&self) -> Result<()> {
        let side = self.synthetic.side;
        self.train_config(side).validate()?;
        self.train_config(side).mask.validate(side, side)?;
        if self.dataset_root.is_none() {
            self.synthetic.validate()?;
        }
        if self.out_dir.is_none() {
            return Err(Error::Config("out_dir is required".into()));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::Config("positive_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}
