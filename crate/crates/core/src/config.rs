//! Flat `key = value` run configuration shared by every command.
//!
//! Keys are namespaced (`box.lr`, `finetune.steps`, ...). `#` starts a
//! comment. Options whose default depends on the detector flavor accept
//! `auto`.

use thiserror::Error;

use crate::assign::{IouAssignConfig, MatchWeights};
use crate::augment::AugConfig;
use crate::data::SyntheticSceneSpec;
use crate::eval::FinetuneConfig;
use crate::losses::{LossConfig, RegKind, RegTerm};
use crate::netcore::{Flavor, NetConfig};
use crate::pretrain::{default_reg_terms, AssignConfig, EmaConfig, ImagePretrainConfig, TrainConfig};
use crate::proposals::ProposalConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Values the config file can hold.
pub trait ConfigValue: Sized {
    fn parse(key: &str, value: &str) -> Result<Self, ConfigError>;
    fn show(&self) -> String;
}

fn bad(key: &str, value: &str) -> ConfigError {
    ConfigError::BadValue { key: key.to_string(), value: value.to_string() }
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse(key: &str, value: &str) -> Result<Self, ConfigError> {
                value.parse().map_err(|_| bad(key, value))
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(usize, u64, f64, f32, bool, Flavor);

impl<T: ConfigValue> ConfigValue for Option<T> {
    fn parse(key: &str, value: &str) -> Result<Self, ConfigError> {
        if value == "auto" {
            Ok(None)
        } else {
            T::parse(key, value).map(Some)
        }
    }

    fn show(&self) -> String {
        self.as_ref().map_or_else(|| "auto".to_string(), T::show)
    }
}

/// Box-domain pre-training options.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSection {
    /// `auto`: 12 for dense flavors, 24 for query.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema: EmaConfig,
    pub tau: f64,
    pub lambda_con: f64,
    pub lambda_reg: f64,
    /// `auto`: the flavor's regression terms.
    pub l1_weight: Option<f64>,
    pub iou_weight: Option<f64>,
    /// `auto`: on for query, off otherwise.
    pub positives_from_momentum: Option<bool>,
    pub exclude_background_negatives: bool,
    pub sample_cap_dense: usize,
    pub sample_cap_query: usize,
    pub pseudo_classes: usize,
    pub pseudo_cls_weight: f64,
    pub no_object_weight: f64,
    pub kmeans_iters: usize,
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_mult: f64,
    pub wd_mult: f64,
    /// Training fraction of the low-data fold.
    pub fraction: f64,
    pub folds: usize,
    pub fold: usize,
    pub sample_cap: usize,
    pub positive_fraction: f64,
    pub eval_ema: f64,
    pub no_object_weight: f64,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub flavor: Flavor,
    pub train_count: usize,
    pub eval_count: usize,
    pub scene: SyntheticSceneSpec,
    pub proposals: ProposalConfig,
    pub aug: AugConfig,
    pub image: ImagePretrainConfig,
    pub box_: BoxSection,
    pub assign: AssignConfig,
    pub finetune: FinetuneSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::new(Flavor::Anchor);
        let ft = FinetuneConfig::new(Flavor::Anchor);
        Self {
            seed: 0,
            flavor: Flavor::Anchor,
            train_count: 500,
            eval_count: 100,
            scene: SyntheticSceneSpec::default(),
            proposals: ProposalConfig::default(),
            aug: AugConfig::default(),
            image: ImagePretrainConfig::default(),
            box_: BoxSection {
                epochs: None,
                batch_size: train.batch_size,
                lr: train.lr,
                weight_decay: train.weight_decay,
                ema: train.ema,
                tau: train.loss.tau,
                lambda_con: train.loss.lambda_con,
                lambda_reg: train.loss.lambda_reg,
                l1_weight: None,
                iou_weight: None,
                positives_from_momentum: None,
                exclude_background_negatives: train.loss.exclude_background_negatives,
                sample_cap_dense: train.sample_cap_dense,
                sample_cap_query: train.sample_cap_query,
                pseudo_classes: train.net.pseudo_classes,
                pseudo_cls_weight: train.pseudo_cls_weight,
                no_object_weight: train.no_object_weight,
                kmeans_iters: train.kmeans_iters,
                checkpoint_every: train.checkpoint_every,
            },
            assign: AssignConfig::default(),
            finetune: FinetuneSection {
                steps: ft.steps,
                batch_size: ft.batch_size,
                lr: ft.lr,
                weight_decay: ft.weight_decay,
                lr_mult: ft.lr_mult,
                wd_mult: ft.wd_mult,
                fraction: 1.0,
                folds: 5,
                fold: 0,
                sample_cap: ft.sample_cap,
                positive_fraction: ft.positive_fraction,
                eval_ema: ft.eval_ema,
                no_object_weight: ft.no_object_weight,
                score_threshold: ft.score_threshold,
                nms_threshold: ft.nms_threshold,
                max_detections: ft.max_detections,
            },
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:tt).+;)*) => {
        impl RunConfig {
            /// Set one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $($key => self.$($field).+ = ConfigValue::parse(key, value)?,)*
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            /// Every key with its current value, in file order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, ConfigValue::show(&self.$($field).+))),*]
            }
        }
    };
}

config_keys! {
    "seed" => seed;
    "flavor" => flavor;
    "data.train_count" => train_count;
    "data.eval_count" => eval_count;
    "data.width" => scene.width;
    "data.height" => scene.height;
    "data.min_objects" => scene.min_objects;
    "data.max_objects" => scene.max_objects;
    "data.min_size" => scene.size_range.0;
    "data.max_size" => scene.size_range.1;
    "data.color_jitter" => scene.color_jitter;
    "data.noise" => scene.noise;
    "data.overlap_cap" => scene.overlap_cap;
    "proposals.k" => proposals.k;
    "proposals.min_region_size" => proposals.min_region_size;
    "proposals.min_box_side" => proposals.min_box_side;
    "proposals.min_aspect" => proposals.aspect_ratio_range.0;
    "proposals.max_aspect" => proposals.aspect_ratio_range.1;
    "proposals.nms" => proposals.nms_threshold;
    "proposals.max_proposals" => proposals.max_proposals;
    "aug.short_side_min" => aug.short_side_range.0;
    "aug.short_side_max" => aug.short_side_range.1;
    "aug.hflip_p" => aug.hflip_p;
    "aug.brightness" => aug.brightness;
    "aug.contrast_min" => aug.contrast_range.0;
    "aug.contrast_max" => aug.contrast_range.1;
    "aug.gain_min" => aug.channel_gain_range.0;
    "aug.gain_max" => aug.channel_gain_range.1;
    "image.epochs" => image.epochs;
    "image.batch_size" => image.batch_size;
    "image.lr" => image.lr;
    "image.weight_decay" => image.weight_decay;
    "image.proj_dim" => image.proj_dim;
    "image.pred_hidden" => image.pred_hidden;
    "box.epochs" => box_.epochs;
    "box.batch_size" => box_.batch_size;
    "box.lr" => box_.lr;
    "box.weight_decay" => box_.weight_decay;
    "box.ema_m" => box_.ema.m;
    "box.ema_projection" => box_.ema.include_projection;
    "box.tau" => box_.tau;
    "box.lambda_con" => box_.lambda_con;
    "box.lambda_reg" => box_.lambda_reg;
    "box.l1_weight" => box_.l1_weight;
    "box.iou_weight" => box_.iou_weight;
    "box.positives_from_momentum" => box_.positives_from_momentum;
    "box.exclude_background_negatives" => box_.exclude_background_negatives;
    "box.sample_cap_dense" => box_.sample_cap_dense;
    "box.sample_cap_query" => box_.sample_cap_query;
    "box.pseudo_classes" => box_.pseudo_classes;
    "box.pseudo_cls_weight" => box_.pseudo_cls_weight;
    "box.no_object_weight" => box_.no_object_weight;
    "box.kmeans_iters" => box_.kmeans_iters;
    "box.checkpoint_every" => box_.checkpoint_every;
    "assign.pos_iou" => assign.iou.pos_thr;
    "assign.neg_iou" => assign.iou.neg_thr;
    "assign.low_quality_rescue" => assign.iou.low_quality_rescue;
    "assign.scale_split" => assign.scale_split;
    "assign.cost_l1" => assign.match_weights.l1;
    "assign.cost_iou" => assign.match_weights.iou;
    "assign.cost_class" => assign.match_weights.cls;
    "finetune.steps" => finetune.steps;
    "finetune.batch_size" => finetune.batch_size;
    "finetune.lr" => finetune.lr;
    "finetune.weight_decay" => finetune.weight_decay;
    "finetune.lr_mult" => finetune.lr_mult;
    "finetune.wd_mult" => finetune.wd_mult;
    "finetune.fraction" => finetune.fraction;
    "finetune.folds" => finetune.folds;
    "finetune.fold" => finetune.fold;
    "finetune.sample_cap" => finetune.sample_cap;
    "finetune.positive_fraction" => finetune.positive_fraction;
    "finetune.eval_ema" => finetune.eval_ema;
    "finetune.no_object_weight" => finetune.no_object_weight;
    "finetune.score_threshold" => finetune.score_threshold;
    "finetune.nms" => finetune.nms_threshold;
    "finetune.max_detections" => finetune.max_detections;
}

/// `(key, value)` pairs of a config file, in order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1 });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Text form that parses back to the same config.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn net_config(&self, num_classes: usize) -> NetConfig {
        NetConfig { num_classes, pseudo_classes: self.box_.pseudo_classes, ..NetConfig::new(self.flavor) }
    }

    fn reg_terms(&self) -> Vec<RegTerm> {
        if self.box_.l1_weight.is_none() && self.box_.iou_weight.is_none() {
            return default_reg_terms(self.flavor);
        }
        let mut terms = Vec::new();
        for (kind, w) in [(RegKind::L1Deltas, self.box_.l1_weight), (RegKind::Iou, self.box_.iou_weight)] {
            if let Some(w) = w.filter(|w| *w != 0.0) {
                terms.push(RegTerm { kind, weight: w });
            }
        }
        terms
    }

    pub fn train_config(&self, num_classes: usize) -> TrainConfig {
        let base = TrainConfig::new(self.flavor);
        let b = &self.box_;
        TrainConfig {
            seed: self.seed,
            epochs: b.epochs.unwrap_or(base.epochs),
            batch_size: b.batch_size,
            lr: b.lr,
            weight_decay: b.weight_decay,
            ema: b.ema,
            loss: LossConfig {
                tau: b.tau,
                lambda_con: b.lambda_con,
                lambda_reg: b.lambda_reg,
                reg_terms: self.reg_terms(),
                positives_from_momentum: b.positives_from_momentum.unwrap_or(base.loss.positives_from_momentum),
                exclude_background_negatives: b.exclude_background_negatives,
            },
            aug: self.aug.clone(),
            assign: self.assign.clone(),
            net: self.net_config(num_classes),
            sample_cap_dense: b.sample_cap_dense,
            sample_cap_query: b.sample_cap_query,
            pseudo_cls_weight: b.pseudo_cls_weight,
            no_object_weight: b.no_object_weight,
            kmeans_iters: b.kmeans_iters,
            checkpoint_every: b.checkpoint_every,
        }
    }

    pub fn image_config(&self) -> ImagePretrainConfig {
        ImagePretrainConfig { seed: self.seed, aug: self.aug.clone(), ..self.image.clone() }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            seed: self.seed,
            steps: f.steps,
            batch_size: f.batch_size,
            lr: f.lr,
            weight_decay: f.weight_decay,
            lr_mult: f.lr_mult,
            wd_mult: f.wd_mult,
            assign: self.assign.clone(),
            sample_cap: f.sample_cap,
            positive_fraction: f.positive_fraction,
            eval_ema: f.eval_ema,
            no_object_weight: f.no_object_weight,
            score_threshold: f.score_threshold,
            nms_threshold: f.nms_threshold,
            max_detections: f.max_detections,
            ..FinetuneConfig::new(self.flavor)
        }
    }

    /// Checks every derived config.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: String| ConfigError::Invalid(e);
        self.scene.validate().map_err(|e| inv(e.to_string()))?;
        self.proposals.validate().map_err(|e| inv(e.to_string()))?;
        self.train_config(self.scene.classes.len()).validate().map_err(|e| inv(e.to_string()))?;
        let (lo, hi) = self.aug.short_side_range;
        if lo == 0 || lo > hi {
            return Err(inv(format!("short side range ({lo}, {hi})")));
        }
        let IouAssignConfig { pos_thr, neg_thr, .. } = self.assign.iou;
        if !(0.0 <= neg_thr && neg_thr <= pos_thr && pos_thr <= 1.0) {
            return Err(inv(format!("IoU thresholds neg {neg_thr} / pos {pos_thr}")));
        }
        if self.image.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(inv("batch sizes must be positive".into()));
        }
        let f = &self.finetune;
        if !(0.0..1.0).contains(&f.eval_ema) {
            return Err(inv(format!("finetune.eval_ema {} outside [0, 1)", f.eval_ema)));
        }
        if !(f.positive_fraction > 0.0 && f.positive_fraction <= 1.0) {
            return Err(inv(format!("finetune.positive_fraction {} outside (0, 1]", f.positive_fraction)));
        }
        if !(f.fraction > 0.0 && f.fraction <= 1.0) {
            return Err(inv(format!("finetune.fraction {} outside (0, 1]", f.fraction)));
        }
        if f.fold >= f.folds {
            return Err(inv(format!("finetune.fold {} needs finetune.folds > {}", f.fold, f.fold)));
        }
        if self.train_count == 0 || self.eval_count == 0 {
            return Err(inv("dataset sizes must be positive".into()));
        }
        let MatchWeights { l1, iou, cls } = self.assign.match_weights;
        if [l1, iou, cls].iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(inv("matching cost weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}
