//! Model, training, and data configuration, plus the flat key=value run
//! config consumed by the command-line tools.

use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Dimensions and hyperparameters of the detection model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Feature dimension d shared by image and text features.
    pub feature_dim: usize,
    /// Number of in-distribution classes M.
    pub num_classes: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Learnable context tokens per class prompt.
    pub context_len: usize,
    /// Learnable background prompt tokens.
    pub background_len: usize,
    /// Training softmax temperature. Not fixed by the reference recipe;
    /// 0.01 is the usual contrastive-pretraining value.
    pub temperature_train: f64,
    /// Test-time softmax temperature, fixed at 1.0.
    pub temperature_test: f64,
    /// Weight of the background entropy regularizer.
    pub ood_weight: f64,
    /// Strength of the self-calibrated extraction threshold shift.
    pub sct_strength: f64,
    /// Patch count kept as foreground by the fixed top-K baseline.
    pub topk: usize,
    /// Number of largest per-patch terms averaged by the R-MCM score.
    pub rmcm_q: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 24,
            num_classes: 8,
            grid_h: 4,
            grid_w: 4,
            context_len: 16,
            background_len: 64,
            temperature_train: 0.01,
            temperature_test: 1.0,
            ood_weight: 0.2,
            sct_strength: 1.0,
            topk: 6,
            rmcm_q: 10,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("num_classes", self.num_classes),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("context_len", self.context_len),
            ("background_len", self.background_len),
        ];
        for (name, value) in positive {
            if value < 1 {
                return Err(Error::invalid_config(name, "must be at least 1"));
            }
        }
        if self.temperature_train <= 0.0 || !self.temperature_train.is_finite() {
            return Err(Error::invalid_config("tau", "must be a positive real"));
        }
        if self.temperature_test <= 0.0 || !self.temperature_test.is_finite() {
            return Err(Error::invalid_config("tau_test", "must be a positive real"));
        }
        if self.ood_weight < 0.0 || !self.ood_weight.is_finite() {
            return Err(Error::invalid_config("lambda", "must be non-negative"));
        }
        if self.sct_strength < 0.0 || !self.sct_strength.is_finite() {
            return Err(Error::invalid_config("alpha", "must be non-negative"));
        }
        if self.rmcm_q < 1 || self.rmcm_q > self.num_patches() {
            return Err(Error::invalid_config(
                "rmcm_q",
                format!("must be in [1, {}]", self.num_patches()),
            ));
        }
        if self.topk >= self.num_patches() {
            return Err(Error::invalid_config(
                "topk",
                format!("must be below the patch count {}", self.num_patches()),
            ));
        }
        Ok(())
    }
}

/// Which pipeline stages are active during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StrategyFlags {
    /// Refine the background similarity with the class-similarity weights.
    pub use_refinement: bool,
    /// Select background patches by the confidence-shifted threshold
    /// instead of a fixed count.
    pub use_patch_sct: bool,
    /// Modulate the loss terms by the ground-truth probability.
    pub use_loss_modulation: bool,
    /// Study switch: also differentiate through the modulation factor.
    /// Off by default; the factor is treated as a constant.
    pub grad_through_modulation: bool,
}

impl StrategyFlags {
    /// Everything on: the full method.
    pub fn full() -> Self {
        StrategyFlags {
            use_refinement: true,
            use_patch_sct: true,
            use_loss_modulation: true,
            grad_through_modulation: false,
        }
    }

    /// Everything off: plain class-prompt tuning with fixed top-K entropy
    /// regularization.
    pub fn baseline() -> Self {
        StrategyFlags {
            use_refinement: false,
            use_patch_sct: false,
            use_loss_modulation: false,
            grad_through_modulation: false,
        }
    }
}

impl Default for StrategyFlags {
    fn default() -> Self {
        StrategyFlags::full()
    }
}

/// Training-loop hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Labeled images per class in the few-shot training set.
    pub shots: usize,
    pub flags: StrategyFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 0.002,
            batch_size: 32,
            shots: 4,
            flags: StrategyFlags::full(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::invalid_config(
                "learning_rate",
                "must be non-negative",
            ));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid_config("batch_size", "must be at least 1"));
        }
        if self.shots < 1 {
            return Err(Error::invalid_config("shots", "must be at least 1"));
        }
        Ok(())
    }
}

/// How the background prompt tokens are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundInit {
    /// Point the background prompt at the mean background direction of the
    /// synthetic pool. Stands in for a prompt that has already picked up
    /// generic background semantics.
    PoolAligned,
    /// Small random tokens.
    Random,
}

impl FromStr for BackgroundInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pool_aligned" => Ok(BackgroundInit::PoolAligned),
            "random" => Ok(BackgroundInit::Random),
            other => Err(Error::invalid_config(
                "background_init",
                format!("unknown value `{other}` (expected pool_aligned or random)"),
            )),
        }
    }
}

impl BackgroundInit {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackgroundInit::PoolAligned => "pool_aligned",
            BackgroundInit::Random => "random",
        }
    }
}

/// Scalar knobs of the synthetic data generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Raw per-patch dimension before projection into feature space.
    pub raw_patch_dim: usize,
    pub num_ood_classes: usize,
    pub images_per_eval_class: usize,
    pub background_pool_size: usize,
    pub coverage_min: f64,
    pub coverage_max: f64,
    /// Std of the pre-normalization perturbation added per raw component.
    pub noise_level: f64,
    /// Norm of the shared offset applied to class word embeddings at
    /// initialization; training has to undo it through the context tokens.
    pub class_word_skew: f64,
    pub background_init: BackgroundInit,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            raw_patch_dim: 24,
            num_ood_classes: 4,
            images_per_eval_class: 16,
            background_pool_size: 3,
            coverage_min: 0.25,
            coverage_max: 0.5,
            noise_level: 0.15,
            class_word_skew: 25.0,
            background_init: BackgroundInit::PoolAligned,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.raw_patch_dim < 1 {
            return Err(Error::invalid_config("raw_patch_dim", "must be at least 1"));
        }
        if self.background_pool_size < 1 {
            return Err(Error::invalid_config(
                "background_pool_size",
                "must be at least 1",
            ));
        }
        if !(self.coverage_min > 0.0 && self.coverage_max <= 1.0) {
            return Err(Error::invalid_config(
                "coverage_min",
                "coverage range must lie in (0, 1]",
            ));
        }
        if self.coverage_min > self.coverage_max {
            return Err(Error::invalid_config(
                "coverage_min",
                "must not exceed coverage_max",
            ));
        }
        if self.noise_level < 0.0 || !self.noise_level.is_finite() {
            return Err(Error::invalid_config("noise_level", "must be non-negative"));
        }
        if self.class_word_skew < 0.0 || !self.class_word_skew.is_finite() {
            return Err(Error::invalid_config(
                "class_word_skew",
                "must be non-negative",
            ));
        }
        Ok(())
    }
}

/// Test-time scoring rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    Mcm,
    GlMcm,
    Rmcm,
}

impl FromStr for ScoreKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mcm" => Ok(ScoreKind::Mcm),
            "glmcm" => Ok(ScoreKind::GlMcm),
            "rmcm" => Ok(ScoreKind::Rmcm),
            other => Err(Error::invalid_config(
                "score",
                format!("unknown score `{other}` (expected mcm, glmcm, or rmcm)"),
            )),
        }
    }
}

impl ScoreKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreKind::Mcm => "mcm",
            ScoreKind::GlMcm => "glmcm",
            ScoreKind::Rmcm => "rmcm",
        }
    }
}

/// Full experiment configuration as read from a key=value config file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SynthConfig,
    pub score: ScoreKind,
    /// When set, datasets are read from binary dumps under this directory
    /// instead of being synthesized.
    pub dataset_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: SynthConfig::default(),
            score: ScoreKind::Rmcm,
            dataset_dir: None,
        }
    }
}

fn parse_value<T: FromStr>(field: &str, raw: &str) -> Result<T> {
    raw.parse::<T>()
        .map_err(|_| Error::invalid_config(field, format!("cannot parse `{raw}`")))
}

fn parse_bool(field: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(Error::invalid_config(
            field,
            format!("cannot parse `{other}` as bool"),
        )),
    }
}

impl RunConfig {
    /// Parse the flat `key = value` config format. Lines starting with `#`
    /// and blank lines are ignored. The seed must be stated explicitly.
    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seed_seen = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid_config(
                    line,
                    format!("line {} is not of the form key = value", lineno + 1),
                )
            })?;
            let key = key.trim();
            let value = value.trim();
            match key {
                "feature_dim" => cfg.model.feature_dim = parse_value(key, value)?,
                "num_classes" => cfg.model.num_classes = parse_value(key, value)?,
                "grid_h" => cfg.model.grid_h = parse_value(key, value)?,
                "grid_w" => cfg.model.grid_w = parse_value(key, value)?,
                "context_len" => cfg.model.context_len = parse_value(key, value)?,
                "background_len" => cfg.model.background_len = parse_value(key, value)?,
                "tau" => cfg.model.temperature_train = parse_value(key, value)?,
                "tau_test" => cfg.model.temperature_test = parse_value(key, value)?,
                "lambda" => cfg.model.ood_weight = parse_value(key, value)?,
                "alpha" => cfg.model.sct_strength = parse_value(key, value)?,
                "topk" => cfg.model.topk = parse_value(key, value)?,
                "rmcm_q" => cfg.model.rmcm_q = parse_value(key, value)?,
                "seed" => {
                    cfg.model.seed = parse_value(key, value)?;
                    seed_seen = true;
                }
                "epochs" => cfg.train.epochs = parse_value(key, value)?,
                "learning_rate" => cfg.train.learning_rate = parse_value(key, value)?,
                "batch_size" => cfg.train.batch_size = parse_value(key, value)?,
                "shots" => cfg.train.shots = parse_value(key, value)?,
                "use_refinement" => cfg.train.flags.use_refinement = parse_bool(key, value)?,
                "use_patch_sct" => cfg.train.flags.use_patch_sct = parse_bool(key, value)?,
                "use_loss_modulation" => {
                    cfg.train.flags.use_loss_modulation = parse_bool(key, value)?
                }
                "raw_patch_dim" => cfg.data.raw_patch_dim = parse_value(key, value)?,
                "num_ood_classes" => cfg.data.num_ood_classes = parse_value(key, value)?,
                "images_per_eval_class" => {
                    cfg.data.images_per_eval_class = parse_value(key, value)?
                }
                "background_pool_size" => {
                    cfg.data.background_pool_size = parse_value(key, value)?
                }
                "coverage_min" => cfg.data.coverage_min = parse_value(key, value)?,
                "coverage_max" => cfg.data.coverage_max = parse_value(key, value)?,
                "noise_level" => cfg.data.noise_level = parse_value(key, value)?,
                "class_word_skew" => cfg.data.class_word_skew = parse_value(key, value)?,
                "background_init" => cfg.data.background_init = value.parse()?,
                "score" => cfg.score = value.parse()?,
                "dataset_dir" => cfg.dataset_dir = Some(PathBuf::from(value)),
                other => {
                    return Err(Error::invalid_config(
                        other,
                        "unknown config key".to_string(),
                    ))
                }
            }
        }
        if !seed_seen {
            return Err(Error::invalid_config("seed", "must be set explicitly"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()
    }

    /// Render back to the key=value format (used for embedding the config
    /// in human-readable sidecar files).
    pub fn to_config_string(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let mut s = String::new();
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        push("feature_dim", m.feature_dim.to_string());
        push("num_classes", m.num_classes.to_string());
        push("grid_h", m.grid_h.to_string());
        push("grid_w", m.grid_w.to_string());
        push("context_len", m.context_len.to_string());
        push("background_len", m.background_len.to_string());
        push("tau", m.temperature_train.to_string());
        push("tau_test", m.temperature_test.to_string());
        push("lambda", m.ood_weight.to_string());
        push("alpha", m.sct_strength.to_string());
        push("topk", m.topk.to_string());
        push("rmcm_q", m.rmcm_q.to_string());
        push("seed", m.seed.to_string());
        push("epochs", t.epochs.to_string());
        push("learning_rate", t.learning_rate.to_string());
        push("batch_size", t.batch_size.to_string());
        push("shots", t.shots.to_string());
        push("use_refinement", t.flags.use_refinement.to_string());
        push("use_patch_sct", t.flags.use_patch_sct.to_string());
        push("use_loss_modulation", t.flags.use_loss_modulation.to_string());
        push("raw_patch_dim", d.raw_patch_dim.to_string());
        push("num_ood_classes", d.num_ood_classes.to_string());
        push("images_per_eval_class", d.images_per_eval_class.to_string());
        push("background_pool_size", d.background_pool_size.to_string());
        push("coverage_min", d.coverage_min.to_string());
        push("coverage_max", d.coverage_max.to_string());
        push("noise_level", d.noise_level.to_string());
        push("class_word_skew", d.class_word_skew.to_string());
        push("background_init", d.background_init.as_str().to_string());
        push("score", self.score.as_str().to_string());
        if let Some(dir) = &self.dataset_dir {
            push("dataset_dir", dir.display().to_string());
        }
        s
    }
}
