//! End-to-end experiment harness: build a synthetic benchmark from a run
//! config, train under a strategy, and measure detection and extraction
//! quality. Used by the command-line benchmark and the acceptance suite.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{BackgroundInit, RunConfig, ScoreKind, StrategyFlags};
use crate::encoders::{FrozenImageEncoder, FrozenTextEncoder, Nonlinearity};
use crate::error::{Error, Result};
use crate::math;
use crate::scoring::{self, DetectionReport};
use crate::synth::{self, SyntheticSpec};
use crate::training::{self, LossTrace};
use crate::types::{FeatureBundle, PromptSet};

const STREAM_CLASS_WORD_SKEW: u64 = 8;

/// Ablation arm of the benchmark grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Fixed top-K extraction from class probabilities, plain objective.
    Baseline,
    /// Refined background similarity with a fixed extraction count.
    Refinement,
    /// Self-calibrated threshold on the unrefined background similarity.
    Sct,
    /// Refinement plus the self-calibrated threshold plus loss modulation.
    Full,
}

impl Strategy {
    pub fn flags(&self) -> StrategyFlags {
        match self {
            Strategy::Baseline => StrategyFlags::baseline(),
            Strategy::Refinement => StrategyFlags {
                use_refinement: true,
                use_patch_sct: false,
                use_loss_modulation: false,
                grad_through_modulation: false,
            },
            Strategy::Sct => StrategyFlags {
                use_refinement: false,
                use_patch_sct: true,
                use_loss_modulation: true,
                grad_through_modulation: false,
            },
            Strategy::Full => StrategyFlags::full(),
        }
    }

    pub fn all() -> [Strategy; 4] {
        [
            Strategy::Baseline,
            Strategy::Refinement,
            Strategy::Sct,
            Strategy::Full,
        ]
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Strategy::Baseline => "baseline",
            Strategy::Refinement => "refinement",
            Strategy::Sct => "sct",
            Strategy::Full => "full",
        };
        write!(f, "{name}")
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Strategy::Baseline),
            "refinement" => Ok(Strategy::Refinement),
            "sct" => Ok(Strategy::Sct),
            "full" => Ok(Strategy::Full),
            other => Err(Error::invalid_config(
                "strategies",
                format!("unknown strategy `{other}`"),
            )),
        }
    }
}

/// Default desk-scale benchmark: 8 classes, 4-shot, 16 patches, moderate
/// noise. Two knobs differ from the plain config defaults: the softened
/// temperature keeps gradients well-scaled at this feature dimension, and
/// the epoch budget is sized so context tuning actually traverses the
/// class-word skew.
pub fn default_benchmark_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.temperature_train = 0.1;
    cfg.train.epochs = 120;
    cfg
}

/// Synthetic spec derived from a run config, with archetypes drawn for the
/// given seed.
pub fn build_spec(cfg: &RunConfig, seed: u64) -> Result<SyntheticSpec> {
    SyntheticSpec::with_random_archetypes(
        cfg.model.num_classes,
        cfg.data.num_ood_classes,
        cfg.data.background_pool_size,
        cfg.data.raw_patch_dim,
        cfg.model.grid_h,
        cfg.model.grid_w,
        cfg.train.shots,
        cfg.data.images_per_eval_class,
        (cfg.data.coverage_min, cfg.data.coverage_max),
        cfg.data.noise_level,
        seed,
    )
}

/// Prompt initialization for the synthetic benchmark. Class words are
/// planted near their class's image-space direction, displaced by one
/// shared offset of norm `class_word_skew`; context tuning has exactly the
/// capacity to undo a shared offset. The background prompt either points at
/// the pool's mean direction (standing in for learned background semantics)
/// or stays random.
pub fn aligned_prompt_set(
    cfg: &RunConfig,
    seed: u64,
    text: &FrozenTextEncoder,
    image: &FrozenImageEncoder,
    spec: &SyntheticSpec,
) -> Result<PromptSet> {
    let mut model = cfg.model.clone();
    model.seed = seed;
    let mut prompts = PromptSet::init(&model);

    let d = cfg.model.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(math::derive_seed(seed, STREAM_CLASS_WORD_SKEW));
    let normal = Normal::new(0.0, 1.0).expect("valid std");
    let raw_shift: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
    let shift_unit = math::normalize(&raw_shift)?;
    let skew = cfg.data.class_word_skew;

    for (m, archetype) in spec.class_archetypes.iter().enumerate() {
        let direction = image.feature_direction(archetype)?;
        let skewed: Vec<f64> = direction
            .iter()
            .zip(&shift_unit)
            .map(|(v, s)| v + skew * s)
            .collect();
        prompts.class_word_embeddings[m] = text.token_for_direction(&skewed)?;
    }

    if cfg.data.background_init == BackgroundInit::PoolAligned {
        let mut pooled = vec![0.0; d];
        for archetype in &spec.background_pool {
            let dir = image.feature_direction(archetype)?;
            for (p, v) in pooled.iter_mut().zip(&dir) {
                *p += v;
            }
        }
        let token = text.token_for_direction(&pooled)?;
        for b in &mut prompts.background_tokens {
            *b = token.clone();
        }
    }
    Ok(prompts)
}

/// A prepared experiment: frozen encoders, encoded splits, and the initial
/// prompt state.
pub struct Experiment {
    pub cfg: RunConfig,
    pub seed: u64,
    pub text: FrozenTextEncoder,
    pub image: FrozenImageEncoder,
    /// Present when the data was synthesized here; absent for imported
    /// feature dumps.
    pub spec: Option<SyntheticSpec>,
    pub train: Vec<FeatureBundle>,
    pub id_test: Vec<FeatureBundle>,
    pub ood_test: Vec<FeatureBundle>,
    pub prompts: PromptSet,
}

impl Experiment {
    fn encoders(cfg: &RunConfig, seed: u64) -> (FrozenTextEncoder, FrozenImageEncoder) {
        (
            FrozenTextEncoder::seeded(cfg.model.feature_dim, seed, Nonlinearity::Identity),
            FrozenImageEncoder::seeded(
                cfg.model.feature_dim,
                cfg.data.raw_patch_dim,
                cfg.model.grid_h,
                cfg.model.grid_w,
                seed,
            ),
        )
    }

    /// Build encoders, synthesize and encode the splits, and initialize
    /// prompts, all deterministically from the seed.
    pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Experiment> {
        cfg.validate()?;
        let spec = build_spec(cfg, seed)?;
        let (text, image) = Experiment::encoders(cfg, seed);
        let data = synth::generate_synthetic(&spec)?;
        let encode_all = |imgs: &[crate::types::RawImage]| -> Result<Vec<FeatureBundle>> {
            imgs.iter().map(|i| image.encode(i)).collect()
        };
        let train = encode_all(&data.train)?;
        let id_test = encode_all(&data.id_test)?;
        let ood_test = encode_all(&data.ood_test)?;
        let prompts = aligned_prompt_set(cfg, seed, &text, &image, &spec)?;
        Ok(Experiment {
            cfg: cfg.clone(),
            seed,
            text,
            image,
            spec: Some(spec),
            train,
            id_test,
            ood_test,
            prompts,
        })
    }

    /// Build an experiment around pre-encoded feature bundles (imported
    /// dumps). Prompts start from the plain seeded initialization since no
    /// archetypes are available to plant.
    pub fn from_bundles(
        cfg: &RunConfig,
        seed: u64,
        train: Vec<FeatureBundle>,
        id_test: Vec<FeatureBundle>,
        ood_test: Vec<FeatureBundle>,
    ) -> Result<Experiment> {
        cfg.validate()?;
        let (text, image) = Experiment::encoders(cfg, seed);
        let mut model = cfg.model.clone();
        model.seed = seed;
        let prompts = PromptSet::init(&model);
        for bundle in train.iter().chain(&id_test).chain(&ood_test) {
            if bundle.feature_dim() != cfg.model.feature_dim
                || bundle.grid_h != cfg.model.grid_h
                || bundle.grid_w != cfg.model.grid_w
            {
                return Err(Error::ShapeMismatch {
                    context: "imported bundle shape",
                    expected: cfg.model.feature_dim * cfg.model.num_patches(),
                    got: bundle.feature_dim() * bundle.num_patches(),
                });
            }
        }
        Ok(Experiment {
            cfg: cfg.clone(),
            seed,
            text,
            image,
            spec: None,
            train,
            id_test,
            ood_test,
            prompts,
        })
    }

    /// Train the prompts in place under the given flags; returns the loss
    /// trace.
    pub fn train_prompts(&mut self, flags: StrategyFlags) -> Result<LossTrace> {
        let mut model = self.cfg.model.clone();
        model.seed = self.seed;
        let mut tcfg = self.cfg.train.clone();
        tcfg.flags = flags;
        training::train(&self.train, &mut self.prompts, &self.text, &model, &tcfg)
    }

    fn model_with_seed(&self) -> crate::config::ModelConfig {
        let mut model = self.cfg.model.clone();
        model.seed = self.seed;
        model
    }

    /// Score one split with the configured score kind.
    pub fn score_split(&self, bundles: &[FeatureBundle], kind: ScoreKind) -> Result<Vec<f64>> {
        let class_features = self.text.encode_all_classes(&self.prompts)?;
        let background = self.text.encode_background(&self.prompts)?;
        let tau = self.cfg.model.temperature_test;
        bundles
            .iter()
            .map(|b| match kind {
                ScoreKind::Mcm => scoring::score_mcm(b, &class_features, tau),
                ScoreKind::GlMcm => scoring::score_glmcm(b, &class_features, tau),
                ScoreKind::Rmcm => scoring::score_rmcm(
                    b,
                    &class_features,
                    &background,
                    self.cfg.model.rmcm_q,
                    tau,
                ),
            })
            .collect()
    }

    /// Detection report for the configured score over the test splits.
    pub fn detection_report(&self, kind: ScoreKind) -> Result<DetectionReport> {
        let id_scores = self.score_split(&self.id_test, kind)?;
        let ood_scores = self.score_split(&self.ood_test, kind)?;
        DetectionReport::from_scores(id_scores, ood_scores)
    }

    /// Mean extraction quality over the labeled ID test split, running the
    /// training-time extraction pipeline (labels are available here, as
    /// they are in training).
    pub fn mean_extraction_iou(&self, flags: StrategyFlags) -> Result<f64> {
        let class_features = self.text.encode_all_classes(&self.prompts)?;
        let background = self.text.encode_background(&self.prompts)?;
        let model = self.model_with_seed();
        let mut total = 0.0;
        let mut count = 0usize;
        for bundle in &self.id_test {
            let mask = bundle.true_background_mask.as_ref().ok_or_else(|| {
                Error::Internal("synthetic eval sample is missing its mask".to_string())
            })?;
            let fwd = training::forward_sample(
                bundle,
                &class_features,
                &background,
                &model,
                &flags,
                None,
            )?;
            total += synth::extraction_iou(&fwd.selection, mask)?;
            count += 1;
        }
        Ok(total / count as f64)
    }
}

/// Metrics for one grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMetrics {
    pub fpr95: f64,
    pub auroc: f64,
    pub mean_iou: f64,
    pub final_loss: f64,
}

/// Run one (strategy, seed) cell: prepare, optionally train, evaluate.
pub fn run_cell(
    cfg: &RunConfig,
    strategy: Strategy,
    seed: u64,
    trained: bool,
) -> Result<CellMetrics> {
    let flags = strategy.flags();
    let mut exp = Experiment::prepare(cfg, seed)?;
    let final_loss = if trained {
        let trace = exp.train_prompts(flags)?;
        trace.last().map_or(f64::NAN, |e| e.total)
    } else {
        f64::NAN
    };
    let report = exp.detection_report(cfg.score)?;
    let mean_iou = exp.mean_extraction_iou(flags)?;
    Ok(CellMetrics {
        fpr95: report.fpr95,
        auroc: report.auroc,
        mean_iou,
        final_loss,
    })
}

/// Mean and sample standard deviation (the reporting convention for
/// repeated runs).
fn mean_std(values: &[f64]) -> (f64, f64) {
    let mean = math::mean(values);
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

/// One strategy's results over all seeds.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub strategy: Strategy,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellMetrics>,
}

impl BenchRow {
    pub fn fpr95(&self) -> (f64, f64) {
        mean_std(&self.cells.iter().map(|c| c.fpr95).collect::<Vec<_>>())
    }
    pub fn auroc(&self) -> (f64, f64) {
        mean_std(&self.cells.iter().map(|c| c.auroc).collect::<Vec<_>>())
    }
    pub fn iou(&self) -> (f64, f64) {
        mean_std(&self.cells.iter().map(|c| c.mean_iou).collect::<Vec<_>>())
    }
}

/// Results of the full grid.
#[derive(Debug, Clone)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    pub fn format_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>18} {:>18} {:>18}\n",
            "strategy", "FPR95", "AUROC", "IoU"
        ));
        for row in &self.rows {
            let (fm, fs) = row.fpr95();
            let (am, as_) = row.auroc();
            let (im, is) = row.iou();
            out.push_str(&format!(
                "{:<12} {:>11.4}±{:.4} {:>11.4}±{:.4} {:>11.4}±{:.4}\n",
                row.strategy.to_string(),
                fm,
                fs,
                am,
                as_,
                im,
                is
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,seed,fpr95,auroc,iou,final_loss\n");
        for row in &self.rows {
            for (seed, cell) in row.seeds.iter().zip(&row.cells) {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    row.strategy, seed, cell.fpr95, cell.auroc, cell.mean_iou, cell.final_loss
                ));
            }
        }
        out
    }
}

/// Run the ablation grid: every strategy on every seed, trained.
pub fn run_grid(cfg: &RunConfig, strategies: &[Strategy], seeds: &[u64]) -> Result<BenchTable> {
    if strategies.is_empty() || seeds.is_empty() {
        return Err(Error::invalid_config(
            "strategies",
            "need at least one strategy and one seed",
        ));
    }
    let mut rows = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let mut cells = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            cells.push(run_cell(cfg, strategy, seed, true)?);
        }
        rows.push(BenchRow {
            strategy,
            seeds: seeds.to_vec(),
            cells,
        });
    }
    Ok(BenchTable { rows })
}
