//! Losses, the per-sample forward pipeline, analytic gradients with respect
//! to the learnable prompt tokens, and the SGD training loop.
//!
//! Per-sample dataflow each step: global probabilities and the ground-truth
//! probability p, then class similarities, background similarities,
//! refinement (when enabled), background extraction (threshold or fixed
//! count), and finally the losses.
//!
//! Two gradient conventions are deliberate and mirrored by the finite
//! difference harness:
//! - p acts as a constant wherever it modulates (refinement, extraction,
//!   loss weighting). The study flag `grad_through_modulation` switches the
//!   extra chain term on.
//! - Background extraction is a discrete selection; gradients flow only
//!   through the entropy of the selected rows.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bgdecomp;
use crate::config::{ModelConfig, StrategyFlags, TrainConfig};
use crate::encoders::FrozenTextEncoder;
use crate::error::{Error, Result};
use crate::math;
use crate::types::{BackgroundSet, FeatureBundle, PromptSet, SimilarityMaps};

/// Floor applied inside logarithms so adversarial configurations cannot
/// produce infinities. Engagements are counted, never silent.
pub const PROB_FLOOR: f64 = 1e-12;

const STREAM_EPOCH_SHUFFLE: u64 = 100;

/// Cross-entropy of the ground-truth class under the global probabilities.
/// Returns the loss and whether the probability floor engaged.
pub fn ce_loss(global_probs: &[f64], label: usize) -> Result<(f64, bool)> {
    let p = *global_probs.get(label).ok_or(Error::IndexOutOfRange {
        context: "ce label",
        index: label,
        size: global_probs.len(),
    })?;
    if p < PROB_FLOOR {
        Ok((-(PROB_FLOOR.ln()), true))
    } else {
        Ok((-p.ln(), false))
    }
}

/// Mean negative entropy of the selected background patch rows. Minimized
/// at uniform rows (value -ln M), maximized at one-hot rows (value 0).
/// An empty selection contributes zero.
pub fn ood_loss(patch_probs: &[Vec<f64>], selection: &BackgroundSet) -> Result<f64> {
    if selection.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &k in &selection.indices {
        let row = patch_probs.get(k).ok_or(Error::IndexOutOfRange {
            context: "ood selection",
            index: k,
            size: patch_probs.len(),
        })?;
        total += math::neg_entropy(row);
    }
    Ok(total / selection.len() as f64)
}

/// Combine per-sample losses: modulated form weights the cross-entropy by
/// (1 - p) and the background term by p.
pub fn combine_losses(ce: f64, ood: f64, p: f64, lambda: f64, modulated: bool) -> f64 {
    if modulated {
        ce * (1.0 - p) + lambda * ood * p
    } else {
        ce + lambda * ood
    }
}

/// Everything computed for one sample on the forward pass.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub global_probs: Vec<f64>,
    /// Live ground-truth probability from the global branch.
    pub gt_probability: f64,
    pub patch_probs: Vec<Vec<f64>>,
    pub maps: SimilarityMaps,
    pub selection: BackgroundSet,
    pub ce: f64,
    pub ood: f64,
    pub loss: f64,
    pub floor_hit: bool,
}

/// Selection (and optionally the modulation factor) frozen at a base
/// point, used by the finite-difference harness to probe exactly the
/// surface the analytic gradient describes: the discrete background
/// selection never differentiates, and the modulation factor only does
/// under the study flag.
#[derive(Debug, Clone)]
pub struct FrozenSelection {
    /// Fixed modulation factor; None keeps the live ground-truth
    /// probability (the study-mode surface).
    pub modulation: Option<f64>,
    pub selection: BackgroundSet,
}

/// Run the per-sample pipeline. `frozen` substitutes a fixed background
/// selection (and optionally modulation factor) for the live ones.
pub fn forward_sample(
    bundle: &FeatureBundle,
    class_features: &[Vec<f64>],
    background_feature: &[f64],
    cfg: &ModelConfig,
    flags: &StrategyFlags,
    frozen: Option<&FrozenSelection>,
) -> Result<SampleForward> {
    let label = bundle.label.ok_or_else(|| {
        Error::Internal("training forward requires a labeled sample".to_string())
    })?;
    let tau = cfg.temperature_train;

    let (global_probs, p_live) =
        bgdecomp::global_probability(&bundle.global_feature, class_features, tau, label)?;
    let (ce, floor_hit) = ce_loss(&global_probs, label)?;

    let class_sim = bgdecomp::local_class_similarity(bundle, class_features)?;
    let patch_probs = bgdecomp::patch_probabilities(&class_sim, tau)?;
    let background_sim = bgdecomp::local_background_similarity(bundle, background_feature)?;

    let p_eff = frozen.and_then(|f| f.modulation).unwrap_or(p_live);
    let mut maps = SimilarityMaps::new(class_sim, background_sim, p_eff)?;
    if flags.use_refinement {
        bgdecomp::refine_similarity(&mut maps, label)?;
    }

    let selection = match frozen {
        Some(f) => f.selection.clone(),
        None => match (flags.use_patch_sct, flags.use_refinement) {
            (true, _) => bgdecomp::extract_background_sct(&maps.refined_sim, p_eff, cfg.sct_strength)?,
            (false, true) => {
                // refined signal with the baseline's fixed count
                let count = cfg.num_patches() - cfg.topk;
                bgdecomp::extract_background_by_count(&maps.refined_sim, count)?
            }
            (false, false) => bgdecomp::extract_background_topk(&patch_probs, label, cfg.topk)?,
        },
    };

    let ood = ood_loss(&patch_probs, &selection)?;
    let loss = combine_losses(ce, ood, p_eff, cfg.ood_weight, flags.use_loss_modulation);

    Ok(SampleForward {
        global_probs,
        gt_probability: p_live,
        patch_probs,
        maps,
        selection,
        ce,
        ood,
        loss,
        floor_hit,
    })
}

/// Gradients with respect to the learnable prompt tokens. Frozen class
/// words receive none by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGradients {
    pub context: Vec<Vec<f64>>,
    pub background: Vec<Vec<f64>>,
}

impl PromptGradients {
    pub fn zeros(context_len: usize, background_len: usize, dim: usize) -> Self {
        PromptGradients {
            context: vec![vec![0.0; dim]; context_len],
            background: vec![vec![0.0; dim]; background_len],
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.context
            .iter()
            .chain(&self.background)
            .flatten()
            .fold(0.0, |acc, v| acc.max(v.abs()))
    }
}

/// Batch-level forward summary.
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub loss: f64,
    pub ce: f64,
    pub ood: f64,
    pub floor_hits: u64,
    pub per_sample: Vec<SampleForward>,
}

/// Forward over a batch: the loss is the sample mean.
pub fn batch_forward(
    prompts: &PromptSet,
    text_encoder: &FrozenTextEncoder,
    batch: &[&FeatureBundle],
    cfg: &ModelConfig,
    flags: &StrategyFlags,
    frozen: Option<&[FrozenSelection]>,
) -> Result<BatchEval> {
    if batch.is_empty() {
        return Err(Error::Internal("empty batch".to_string()));
    }
    if let Some(f) = frozen {
        if f.len() != batch.len() {
            return Err(Error::ShapeMismatch {
                context: "frozen selections",
                expected: batch.len(),
                got: f.len(),
            });
        }
    }
    let class_features = text_encoder.encode_all_classes(prompts)?;
    let background_feature = text_encoder.encode_background(prompts)?;

    let mut per_sample = Vec::with_capacity(batch.len());
    let (mut loss, mut ce, mut ood) = (0.0, 0.0, 0.0);
    let mut floor_hits = 0u64;
    for (i, bundle) in batch.iter().enumerate() {
        let fwd = forward_sample(
            bundle,
            &class_features,
            &background_feature,
            cfg,
            flags,
            frozen.map(|f| &f[i]),
        )?;
        loss += fwd.loss;
        ce += fwd.ce;
        ood += fwd.ood;
        floor_hits += fwd.floor_hit as u64;
        per_sample.push(fwd);
    }
    let n = batch.len() as f64;
    Ok(BatchEval {
        loss: loss / n,
        ce: ce / n,
        ood: ood / n,
        floor_hits,
        per_sample,
    })
}

/// Forward plus analytic gradients of the batch-mean loss with respect to
/// every learnable prompt token.
pub fn batch_gradients(
    prompts: &PromptSet,
    text_encoder: &FrozenTextEncoder,
    batch: &[&FeatureBundle],
    cfg: &ModelConfig,
    flags: &StrategyFlags,
) -> Result<(BatchEval, PromptGradients)> {
    let eval = batch_forward(prompts, text_encoder, batch, cfg, flags, None)?;

    let dim = cfg.feature_dim;
    let classes = cfg.num_classes;
    let tau = cfg.temperature_train;
    let lambda = cfg.ood_weight;
    let batch_scale = 1.0 / batch.len() as f64;

    // upstream gradient accumulated per class text feature
    let mut upstream_class = vec![vec![0.0; dim]; classes];
    // the background feature never enters the loss value, only the discrete
    // selection; its upstream stays zero
    let upstream_background = vec![0.0; dim];

    for (bundle, fwd) in batch.iter().zip(&eval.per_sample) {
        let label = bundle.label.expect("validated in forward");
        let p = fwd.gt_probability;
        let (ce_coeff, ood_coeff) = if flags.use_loss_modulation {
            ((1.0 - p), lambda * p)
        } else {
            (1.0, lambda)
        };

        // cross-entropy path: d(-ln p_y)/d sim_j = (p_j - [j == y]) / tau
        if !fwd.floor_hit {
            for (j, upstream) in upstream_class.iter_mut().enumerate() {
                let indicator = if j == label { 1.0 } else { 0.0 };
                let coeff = batch_scale * ce_coeff * (fwd.global_probs[j] - indicator) / tau;
                for (u, g) in upstream.iter_mut().zip(&bundle.global_feature) {
                    *u += coeff * g;
                }
            }
        }

        // background entropy path over the selected patches:
        // d(sum_m q_m ln q_m)/d sim_j = q_j (ln q_j + H) / tau
        if !fwd.selection.is_empty() {
            let sel_scale = batch_scale * ood_coeff / fwd.selection.len() as f64;
            for &k in &fwd.selection.indices {
                let row = &fwd.patch_probs[k];
                let entropy = -math::neg_entropy(row);
                let patch = &bundle.local_features[k];
                for j in 0..classes {
                    let q = row[j];
                    if q <= 0.0 {
                        continue;
                    }
                    let coeff = sel_scale * q * (q.ln() + entropy) / tau;
                    for (u, f) in upstream_class[j].iter_mut().zip(patch) {
                        *u += coeff * f;
                    }
                }
            }
        }

        // optional study path: differentiate the modulation factor itself,
        // d p_y / d sim_j = p_y ([j == y] - p_j) / tau
        if flags.use_loss_modulation && flags.grad_through_modulation && !fwd.floor_hit {
            let dp_coeff = batch_scale * (lambda * fwd.ood - fwd.ce);
            for (j, upstream) in upstream_class.iter_mut().enumerate() {
                let indicator = if j == label { 1.0 } else { 0.0 };
                let coeff = dp_coeff * p * (indicator - fwd.global_probs[j]) / tau;
                for (u, g) in upstream.iter_mut().zip(&bundle.global_feature) {
                    *u += coeff * g;
                }
            }
        }
    }

    // chain through the frozen text encoder; mean pooling gives every token
    // of a prompt the same gradient
    let mut grads = PromptGradients::zeros(prompts.context_len(), prompts.background_len(), dim);
    for (j, upstream) in upstream_class.iter().enumerate() {
        let tokens = prompts.class_tokens(j)?;
        let shared = text_encoder.backprop_tokens(&tokens, upstream)?;
        for token_grad in &mut grads.context {
            for (t, s) in token_grad.iter_mut().zip(&shared) {
                *t += s;
            }
        }
        // the class word slot gets the same shared gradient but stays frozen
    }
    let shared_bg =
        text_encoder.backprop_tokens(&prompts.background_tokens, &upstream_background)?;
    for token_grad in &mut grads.background {
        for (t, s) in token_grad.iter_mut().zip(&shared_bg) {
            *t += s;
        }
    }

    Ok((eval, grads))
}

/// Loss record for one epoch (means over the epoch's batches).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub ce: f64,
    pub ood: f64,
    pub floor_hits: u64,
}

/// Per-epoch loss trace returned by training.
pub type LossTrace = Vec<EpochLoss>;

/// Plain SGD over the learnable prompt tokens. Deterministic per seed:
/// batch order is a seeded shuffle per epoch and gradient reduction is an
/// ordered sum. Class words and encoder weights are never touched.
pub fn train(
    dataset: &[FeatureBundle],
    prompts: &mut PromptSet,
    text_encoder: &FrozenTextEncoder,
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<LossTrace> {
    cfg.validate()?;
    train_cfg.validate()?;
    let mut seen = vec![0usize; cfg.num_classes];
    for bundle in dataset {
        let label = bundle.label.ok_or_else(|| {
            Error::invalid_config("dataset", "training samples must carry labels")
        })?;
        if label >= cfg.num_classes {
            return Err(Error::IndexOutOfRange {
                context: "dataset label",
                index: label,
                size: cfg.num_classes,
            });
        }
        seen[label] += 1;
    }
    if let Some(class) = seen.iter().position(|&c| c == 0) {
        return Err(Error::invalid_config(
            "dataset",
            format!("class {class} has no training samples"),
        ));
    }

    let mut trace = Vec::with_capacity(train_cfg.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..train_cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(math::derive_seed(
            cfg.seed,
            STREAM_EPOCH_SHUFFLE + epoch as u64,
        ));
        order.shuffle(&mut rng);

        let (mut total, mut ce, mut ood) = (0.0, 0.0, 0.0);
        let mut floor_hits = 0u64;
        let mut batches = 0usize;
        for chunk in order.chunks(train_cfg.batch_size) {
            let batch: Vec<&FeatureBundle> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (eval, grads) =
                batch_gradients(prompts, text_encoder, &batch, cfg, &train_cfg.flags)?;
            let lr = train_cfg.learning_rate;
            for (token, grad) in prompts.context_tokens.iter_mut().zip(&grads.context) {
                for (t, g) in token.iter_mut().zip(grad) {
                    *t -= lr * g;
                }
            }
            for (token, grad) in prompts.background_tokens.iter_mut().zip(&grads.background) {
                for (t, g) in token.iter_mut().zip(grad) {
                    *t -= lr * g;
                }
            }
            total += eval.loss;
            ce += eval.ce;
            ood += eval.ood;
            floor_hits += eval.floor_hits;
            batches += 1;
        }
        let n = batches as f64;
        trace.push(EpochLoss {
            epoch,
            total: total / n,
            ce: ce / n,
            ood: ood / n,
            floor_hits,
        });
    }
    Ok(trace)
}
