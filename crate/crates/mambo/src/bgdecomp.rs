//! Similarity computation, refinement, and background patch extraction.
//!
//! All inputs are unit vectors, so every cosine similarity is a plain dot
//! product. Patches are indexed row-major throughout.

use crate::error::{Error, Result};
use crate::math;
use crate::types::{BackgroundSet, ExtractionStrategy, FeatureBundle, SimilarityMaps};

fn check_dims(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::ShapeMismatch {
            context,
            expected,
            got,
        });
    }
    Ok(())
}

/// Patch-by-class cosine similarity matrix: entry (i, j) is the similarity
/// of patch i to class j.
pub fn local_class_similarity(
    bundle: &FeatureBundle,
    class_features: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let d = bundle.feature_dim();
    for g in class_features {
        check_dims("class feature dim", d, g.len())?;
    }
    Ok(bundle
        .local_features
        .iter()
        .map(|f| class_features.iter().map(|g| math::dot(f, g)).collect())
        .collect())
}

/// Row-wise softmax of the class similarities at temperature `tau`.
pub fn patch_probabilities(class_sim: &[Vec<f64>], tau: f64) -> Result<Vec<Vec<f64>>> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::invalid_config("tau", "must be a positive real"));
    }
    Ok(class_sim
        .iter()
        .map(|row| {
            let scaled: Vec<f64> = row.iter().map(|s| s / tau).collect();
            math::softmax(&scaled)
        })
        .collect())
}

/// Class probabilities of the global feature, and the probability assigned
/// to the ground-truth label.
pub fn global_probability(
    global_feature: &[f64],
    class_features: &[Vec<f64>],
    tau: f64,
    label: usize,
) -> Result<(Vec<f64>, f64)> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::invalid_config("tau", "must be a positive real"));
    }
    if label >= class_features.len() {
        return Err(Error::IndexOutOfRange {
            context: "class label",
            index: label,
            size: class_features.len(),
        });
    }
    let logits: Vec<f64> = class_features
        .iter()
        .map(|g| {
            check_dims("class feature dim", global_feature.len(), g.len())?;
            Ok(math::dot(global_feature, g) / tau)
        })
        .collect::<Result<_>>()?;
    let probs = math::softmax(&logits);
    let p = probs[label];
    Ok((probs, p))
}

/// Per-patch cosine similarity to the background text feature.
pub fn local_background_similarity(
    bundle: &FeatureBundle,
    background_feature: &[f64],
) -> Result<Vec<f64>> {
    check_dims(
        "background feature dim",
        bundle.feature_dim(),
        background_feature.len(),
    )?;
    Ok(bundle
        .local_features
        .iter()
        .map(|f| math::dot(f, background_feature))
        .collect())
}

/// Refinement weights over the ground-truth class column: 0 at the most
/// class-like patch, 1 at the least class-like, min-max scaled in between.
/// A flat column carries no foreground signal, so all weights become 1 and
/// refinement suppresses nothing.
pub fn refinement_weights(gt_column: &[f64]) -> Vec<f64> {
    let max = gt_column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = gt_column.iter().cloned().fold(f64::INFINITY, f64::min);
    if max == min {
        return vec![1.0; gt_column.len()];
    }
    let span = max - min;
    gt_column.iter().map(|s| (max - s) / span).collect()
}

/// Refine the background similarity in place: each patch similarity is
/// scaled by `(1 - p) + p * delta_i`, where p is the ground-truth
/// probability and delta is the refinement weight of that patch. At p = 0
/// the map is untouched; at p = 1 the most class-like patch is fully
/// suppressed.
pub fn refine_similarity(maps: &mut SimilarityMaps, label: usize) -> Result<()> {
    let classes = maps.class_sim.first().map_or(0, Vec::len);
    if label >= classes {
        return Err(Error::IndexOutOfRange {
            context: "refinement label",
            index: label,
            size: classes,
        });
    }
    let gt_column: Vec<f64> = maps.class_sim.iter().map(|row| row[label]).collect();
    let delta = refinement_weights(&gt_column);
    let p = maps.gt_probability;
    maps.refined_sim = maps
        .background_sim
        .iter()
        .zip(&delta)
        .map(|(s, d)| s * ((1.0 - p) + p * d))
        .collect();
    Ok(())
}

/// Fixed top-K extraction: patches whose ground-truth class probability
/// ranks strictly worse than K become background. Rank 1 is the highest
/// probability; ties are broken by patch index (lower index ranks better)
/// for determinism. `k` may equal the patch count, yielding an empty set.
pub fn extract_background_topk(
    patch_probs: &[Vec<f64>],
    label: usize,
    k: usize,
) -> Result<BackgroundSet> {
    let classes = patch_probs.first().map_or(0, Vec::len);
    if label >= classes {
        return Err(Error::IndexOutOfRange {
            context: "top-k label",
            index: label,
            size: classes,
        });
    }
    let n = patch_probs.len();
    if k > n {
        return Err(Error::invalid_config(
            "topk",
            format!("k = {k} exceeds the patch count {n}"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        patch_probs[b][label]
            .partial_cmp(&patch_probs[a][label])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let background = order[k..].to_vec();
    Ok(BackgroundSet::new(
        background,
        None,
        ExtractionStrategy::TopK,
    ))
}

/// Fixed-count extraction on a similarity vector: the `count` patches with
/// the highest similarity become background (ties by patch index). Used
/// when refinement runs without the self-calibrated threshold.
pub fn extract_background_by_count(similarity: &[f64], count: usize) -> Result<BackgroundSet> {
    let n = similarity.len();
    if count > n {
        return Err(Error::invalid_config(
            "background count",
            format!("count = {count} exceeds the patch count {n}"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        similarity[b]
            .partial_cmp(&similarity[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(BackgroundSet::new(
        order[..count].to_vec(),
        None,
        ExtractionStrategy::TopK,
    ))
}

/// Self-calibrated extraction: the threshold is the mean similarity shifted
/// by `alpha * (2p - 1)` population standard deviations. High-confidence
/// samples (p near 1) get a lower threshold and therefore more background
/// patches; low-confidence samples get fewer. Selection is strict, so ties
/// at the threshold are excluded.
pub fn extract_background_sct(
    refined_sim: &[f64],
    gt_probability: f64,
    alpha: f64,
) -> Result<BackgroundSet> {
    if refined_sim.is_empty() {
        return Err(Error::ShapeMismatch {
            context: "refined similarity",
            expected: 1,
            got: 0,
        });
    }
    if !(0.0..=1.0).contains(&gt_probability) {
        return Err(Error::Internal(format!(
            "gt probability {gt_probability} outside [0, 1]"
        )));
    }
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(Error::invalid_config("alpha", "must be non-negative"));
    }
    let mean = math::mean(refined_sim);
    let sigma = math::population_std(refined_sim);
    let threshold = mean - alpha * (2.0 * gt_probability - 1.0) * sigma;
    let indices = refined_sim
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > threshold)
        .map(|(i, _)| i)
        .collect();
    Ok(BackgroundSet::new(
        indices,
        Some(threshold),
        ExtractionStrategy::Sct,
    ))
}
