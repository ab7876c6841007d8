//! Test-time detection scores and the FPR95 / AUROC metrics.
//!
//! Scores consume unrefined background similarity: refinement needs the
//! ground-truth label, which is unavailable at test time.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math;
use crate::types::FeatureBundle;

/// Maximum softmax probability of the global similarity row. Lies in
/// [1/M, 1) for M classes and is invariant to shifting all similarities.
pub fn score_mcm(bundle: &FeatureBundle, class_features: &[Vec<f64>], tau: f64) -> Result<f64> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::invalid_config("tau_test", "must be a positive real"));
    }
    let logits: Vec<f64> = class_features
        .iter()
        .map(|g| math::dot(&bundle.global_feature, g) / tau)
        .collect();
    let probs = math::softmax(&logits);
    Ok(probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// Global score plus the best per-patch class probability anywhere in the
/// grid (softmax over classes within each patch).
pub fn score_glmcm(bundle: &FeatureBundle, class_features: &[Vec<f64>], tau: f64) -> Result<f64> {
    let global = score_mcm(bundle, class_features, tau)?;
    let mut best = f64::NEG_INFINITY;
    for f in &bundle.local_features {
        let logits: Vec<f64> = class_features.iter().map(|g| math::dot(f, g) / tau).collect();
        let probs = math::softmax(&logits);
        for p in probs {
            best = best.max(p);
        }
    }
    Ok(global + best)
}

/// Background-aware per-patch term of the R-MCM score: the best class
/// probability when the background similarity competes in the denominator.
fn rmcm_patch_term(
    local: &[f64],
    class_features: &[Vec<f64>],
    background_sim: f64,
    tau: f64,
) -> f64 {
    let logits: Vec<f64> = class_features
        .iter()
        .map(|g| math::dot(local, g) / tau)
        .collect();
    let bg_logit = background_sim / tau;
    // shift by the overall max for stability
    let max = logits
        .iter()
        .cloned()
        .fold(bg_logit, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let denom: f64 = exps.iter().sum::<f64>() + (bg_logit - max).exp();
    let best = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    best / denom
}

/// R-MCM: the global score plus the mean of the `q` largest per-patch
/// background-aware terms. Each term lies in (0, 1), so the added part is
/// bounded by 1.
pub fn score_rmcm(
    bundle: &FeatureBundle,
    class_features: &[Vec<f64>],
    background_feature: &[f64],
    q: usize,
    tau: f64,
) -> Result<f64> {
    let patches = bundle.num_patches();
    if q < 1 || q > patches {
        return Err(Error::invalid_config(
            "rmcm_q",
            format!("q = {q} must be in [1, {patches}]"),
        ));
    }
    let global = score_mcm(bundle, class_features, tau)?;
    let mut terms: Vec<f64> = bundle
        .local_features
        .iter()
        .map(|f| rmcm_patch_term(f, class_features, math::dot(f, background_feature), tau))
        .collect();
    terms.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let top_mean = terms[..q].iter().sum::<f64>() / q as f64;
    Ok(global + top_mean)
}

/// Detection outcome of the thresholded score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Detection {
    Id,
    Ood,
}

/// A sample is declared in-distribution when its score reaches the
/// threshold (boundary inclusive).
pub fn detect(score: f64, gamma: f64) -> Detection {
    if score >= gamma {
        Detection::Id
    } else {
        Detection::Ood
    }
}

/// Smallest count k with k/n >= 0.95, computed in integers.
fn tpr95_count(n: usize) -> usize {
    (19 * n).div_ceil(20)
}

/// Decision threshold: the largest score value at which at least 95% of the
/// in-distribution samples are still detected as such. Sweeping thresholds
/// downward from the top score, this is the first one reaching the target
/// rate, which keeps the rate as tight as attainable and is deterministic
/// under ties.
pub fn gamma_for_tpr95(id_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() {
        return Err(Error::ShapeMismatch {
            context: "id scores",
            expected: 1,
            got: 0,
        });
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    Ok(sorted[tpr95_count(id_scores.len()) - 1])
}

/// False positive rate of out-of-distribution samples at the 95% ID
/// true-positive threshold.
pub fn fpr95(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if ood_scores.is_empty() {
        return Err(Error::ShapeMismatch {
            context: "ood scores",
            expected: 1,
            got: 0,
        });
    }
    let gamma = gamma_for_tpr95(id_scores)?;
    let fp = ood_scores.iter().filter(|&&s| s >= gamma).count();
    Ok(fp as f64 / ood_scores.len() as f64)
}

/// Area under the ROC curve as the pairwise ranking probability
/// P(id > ood) + 0.5 P(tie). Computed by rank summation with exact tie
/// handling: all intermediate quantities are integers (ranks doubled), so
/// the result matches all-pairs counting bit for bit.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::ShapeMismatch {
            context: "score lists",
            expected: 1,
            got: 0,
        });
    }
    for s in id_scores.iter().chain(ood_scores) {
        if !s.is_finite() {
            return Err(Error::Internal(format!("non-finite score {s}")));
        }
    }
    let n_id = id_scores.len();
    let n_ood = ood_scores.len();
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));

    // doubled rank sum over ID samples; ties share the average rank of
    // their block, whose doubled value (first + last) is an integer
    let mut doubled_rank_sum: u64 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let doubled_avg_rank = (i as u64 + 1) + (j as u64); // (first + last) of 1-based block
        for item in &all[i..j] {
            if item.1 {
                doubled_rank_sum += doubled_avg_rank;
            }
        }
        i = j;
    }
    let doubled_u = doubled_rank_sum - (n_id as u64) * (n_id as u64 + 1);
    Ok(doubled_u as f64 / (2.0 * n_id as f64 * n_ood as f64))
}

/// Detection summary over a scored evaluation split.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
    /// Score threshold achieving at least 95% ID true-positive rate.
    pub gamma: f64,
    pub fpr95: f64,
    pub auroc: f64,
}

impl DetectionReport {
    pub fn from_scores(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> Result<Self> {
        let gamma = gamma_for_tpr95(&id_scores)?;
        let fpr = fpr95(&id_scores, &ood_scores)?;
        let auc = auroc(&id_scores, &ood_scores)?;
        Ok(DetectionReport {
            id_scores,
            ood_scores,
            gamma,
            fpr95: fpr,
            auroc: auc,
        })
    }
}

/// One row of the per-sample score report.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub sample_id: String,
    /// Class index for ID samples, None for OOD.
    pub label: Option<usize>,
    pub mcm: f64,
    pub glmcm: f64,
    pub rmcm: f64,
}

fn csv_field(raw: &str) -> String {
    if raw.contains(',') || raw.contains('"') || raw.contains('\n') {
        format!("\"{}\"", raw.replace('"', "\"\""))
    } else {
        raw.to_string()
    }
}

/// Serialize score rows as CSV with a header line.
pub fn score_csv(rows: &[ScoreRow]) -> String {
    let mut out = String::from("sample_id,label_or_OOD,s_mcm,s_glmcm,s_rmcm\n");
    for r in rows {
        let label = match r.label {
            Some(l) => l.to_string(),
            None => "OOD".to_string(),
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            csv_field(&r.sample_id),
            label,
            r.mcm,
            r.glmcm,
            r.rmcm
        ));
    }
    out
}

pub fn write_score_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    file.write_all(score_csv(rows).as_bytes())
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::normalize;
    use proptest::prelude::*;

    fn unit(d: usize, axis: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[axis] = 1.0;
        v
    }

    fn bundle(global: Vec<f64>, locals: Vec<Vec<f64>>) -> FeatureBundle {
        FeatureBundle::new(1, locals.len(), global, locals, None, None).unwrap()
    }

    #[test]
    fn mcm_uniform_floor() {
        let b = bundle(unit(3, 2), vec![unit(3, 2)]);
        // all classes orthogonal to the global feature: equal similarities
        let classes = vec![unit(3, 0), unit(3, 1)];
        let s = score_mcm(&b, &classes, 1.0).unwrap();
        assert!((s - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mcm_two_class_closed_form() {
        let b = bundle(unit(2, 0), vec![unit(2, 0)]);
        let classes = vec![unit(2, 0), unit(2, 1)];
        // sims (1, 0) at tau 1
        let s = score_mcm(&b, &classes, 1.0).unwrap();
        let e = 1.0f64.exp();
        assert!((s - e / (e + 1.0)).abs() < 1e-12);
        assert!((s - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn mcm_shift_invariance() {
        // shifting every similarity by a constant leaves the score alone;
        // realized here by scaling tau of identical logits vs shifted ones
        let logits_a = [0.3, 0.1, -0.2];
        let logits_b = [0.8, 0.6, 0.3];
        let pa = math::softmax(&logits_a);
        let pb = math::softmax(&logits_b);
        for (a, b) in pa.iter().zip(&pb) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn glmcm_uniform_everywhere() {
        let b = bundle(unit(3, 2), vec![unit(3, 2), unit(3, 2)]);
        let classes = vec![unit(3, 0), unit(3, 1)];
        let s = score_glmcm(&b, &classes, 1.0).unwrap();
        assert!((s - (0.5 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn glmcm_single_patch_reduces_to_mcm_plus_patch_max() {
        let g = normalize(&[1.0, 1.0]).unwrap();
        let b = bundle(g, vec![unit(2, 0)]);
        let classes = vec![unit(2, 0), unit(2, 1)];
        let mcm = score_mcm(&b, &classes, 1.0).unwrap();
        let e = 1.0f64.exp();
        let patch_max = e / (e + 1.0);
        let s = score_glmcm(&b, &classes, 1.0).unwrap();
        assert!((s - (mcm + patch_max)).abs() < 1e-12);
    }

    #[test]
    fn glmcm_two_patch_hand_evaluation() {
        let b = bundle(unit(2, 0), vec![unit(2, 0), unit(2, 1)]);
        let classes = vec![unit(2, 0), unit(2, 1)];
        // each patch is axis-aligned: per-patch max prob is e/(e+1) in both
        let e = 1.0f64.exp();
        let expected = e / (e + 1.0) + e / (e + 1.0);
        let s = score_glmcm(&b, &classes, 1.0).unwrap();
        assert!((s - expected).abs() < 1e-12);
    }

    #[test]
    fn rmcm_background_mass_vanishes() {
        // a strongly negative background similarity reduces each term to a
        // plain max softmax
        let local = unit(2, 0);
        let classes = vec![unit(2, 0), unit(2, 1)];
        let term = rmcm_patch_term(&local, &classes, -50.0, 1.0);
        let e = 1.0f64.exp();
        assert!((term - e / (e + 1.0)).abs() < 1e-9);
    }

    #[test]
    fn rmcm_symmetric_term_hits_one_over_m_plus_one() {
        // class sims equal to the background sim: M + 1 identical terms
        let local = unit(3, 2);
        let classes = vec![unit(3, 2), unit(3, 2)];
        let term = rmcm_patch_term(&local, &classes, 1.0, 1.0);
        assert_eq!(term, 1.0 / 3.0);
    }

    #[test]
    fn rmcm_brute_force_oracle_four_patches() {
        // 4 patches, 2 classes, q = 2: evaluate the definition directly
        let locals = vec![
            unit(3, 0),
            unit(3, 1),
            normalize(&[1.0, 1.0, 0.0]).unwrap(),
            unit(3, 2),
        ];
        let global = normalize(&[1.0, 0.5, 0.2]).unwrap();
        let b = FeatureBundle::new(2, 2, global.clone(), locals.clone(), None, None).unwrap();
        let classes = vec![unit(3, 0), normalize(&[0.0, 1.0, 1.0]).unwrap()];
        let gb = normalize(&[0.3, 0.3, 0.9]).unwrap();
        let tau = 1.0;
        let q = 2;

        let got = score_rmcm(&b, &classes, &gb, q, tau).unwrap();

        // oracle: direct evaluation
        let glob_logits: Vec<f64> = classes.iter().map(|g| math::dot(&global, g)).collect();
        let glob_probs = math::softmax(&glob_logits);
        let mcm = glob_probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut terms: Vec<f64> = locals
            .iter()
            .map(|f| {
                let exps: Vec<f64> = classes.iter().map(|g| math::dot(f, g).exp()).collect();
                let denom: f64 = exps.iter().sum::<f64>() + math::dot(f, &gb).exp();
                exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / denom
            })
            .collect();
        terms.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let expected = mcm + (terms[0] + terms[1]) / 2.0;
        assert!((got - expected).abs() < 1e-12, "got {got}, want {expected}");
    }

    #[test]
    fn rmcm_rejects_bad_q() {
        let b = bundle(unit(2, 0), vec![unit(2, 0)]);
        let classes = vec![unit(2, 0)];
        assert!(score_rmcm(&b, &classes, &unit(2, 1), 2, 1.0).is_err());
        assert!(score_rmcm(&b, &classes, &unit(2, 1), 0, 1.0).is_err());
    }

    #[test]
    fn detect_boundary_is_id() {
        assert_eq!(detect(0.5, 0.5), Detection::Id);
        assert_eq!(detect(0.5 - 1e-12, 0.5), Detection::Ood);
    }

    #[test]
    fn gamma_achieves_target_tpr() {
        let id: Vec<f64> = (0..40).map(|i| 1.0 - i as f64 * 0.01).collect();
        let gamma = gamma_for_tpr95(&id).unwrap();
        let detected = id.iter().filter(|&&s| s >= gamma).count();
        assert!(detected * 20 >= id.len() * 19);
        // dropping one more sample would undershoot: gamma is the tightest
        let tighter = gamma + 1e-9;
        let fewer = id.iter().filter(|&&s| s >= tighter).count();
        assert!(fewer * 20 < id.len() * 19);
    }

    #[test]
    fn fpr95_perfect_separation() {
        let id: Vec<f64> = (0..20).map(|i| 1.0 + i as f64).collect();
        let ood: Vec<f64> = (0..20).map(|i| -1.0 - i as f64).collect();
        assert_eq!(fpr95(&id, &ood).unwrap(), 0.0);
        assert_eq!(auroc(&id, &ood).unwrap(), 1.0);
    }

    #[test]
    fn fpr95_identical_distributions_is_high() {
        let scores: Vec<f64> = (0..50).map(|i| (i % 7) as f64).collect();
        let f = fpr95(&scores, &scores).unwrap();
        assert!(f >= 0.95, "fpr {f}");
    }

    #[test]
    fn fpr95_descending_grid_example() {
        // 20 ID at 1.00 down to 0.81, 20 OOD at 0.90 down to 0.71
        let id: Vec<f64> = (0..20).map(|i| 1.0 - i as f64 * 0.01).collect();
        let ood: Vec<f64> = (0..20).map(|i| 0.90 - i as f64 * 0.01).collect();
        let got = fpr95(&id, &ood).unwrap();
        // oracle: exhaustive sweep over all candidate thresholds
        let mut best: Option<f64> = None;
        let mut at = f64::NEG_INFINITY;
        for &gamma in id.iter().chain(&ood) {
            let tpr_count = id.iter().filter(|&&s| s >= gamma).count();
            if tpr_count * 20 >= id.len() * 19 && gamma > at {
                at = gamma;
                best = Some(ood.iter().filter(|&&s| s >= gamma).count() as f64 / 20.0);
            }
        }
        assert_eq!(got, best.unwrap());
        assert!((got - 0.45).abs() < 1e-12);
    }

    #[test]
    fn auroc_all_ties_is_half() {
        let scores = vec![0.3; 10];
        assert_eq!(auroc(&scores, &scores).unwrap(), 0.5);
    }

    #[test]
    fn auroc_two_by_two_enumeration() {
        let id = vec![0.9, 0.4];
        let ood = vec![0.6, 0.1];
        // pairs: (0.9 beats both), (0.4 beats 0.1 only) = 3 of 4
        assert_eq!(auroc(&id, &ood).unwrap(), 0.75);
    }

    #[test]
    fn empty_inputs_error() {
        assert!(auroc(&[], &[1.0]).is_err());
        assert!(auroc(&[1.0], &[]).is_err());
        assert!(fpr95(&[], &[1.0]).is_err());
        assert!(fpr95(&[1.0], &[]).is_err());
    }

    fn auroc_brute(id: &[f64], ood: &[f64]) -> f64 {
        let mut doubled: u64 = 0;
        for &a in id {
            for &b in ood {
                if a > b {
                    doubled += 2;
                } else if a == b {
                    doubled += 1;
                }
            }
        }
        doubled as f64 / (2.0 * id.len() as f64 * ood.len() as f64)
    }

    proptest! {
        #[test]
        fn auroc_matches_all_pairs_brute_force(
            id in proptest::collection::vec(0u8..40, 1..60),
            ood in proptest::collection::vec(0u8..40, 1..60),
        ) {
            // quantized scores force plenty of ties
            let id: Vec<f64> = id.iter().map(|&x| x as f64 / 7.0).collect();
            let ood: Vec<f64> = ood.iter().map(|&x| x as f64 / 7.0).collect();
            let fast = auroc(&id, &ood).unwrap();
            prop_assert_eq!(fast, auroc_brute(&id, &ood));
        }

        #[test]
        fn auroc_complement_symmetry_without_ties(
            seeds in proptest::collection::vec(0u64..u64::MAX, 4..40),
        ) {
            // distinct scores derived from distinct integers
            let mut values: Vec<f64> = seeds.iter().map(|&s| s as f64 / 1e12).collect();
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            values.dedup();
            prop_assume!(values.len() >= 4);
            let half = values.len() / 2;
            let (a, b) = values.split_at(half);
            let forward = auroc(a, b).unwrap();
            let backward = auroc(b, a).unwrap();
            prop_assert!((forward + backward - 1.0).abs() < 1e-12);
        }

        #[test]
        fn metrics_invariant_under_monotone_transform(
            id in proptest::collection::vec(-5.0f64..5.0, 2..40),
            ood in proptest::collection::vec(-5.0f64..5.0, 2..40),
        ) {
            let squash = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| (x * 0.5).exp()).collect() };
            let a1 = auroc(&id, &ood).unwrap();
            let a2 = auroc(&squash(&id), &squash(&ood)).unwrap();
            prop_assert!((a1 - a2).abs() < 1e-12);
            let f1 = fpr95(&id, &ood).unwrap();
            let f2 = fpr95(&squash(&id), &squash(&ood)).unwrap();
            prop_assert_eq!(f1, f2);
        }
    }
}
