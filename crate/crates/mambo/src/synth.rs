//! Synthetic dataset generation with ground-truth foreground/background
//! masks, plus the extraction-quality metric.
//!
//! Each synthetic image is a patch grid. Foreground patches carry the
//! image's class archetype, background patches carry archetypes drawn from
//! a pool shared across classes, and both get Gaussian noise. The
//! out-of-distribution split uses held-out archetypes that never appear in
//! training, so the ID and OOD label spaces are disjoint by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::math;
use crate::types::{BackgroundSet, RawImage};

const STREAM_DATA: u64 = 6;
const STREAM_ARCHETYPES: u64 = 7;

/// Full recipe for one synthetic dataset. Archetype vectors live in raw
/// patch space and are unit-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Labeled training images per ID class.
    pub shots: usize,
    /// Test images per class, for both ID and OOD classes.
    pub images_per_eval_class: usize,
    /// One foreground archetype per ID class.
    pub class_archetypes: Vec<Vec<f64>>,
    /// Held-out foreground archetypes for OOD images.
    pub ood_archetypes: Vec<Vec<f64>>,
    /// Background archetypes shared across all classes.
    pub background_pool: Vec<Vec<f64>>,
    /// Fraction of patches that are foreground, sampled per image.
    pub coverage_range: (f64, f64),
    /// Std of the Gaussian perturbation per raw component.
    pub noise_level: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Random orthonormal archetypes for the given counts: one seeded
    /// orthonormal family split across class, held-out, and background
    /// roles, so every pair of archetypes is exactly orthogonal. Requires
    /// the raw dimension to fit the whole family.
    #[allow(clippy::too_many_arguments)]
    pub fn with_random_archetypes(
        num_classes: usize,
        num_ood_classes: usize,
        pool_size: usize,
        raw_dim: usize,
        grid_h: usize,
        grid_w: usize,
        shots: usize,
        images_per_eval_class: usize,
        coverage_range: (f64, f64),
        noise_level: f64,
        seed: u64,
    ) -> Result<SyntheticSpec> {
        let family = num_classes + num_ood_classes + pool_size;
        if family > raw_dim {
            return Err(Error::invalid_config(
                "raw_patch_dim",
                format!("need at least {family} dimensions for {family} orthogonal archetypes"),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(math::derive_seed(seed, STREAM_ARCHETYPES));
        let normal = Normal::new(0.0, 1.0).expect("valid std");
        // modified Gram-Schmidt over seeded Gaussian draws
        let mut family_vectors: Vec<Vec<f64>> = Vec::with_capacity(family);
        while family_vectors.len() < family {
            let mut candidate: Vec<f64> =
                (0..raw_dim).map(|_| normal.sample(&mut rng)).collect();
            for _ in 0..2 {
                for prev in &family_vectors {
                    let c = math::dot(&candidate, prev);
                    for (v, p) in candidate.iter_mut().zip(prev) {
                        *v -= c * p;
                    }
                }
            }
            let n = math::norm(&candidate);
            if n < 1e-6 {
                continue;
            }
            for v in &mut candidate {
                *v /= n;
            }
            family_vectors.push(candidate);
        }
        let ood_start = num_classes;
        let pool_start = num_classes + num_ood_classes;
        let spec = SyntheticSpec {
            grid_h,
            grid_w,
            shots,
            images_per_eval_class,
            class_archetypes: family_vectors[..ood_start].to_vec(),
            ood_archetypes: family_vectors[ood_start..pool_start].to_vec(),
            background_pool: family_vectors[pool_start..].to_vec(),
            coverage_range,
            noise_level,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn raw_dim(&self) -> usize {
        self.class_archetypes.first().map_or(0, Vec::len)
    }

    pub fn num_classes(&self) -> usize {
        self.class_archetypes.len()
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots * self.num_classes() == 0 {
            return Err(Error::invalid_config(
                "shots",
                "shots and class count must both be positive",
            ));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::invalid_config("grid_h", "grid must be non-empty"));
        }
        if self.background_pool.is_empty() {
            return Err(Error::invalid_config(
                "background_pool_size",
                "need at least one background archetype",
            ));
        }
        let (lo, hi) = self.coverage_range;
        if !(lo > 0.0 && hi <= 1.0 && lo <= hi) {
            return Err(Error::invalid_config(
                "coverage_min",
                "coverage range must satisfy 0 < min <= max <= 1",
            ));
        }
        let d = self.raw_dim();
        let all: Vec<&Vec<f64>> = self
            .class_archetypes
            .iter()
            .chain(&self.ood_archetypes)
            .chain(&self.background_pool)
            .collect();
        for (i, v) in all.iter().enumerate() {
            if v.len() != d {
                return Err(Error::ShapeMismatch {
                    context: "archetype dim",
                    expected: d,
                    got: v.len(),
                });
            }
            let n = math::norm(v);
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::NotUnitNorm {
                    context: "archetype",
                    index: i,
                    norm: n,
                    tolerance: 1e-6,
                });
            }
        }
        // foreground archetypes must be pairwise distinct
        let fg: Vec<&Vec<f64>> = self
            .class_archetypes
            .iter()
            .chain(&self.ood_archetypes)
            .collect();
        for i in 0..fg.len() {
            for j in (i + 1)..fg.len() {
                if fg[i] == fg[j] {
                    return Err(Error::invalid_config(
                        "class_archetypes",
                        format!("archetypes {i} and {j} are identical"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Generated splits: labeled training images, labeled ID test images, and
/// OOD test images (unlabeled, disjoint archetypes).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: Vec<RawImage>,
    pub id_test: Vec<RawImage>,
    pub ood_test: Vec<RawImage>,
}

fn sample_image(
    spec: &SyntheticSpec,
    archetype: &[f64],
    label: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<RawImage> {
    let patches_total = spec.num_patches();
    let (lo, hi) = spec.coverage_range;
    let coverage = if lo == hi { lo } else { rng.gen_range(lo..hi) };
    let fg_count = ((coverage * patches_total as f64).round() as usize).clamp(1, patches_total);

    // choose foreground positions by a seeded shuffle
    let mut positions: Vec<usize> = (0..patches_total).collect();
    for i in (1..positions.len()).rev() {
        let j = rng.gen_range(0..=i);
        positions.swap(i, j);
    }
    let mut is_foreground = vec![false; patches_total];
    for &p in positions.iter().take(fg_count) {
        is_foreground[p] = true;
    }

    let noise = if spec.noise_level > 0.0 {
        Some(Normal::new(0.0, spec.noise_level).expect("valid std"))
    } else {
        None
    };
    let mut patches = Vec::with_capacity(patches_total);
    for &fg in &is_foreground {
        let base = if fg {
            archetype
        } else {
            let k = rng.gen_range(0..spec.background_pool.len());
            &spec.background_pool[k]
        };
        let mut patch = base.to_vec();
        if let Some(n) = &noise {
            for v in &mut patch {
                *v += n.sample(rng);
            }
        }
        patches.push(patch);
    }
    let mask: Vec<bool> = is_foreground.iter().map(|&fg| !fg).collect();
    RawImage::new(
        spec.grid_h,
        spec.grid_w,
        spec.raw_dim(),
        patches,
        label,
        Some(mask),
    )
}

/// Generate the three splits deterministically from the spec's seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(math::derive_seed(spec.seed, STREAM_DATA));

    let mut train = Vec::with_capacity(spec.shots * spec.num_classes());
    for (label, archetype) in spec.class_archetypes.iter().enumerate() {
        for _ in 0..spec.shots {
            train.push(sample_image(spec, archetype, Some(label), &mut rng)?);
        }
    }
    let mut id_test = Vec::new();
    for (label, archetype) in spec.class_archetypes.iter().enumerate() {
        for _ in 0..spec.images_per_eval_class {
            id_test.push(sample_image(spec, archetype, Some(label), &mut rng)?);
        }
    }
    let mut ood_test = Vec::new();
    for archetype in &spec.ood_archetypes {
        for _ in 0..spec.images_per_eval_class {
            ood_test.push(sample_image(spec, archetype, None, &mut rng)?);
        }
    }
    Ok(SyntheticDataset {
        train,
        id_test,
        ood_test,
    })
}

/// Intersection over union between an extracted background set and the
/// ground-truth background mask. Both empty counts as an exact match.
pub fn extraction_iou(selection: &BackgroundSet, mask: &[bool]) -> Result<f64> {
    for &i in &selection.indices {
        if i >= mask.len() {
            return Err(Error::IndexOutOfRange {
                context: "extraction mask",
                index: i,
                size: mask.len(),
            });
        }
    }
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (i, &bg) in mask.iter().enumerate() {
        let selected = selection.contains(i);
        if selected || bg {
            union += 1;
        }
        if selected && bg {
            intersection += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(intersection as f64 / union as f64)
}
