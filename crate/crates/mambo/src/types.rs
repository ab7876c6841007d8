//! Core domain types shared by the pipeline stages.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::math::{self, derive_seed};

/// Tolerance for the unit-norm invariant on in-memory features.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Seed streams for the learnable prompt initialization.
const STREAM_CONTEXT: u64 = 3;
const STREAM_CLASS_WORDS: u64 = 4;
const STREAM_BACKGROUND: u64 = 5;

/// Std of the small Gaussian initialization used for learnable tokens.
pub const TOKEN_INIT_STD: f64 = 0.02;

fn check_unit(context: &'static str, index: usize, v: &[f64]) -> Result<()> {
    let n = math::norm(v);
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::NotUnitNorm {
            context,
            index,
            norm: n,
            tolerance: UNIT_NORM_TOL,
        });
    }
    Ok(())
}

/// One image's encoded features: a unit global vector plus one unit vector
/// per patch in row-major order (patch i sits at row i / W, column i % W).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub grid_h: usize,
    pub grid_w: usize,
    pub global_feature: Vec<f64>,
    pub local_features: Vec<Vec<f64>>,
    /// Class index for labeled in-distribution samples.
    pub label: Option<usize>,
    /// Per-patch ground truth, true where a patch is background. Only
    /// synthetic data carries it.
    pub true_background_mask: Option<Vec<bool>>,
}

impl FeatureBundle {
    pub fn new(
        grid_h: usize,
        grid_w: usize,
        global_feature: Vec<f64>,
        local_features: Vec<Vec<f64>>,
        label: Option<usize>,
        true_background_mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        let patches = grid_h * grid_w;
        if patches == 0 {
            return Err(Error::ShapeMismatch {
                context: "patch grid",
                expected: 1,
                got: 0,
            });
        }
        if local_features.len() != patches {
            return Err(Error::ShapeMismatch {
                context: "local feature count",
                expected: patches,
                got: local_features.len(),
            });
        }
        let d = global_feature.len();
        check_unit("global feature", 0, &global_feature)?;
        for (i, f) in local_features.iter().enumerate() {
            if f.len() != d {
                return Err(Error::ShapeMismatch {
                    context: "local feature dim",
                    expected: d,
                    got: f.len(),
                });
            }
            check_unit("local feature", i, f)?;
        }
        if let Some(mask) = &true_background_mask {
            if mask.len() != patches {
                return Err(Error::ShapeMismatch {
                    context: "background mask length",
                    expected: patches,
                    got: mask.len(),
                });
            }
        }
        Ok(FeatureBundle {
            grid_h,
            grid_w,
            global_feature,
            local_features,
            label,
            true_background_mask,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.global_feature.len()
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Learnable prompt state. Only `context_tokens` and `background_tokens`
/// receive updates; `class_word_embeddings` stay frozen for the lifetime of
/// the prompt set.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub context_tokens: Vec<Vec<f64>>,
    pub class_word_embeddings: Vec<Vec<f64>>,
    pub background_tokens: Vec<Vec<f64>>,
}

impl PromptSet {
    /// Seeded random initialization: small Gaussian learnable tokens and
    /// random unit class words.
    pub fn init(cfg: &ModelConfig) -> PromptSet {
        let d = cfg.feature_dim;
        let normal = Normal::new(0.0, TOKEN_INIT_STD).expect("valid std");
        let gauss = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..d).map(|_| normal.sample(rng)).collect()
        };

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_CONTEXT));
        let context_tokens = (0..cfg.context_len).map(|_| gauss(&mut rng)).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_CLASS_WORDS));
        let class_word_embeddings = (0..cfg.num_classes)
            .map(|_| {
                let raw: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
                math::normalize(&raw).expect("random vector is non-degenerate")
            })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_BACKGROUND));
        let background_tokens = (0..cfg.background_len).map(|_| gauss(&mut rng)).collect();

        PromptSet {
            context_tokens,
            class_word_embeddings,
            background_tokens,
        }
    }

    pub fn context_len(&self) -> usize {
        self.context_tokens.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_word_embeddings.len()
    }

    pub fn background_len(&self) -> usize {
        self.background_tokens.len()
    }

    /// Token sequence fed to the text encoder for one class: the shared
    /// context tokens with the class word appended.
    pub fn class_tokens(&self, class_index: usize) -> Result<Vec<Vec<f64>>> {
        let word = self
            .class_word_embeddings
            .get(class_index)
            .ok_or(Error::IndexOutOfRange {
                context: "class word embeddings",
                index: class_index,
                size: self.class_word_embeddings.len(),
            })?;
        let mut tokens = self.context_tokens.clone();
        tokens.push(word.clone());
        Ok(tokens)
    }
}

/// Per-sample similarity state produced by the decomposition stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMaps {
    /// Patch-by-class cosine similarities, one row per patch.
    pub class_sim: Vec<Vec<f64>>,
    /// Patch-by-background cosine similarities.
    pub background_sim: Vec<f64>,
    /// Refined background similarities. Equal to `background_sim` until
    /// refinement runs.
    pub refined_sim: Vec<f64>,
    /// Predicted probability of the ground-truth class from the global
    /// branch.
    pub gt_probability: f64,
}

impl SimilarityMaps {
    pub fn new(
        class_sim: Vec<Vec<f64>>,
        background_sim: Vec<f64>,
        gt_probability: f64,
    ) -> Result<Self> {
        if class_sim.len() != background_sim.len() {
            return Err(Error::ShapeMismatch {
                context: "similarity map rows",
                expected: class_sim.len(),
                got: background_sim.len(),
            });
        }
        if !(0.0..=1.0).contains(&gt_probability) {
            return Err(Error::Internal(format!(
                "gt probability {gt_probability} outside [0, 1]"
            )));
        }
        let refined_sim = background_sim.clone();
        Ok(SimilarityMaps {
            class_sim,
            background_sim,
            refined_sim,
            gt_probability,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.background_sim.len()
    }
}

/// How a background set was extracted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractionStrategy {
    TopK,
    Sct,
}

/// Selected background patch indices, always sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundSet {
    pub indices: Vec<usize>,
    /// Extraction threshold; present only for threshold-based extraction.
    pub threshold: Option<f64>,
    pub strategy: ExtractionStrategy,
}

impl BackgroundSet {
    pub fn new(
        mut indices: Vec<usize>,
        threshold: Option<f64>,
        strategy: ExtractionStrategy,
    ) -> Self {
        indices.sort_unstable();
        indices.dedup();
        BackgroundSet {
            indices,
            threshold,
            strategy,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, patch: usize) -> bool {
        self.indices.binary_search(&patch).is_ok()
    }
}

/// An unencoded image: a grid of raw patch vectors. Synthetic images are
/// built directly as patch grids; pixel matrices can be split into one via
/// [`RawImage::from_pixels`].
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Raw values per patch, before any projection.
    pub patch_dim: usize,
    /// Row-major patch grid, `grid_h * grid_w` entries.
    pub patches: Vec<Vec<f64>>,
    pub label: Option<usize>,
    pub background_mask: Option<Vec<bool>>,
}

impl RawImage {
    pub fn new(
        grid_h: usize,
        grid_w: usize,
        patch_dim: usize,
        patches: Vec<Vec<f64>>,
        label: Option<usize>,
        background_mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        if patches.len() != grid_h * grid_w {
            return Err(Error::ShapeMismatch {
                context: "raw patch count",
                expected: grid_h * grid_w,
                got: patches.len(),
            });
        }
        for p in &patches {
            if p.len() != patch_dim {
                return Err(Error::ShapeMismatch {
                    context: "raw patch dim",
                    expected: patch_dim,
                    got: p.len(),
                });
            }
        }
        if let Some(mask) = &background_mask {
            if mask.len() != grid_h * grid_w {
                return Err(Error::ShapeMismatch {
                    context: "background mask length",
                    expected: grid_h * grid_w,
                    got: mask.len(),
                });
            }
        }
        Ok(RawImage {
            grid_h,
            grid_w,
            patch_dim,
            patches,
            label,
            background_mask,
        })
    }

    /// Split a row-major pixel matrix into an H x W grid of flattened
    /// blocks. The pixel dimensions must divide evenly into the grid.
    pub fn from_pixels(
        pixel_rows: usize,
        pixel_cols: usize,
        pixels: &[f64],
        grid_h: usize,
        grid_w: usize,
    ) -> Result<Self> {
        if pixels.len() != pixel_rows * pixel_cols {
            return Err(Error::ShapeMismatch {
                context: "pixel buffer",
                expected: pixel_rows * pixel_cols,
                got: pixels.len(),
            });
        }
        if grid_h == 0 || grid_w == 0 || !pixel_rows.is_multiple_of(grid_h) || !pixel_cols.is_multiple_of(grid_w)
        {
            return Err(Error::ShapeMismatch {
                context: "pixel grid divisibility",
                expected: grid_h * grid_w,
                got: pixel_rows * pixel_cols,
            });
        }
        let bh = pixel_rows / grid_h;
        let bw = pixel_cols / grid_w;
        let mut patches = Vec::with_capacity(grid_h * grid_w);
        for gr in 0..grid_h {
            for gc in 0..grid_w {
                let mut patch = Vec::with_capacity(bh * bw);
                for r in 0..bh {
                    let row = gr * bh + r;
                    let start = row * pixel_cols + gc * bw;
                    patch.extend_from_slice(&pixels[start..start + bw]);
                }
                patches.push(patch);
            }
        }
        RawImage::new(grid_h, grid_w, bh * bw, patches, None, None)
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }
}
