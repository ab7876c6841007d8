//! Frozen toy encoders standing in for a pretrained vision-language model.
//!
//! Both encoders are generated deterministically from a seed and never
//! updated. The text encoder applies a fixed per-token projection, mean
//! pools, optionally applies tanh, and unit-normalizes. The image encoder
//! projects each raw patch into feature space and pools the projections
//! into a global feature with fixed weights.
//!
//! Normalization is part of the encoder and is differentiated through: the
//! backward pass applies the tangent-space projector of the final
//! normalization, so gradients of any loss built on cosine similarities of
//! encoder outputs are exact.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::math::{self, derive_seed};
use crate::types::{FeatureBundle, PromptSet, RawImage};

const STREAM_TEXT_WEIGHTS: u64 = 1;
const STREAM_IMAGE_WEIGHTS: u64 = 2;

/// Activation applied after mean pooling, before normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Identity,
    Tanh,
}

impl Nonlinearity {
    fn apply(&self, z: &[f64]) -> Vec<f64> {
        match self {
            Nonlinearity::Identity => z.to_vec(),
            Nonlinearity::Tanh => z.iter().map(|x| x.tanh()).collect(),
        }
    }

    /// Elementwise derivative evaluated at pre-activation `z`.
    fn derivative(&self, z: &[f64]) -> Vec<f64> {
        match self {
            Nonlinearity::Identity => vec![1.0; z.len()],
            Nonlinearity::Tanh => z
                .iter()
                .map(|x| {
                    let t = x.tanh();
                    1.0 - t * t
                })
                .collect(),
        }
    }
}

fn matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| math::dot(row, x)).collect()
}

/// y = A^T x for row-major A.
fn matvec_transpose(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let cols = a.first().map_or(0, Vec::len);
    let mut out = vec![0.0; cols];
    for (row, &xi) in a.iter().zip(x) {
        for (o, &r) in out.iter_mut().zip(row) {
            *o += xi * r;
        }
    }
    out
}

/// Orthonormal square matrix from seeded Gaussian rows (modified
/// Gram-Schmidt with a re-orthogonalization pass).
fn random_rotation(dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("valid std");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut candidate: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        for _ in 0..2 {
            for prev in &rows {
                let c = math::dot(&candidate, prev);
                for (v, p) in candidate.iter_mut().zip(prev) {
                    *v -= c * p;
                }
            }
        }
        let n = math::norm(&candidate);
        if n < 1e-6 {
            continue; // resample a linearly dependent draw
        }
        for v in &mut candidate {
            *v /= n;
        }
        rows.push(candidate);
    }
    rows
}

fn hash_matrix(h: &mut DefaultHasher, m: &[Vec<f64>]) {
    for row in m {
        for v in row {
            v.to_bits().hash(h);
        }
    }
}

fn pooled_projection(projection: &[Vec<f64>], tokens: &[Vec<f64>]) -> Vec<f64> {
    let dim = projection.len();
    let mut mean = vec![0.0; dim];
    for t in tokens {
        for (m, v) in mean.iter_mut().zip(t) {
            *m += v;
        }
    }
    let scale = 1.0 / tokens.len() as f64;
    for m in &mut mean {
        *m *= scale;
    }
    matvec(projection, &mean)
}

/// Frozen text encoder: per-token rotation, mean pooling, optional tanh,
/// unit normalization. The projection is a rotation so feeding it
/// `transpose(A) * v` recovers direction `v`, which the synthetic benchmark
/// uses to plant class words.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTextEncoder {
    projection: Vec<Vec<f64>>,
    nonlinearity: Nonlinearity,
    dim: usize,
}

impl FrozenTextEncoder {
    pub fn seeded(dim: usize, seed: u64, nonlinearity: Nonlinearity) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_TEXT_WEIGHTS));
        FrozenTextEncoder {
            projection: random_rotation(dim, &mut rng),
            nonlinearity,
            dim,
        }
    }

    /// Identity projection, handy for hand-checkable tests.
    pub fn identity(dim: usize) -> Self {
        let projection = (0..dim)
            .map(|i| {
                let mut row = vec![0.0; dim];
                row[i] = 1.0;
                row
            })
            .collect();
        FrozenTextEncoder {
            projection,
            nonlinearity: Nonlinearity::Identity,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.nonlinearity
    }

    fn check_tokens(&self, tokens: &[Vec<f64>]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::ShapeMismatch {
                context: "text encoder tokens",
                expected: 1,
                got: 0,
            });
        }
        for t in tokens {
            if t.len() != self.dim {
                return Err(Error::ShapeMismatch {
                    context: "text token dim",
                    expected: self.dim,
                    got: t.len(),
                });
            }
        }
        Ok(())
    }

    /// Encode an arbitrary token sequence to a unit feature vector.
    pub fn encode_tokens(&self, tokens: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let z = pooled_projection(&self.projection, tokens);
        let a = self.nonlinearity.apply(&z);
        math::normalize(&a)
    }

    /// Unit text feature for one class: shared context tokens plus the
    /// frozen class word.
    pub fn encode_class(&self, prompts: &PromptSet, class_index: usize) -> Result<Vec<f64>> {
        let tokens = prompts.class_tokens(class_index)?;
        self.encode_tokens(&tokens)
    }

    /// Unit text features for all classes.
    pub fn encode_all_classes(&self, prompts: &PromptSet) -> Result<Vec<Vec<f64>>> {
        (0..prompts.num_classes())
            .map(|j| self.encode_class(prompts, j))
            .collect()
    }

    /// Unit background text feature. Depends on the background tokens only;
    /// no class information flows in.
    pub fn encode_background(&self, prompts: &PromptSet) -> Result<Vec<f64>> {
        self.encode_tokens(&prompts.background_tokens)
    }

    /// Gradient of `upstream . encode_tokens(tokens)` with respect to each
    /// token. Mean pooling makes the gradient identical across tokens, so a
    /// single vector is returned; callers apply it to every token of the
    /// sequence (and drop it for frozen class words).
    pub fn backprop_tokens(&self, tokens: &[Vec<f64>], upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        if upstream.len() != self.dim {
            return Err(Error::ShapeMismatch {
                context: "text upstream gradient",
                expected: self.dim,
                got: upstream.len(),
            });
        }
        let z = pooled_projection(&self.projection, tokens);
        let a = self.nonlinearity.apply(&z);
        let a_norm = math::norm(&a);
        if a_norm <= math::DEGENERATE_NORM {
            return Err(Error::DegenerateVector { norm: a_norm });
        }
        let g: Vec<f64> = a.iter().map(|v| v / a_norm).collect();
        // through normalization: (u - (u.g) g) / |a|
        let ug = math::dot(upstream, &g);
        let after_norm: Vec<f64> = upstream
            .iter()
            .zip(&g)
            .map(|(u, gi)| (u - ug * gi) / a_norm)
            .collect();
        // through the activation
        let dact = self.nonlinearity.derivative(&z);
        let after_act: Vec<f64> = after_norm.iter().zip(&dact).map(|(v, d)| v * d).collect();
        // through pooling and the shared projection
        Ok(self.backprop_pooled_projection(&after_act, tokens.len()))
    }

    /// Adjoint of the pooled projection alone: `transpose(A) v / count`.
    pub fn backprop_pooled_projection(&self, v: &[f64], token_count: usize) -> Vec<f64> {
        let mut out = matvec_transpose(&self.projection, v);
        let scale = 1.0 / token_count as f64;
        for o in &mut out {
            *o *= scale;
        }
        out
    }

    /// Token that the encoder maps to direction `target` when it is the
    /// only content (zero context, identity nonlinearity): the rotation
    /// transpose applied to the normalized target.
    pub fn token_for_direction(&self, target: &[f64]) -> Result<Vec<f64>> {
        if target.len() != self.dim {
            return Err(Error::ShapeMismatch {
                context: "target direction",
                expected: self.dim,
                got: target.len(),
            });
        }
        let unit = math::normalize(target)?;
        Ok(matvec_transpose(&self.projection, &unit))
    }

    /// Fingerprint of the frozen weights, for immutability checks.
    pub fn weights_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        hash_matrix(&mut h, &self.projection);
        (self.nonlinearity == Nonlinearity::Tanh).hash(&mut h);
        h.finish()
    }
}

/// Frozen image encoder: a fixed raw-to-feature projection per patch plus
/// fixed pooling weights for the global feature. When the raw patch
/// dimension equals the feature dimension the projection is a rotation, so
/// raw-space cosine geometry carries over exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenImageEncoder {
    projection: Vec<Vec<f64>>,
    pooling: Vec<f64>,
    grid_h: usize,
    grid_w: usize,
    raw_dim: usize,
    dim: usize,
}

impl FrozenImageEncoder {
    pub fn seeded(dim: usize, raw_dim: usize, grid_h: usize, grid_w: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_IMAGE_WEIGHTS));
        let projection = if dim == raw_dim {
            random_rotation(dim, &mut rng)
        } else {
            let normal = Normal::new(0.0, 1.0 / (raw_dim as f64).sqrt()).expect("valid std");
            (0..dim)
                .map(|_| (0..raw_dim).map(|_| normal.sample(&mut rng)).collect())
                .collect()
        };
        let normal = Normal::new(0.0, 1.0).expect("valid std");
        let raw_weights: Vec<f64> = (0..grid_h * grid_w)
            .map(|_| {
                let draw: f64 = normal.sample(&mut rng);
                draw.abs() + 1e-3
            })
            .collect();
        let total: f64 = raw_weights.iter().sum();
        let pooling = raw_weights.iter().map(|w| w / total).collect();
        FrozenImageEncoder {
            projection,
            pooling,
            grid_h,
            grid_w,
            raw_dim,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn raw_dim(&self) -> usize {
        self.raw_dim
    }

    /// Project a raw patch into feature space without normalizing.
    pub fn project_raw(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.raw_dim {
            return Err(Error::ShapeMismatch {
                context: "raw patch dim",
                expected: self.raw_dim,
                got: raw.len(),
            });
        }
        Ok(matvec(&self.projection, raw))
    }

    /// Feature-space unit direction of a raw-space vector.
    pub fn feature_direction(&self, raw: &[f64]) -> Result<Vec<f64>> {
        math::normalize(&self.project_raw(raw)?)
    }

    /// Encode a raw image into unit local features and a pooled unit global
    /// feature. Label and ground-truth mask pass through unchanged.
    pub fn encode(&self, img: &RawImage) -> Result<FeatureBundle> {
        if img.grid_h != self.grid_h || img.grid_w != self.grid_w {
            return Err(Error::ShapeMismatch {
                context: "image grid",
                expected: self.grid_h * self.grid_w,
                got: img.grid_h * img.grid_w,
            });
        }
        let mut locals = Vec::with_capacity(img.num_patches());
        let mut pooled = vec![0.0; self.dim];
        for (patch, &w) in img.patches.iter().zip(&self.pooling) {
            let u = self.project_raw(patch)?;
            for (p, v) in pooled.iter_mut().zip(&u) {
                *p += w * v;
            }
            locals.push(math::normalize(&u)?);
        }
        let global = math::normalize(&pooled)?;
        FeatureBundle::new(
            img.grid_h,
            img.grid_w,
            global,
            locals,
            img.label,
            img.background_mask.clone(),
        )
    }

    pub fn weights_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        hash_matrix(&mut h, &self.projection);
        for w in &self.pooling {
            w.to_bits().hash(&mut h);
        }
        h.finish()
    }
}
