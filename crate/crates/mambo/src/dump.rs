//! Binary tensor container: the feature dump format for moving encoded
//! datasets (including real-model exports) in and out, and the checkpoint
//! format built on the same conventions.
//!
//! Both files are little-endian with a fixed header. The header fully
//! determines the byte length, which is validated before any tensor is
//! read. Tensors are stored as f32; in-memory math stays f64, and readers
//! renormalize features after the f32 round-trip.

use std::path::Path;

use crate::config::{BackgroundInit, ModelConfig, RunConfig, ScoreKind, StrategyFlags};
use crate::error::{Error, FormatError, Result};
use crate::math;
use crate::types::{FeatureBundle, PromptSet};

pub const DUMP_MAGIC: [u8; 4] = *b"MMBO";
pub const DUMP_VERSION: u16 = 1;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MMBC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Unit-norm tolerance for stored f32 vectors.
pub const DUMP_NORM_TOL: f64 = 1e-3;

const FLAG_BACKGROUND: u8 = 0b01;
const FLAG_MASKS: u8 = 0b10;

/// One stored sample: label (-1 for OOD), global feature, row-major local
/// features, optional background mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpSample {
    pub label: i32,
    pub global: Vec<f32>,
    /// Concatenated local features, patch-major.
    pub locals: Vec<f32>,
    pub mask: Option<Vec<u8>>,
}

/// In-memory image of a feature dump file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub feature_dim: u32,
    pub num_classes: u32,
    pub grid_h: u32,
    pub grid_w: u32,
    /// Concatenated class text features, class-major. May be empty when the
    /// producer has no text branch.
    pub class_text_features: Vec<f32>,
    pub background_text_feature: Option<Vec<f32>>,
    pub samples: Vec<DumpSample>,
}

fn f64s_to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

impl FeatureDump {
    pub fn num_patches(&self) -> usize {
        self.grid_h as usize * self.grid_w as usize
    }

    /// Build a dump from in-memory bundles plus optional text features.
    pub fn from_bundles(
        grid_h: usize,
        grid_w: usize,
        feature_dim: usize,
        class_features: &[Vec<f64>],
        background_feature: Option<&[f64]>,
        bundles: &[FeatureBundle],
    ) -> Result<FeatureDump> {
        let mut class_flat = Vec::with_capacity(class_features.len() * feature_dim);
        for g in class_features {
            if g.len() != feature_dim {
                return Err(Error::ShapeMismatch {
                    context: "dump class feature dim",
                    expected: feature_dim,
                    got: g.len(),
                });
            }
            class_flat.extend(f64s_to_f32(g));
        }
        let has_mask = bundles.first().is_some_and(|b| b.true_background_mask.is_some());
        let mut samples = Vec::with_capacity(bundles.len());
        for b in bundles {
            if b.grid_h != grid_h || b.grid_w != grid_w || b.feature_dim() != feature_dim {
                return Err(Error::ShapeMismatch {
                    context: "dump bundle shape",
                    expected: grid_h * grid_w * feature_dim,
                    got: b.num_patches() * b.feature_dim(),
                });
            }
            if b.true_background_mask.is_some() != has_mask {
                return Err(Error::ShapeMismatch {
                    context: "dump mask presence",
                    expected: has_mask as usize,
                    got: b.true_background_mask.is_some() as usize,
                });
            }
            let mut locals = Vec::with_capacity(b.num_patches() * feature_dim);
            for f in &b.local_features {
                locals.extend(f64s_to_f32(f));
            }
            samples.push(DumpSample {
                label: b.label.map_or(-1, |l| l as i32),
                global: f64s_to_f32(&b.global_feature),
                locals,
                mask: b
                    .true_background_mask
                    .as_ref()
                    .map(|m| m.iter().map(|&x| x as u8).collect()),
            });
        }
        Ok(FeatureDump {
            feature_dim: feature_dim as u32,
            num_classes: class_features.len() as u32,
            grid_h: grid_h as u32,
            grid_w: grid_w as u32,
            class_text_features: class_flat,
            background_text_feature: background_feature.map(f64s_to_f32),
            samples,
        })
    }

    /// Recover feature bundles, renormalizing after the f32 round-trip.
    pub fn to_bundles(&self) -> Result<Vec<FeatureBundle>> {
        let d = self.feature_dim as usize;
        let (h, w) = (self.grid_h as usize, self.grid_w as usize);
        self.samples
            .iter()
            .map(|s| {
                let global = math::normalize(&s.global.iter().map(|&x| x as f64).collect::<Vec<_>>())?;
                let locals = s
                    .locals
                    .chunks(d)
                    .map(|c| math::normalize(&c.iter().map(|&x| x as f64).collect::<Vec<_>>()))
                    .collect::<Result<Vec<_>>>()?;
                let label = if s.label < 0 {
                    None
                } else {
                    Some(s.label as usize)
                };
                let mask = s.mask.as_ref().map(|m| m.iter().map(|&b| b != 0).collect());
                FeatureBundle::new(h, w, global, locals, label, mask)
            })
            .collect()
    }

    /// Stored class text features as f64 unit vectors.
    pub fn class_features_f64(&self) -> Result<Vec<Vec<f64>>> {
        let d = self.feature_dim as usize;
        self.class_text_features
            .chunks(d)
            .map(|c| math::normalize(&c.iter().map(|&x| x as f64).collect::<Vec<_>>()))
            .collect()
    }

    fn validate_norms(&self) -> std::result::Result<(), FormatError> {
        let d = self.feature_dim as usize;
        let mut index = 0usize;
        let mut check = |chunk: &[f32]| -> std::result::Result<(), FormatError> {
            let n = chunk.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            if !n.is_finite() || (n - 1.0).abs() > DUMP_NORM_TOL {
                return Err(FormatError::NormViolation {
                    index,
                    norm: n,
                    tolerance: DUMP_NORM_TOL,
                });
            }
            index += 1;
            Ok(())
        };
        for c in self.class_text_features.chunks(d) {
            check(c)?;
        }
        if let Some(bg) = &self.background_text_feature {
            check(bg)?;
        }
        for s in &self.samples {
            check(&s.global)?;
            for c in s.locals.chunks(d) {
                check(c)?;
            }
        }
        Ok(())
    }

    fn payload_len(&self) -> u64 {
        let d = self.feature_dim as u64;
        let patches = self.grid_h as u64 * self.grid_w as u64;
        let has_mask = self.samples.first().is_some_and(|s| s.mask.is_some());
        let per_sample = 4 + d * 4 + patches * d * 4 + if has_mask { patches } else { 0 };
        let bg = if self.background_text_feature.is_some() {
            d * 4
        } else {
            0
        };
        self.num_classes as u64 * d * 4 + bg + self.samples.len() as u64 * per_sample
    }

    /// Serialize to the on-disk byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate_norms().map_err(Error::Format)?;
        let has_mask = self.samples.first().is_some_and(|s| s.mask.is_some());
        for s in &self.samples {
            if s.mask.is_some() != has_mask {
                return Err(Error::ShapeMismatch {
                    context: "dump mask presence",
                    expected: has_mask as usize,
                    got: s.mask.is_some() as usize,
                });
            }
        }
        let mut flags = 0u8;
        if self.background_text_feature.is_some() {
            flags |= FLAG_BACKGROUND;
        }
        if has_mask {
            flags |= FLAG_MASKS;
        }
        let mut out = Vec::with_capacity(27 + self.payload_len() as usize);
        out.extend_from_slice(&DUMP_MAGIC);
        out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
        out.extend_from_slice(&self.feature_dim.to_le_bytes());
        out.extend_from_slice(&self.num_classes.to_le_bytes());
        out.extend_from_slice(&self.grid_h.to_le_bytes());
        out.extend_from_slice(&self.grid_w.to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u32).to_le_bytes());
        out.push(flags);
        for v in &self.class_text_features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(bg) = &self.background_text_feature {
            for v in bg {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for s in &self.samples {
            out.extend_from_slice(&s.label.to_le_bytes());
            for v in &s.global {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in &s.locals {
                out.extend_from_slice(&v.to_le_bytes());
            }
            if let Some(m) = &s.mask {
                out.extend_from_slice(m);
            }
        }
        Ok(out)
    }

    /// Parse and validate the on-disk byte layout. Every structural defect
    /// maps to a distinct error; nothing panics on corrupt input.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<FeatureDump, FormatError> {
        const HEADER: usize = 27;
        if bytes.len() < HEADER {
            return Err(FormatError::Truncated {
                expected: HEADER as u64,
                got: bytes.len() as u64,
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("fixed slice");
        if magic != DUMP_MAGIC {
            return Err(FormatError::BadMagic {
                got: magic,
                expected: DUMP_MAGIC,
            });
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().expect("fixed slice"));
        if version != DUMP_VERSION {
            return Err(FormatError::UnsupportedVersion {
                got: version,
                expected: DUMP_VERSION,
            });
        }
        let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("fixed"));
        let d = read_u32(6);
        let m = read_u32(10);
        let h = read_u32(14);
        let w = read_u32(18);
        let n = read_u32(22);
        let flags = bytes[26];
        if d == 0 {
            return Err(FormatError::InvalidHeader {
                field: "feature_dim",
                value: 0,
            });
        }
        if h == 0 || w == 0 {
            return Err(FormatError::InvalidHeader {
                field: "grid",
                value: (h as u64) << 32 | w as u64,
            });
        }
        if flags & !(FLAG_BACKGROUND | FLAG_MASKS) != 0 {
            return Err(FormatError::InvalidHeader {
                field: "flags",
                value: flags as u64,
            });
        }
        let has_bg = flags & FLAG_BACKGROUND != 0;
        let has_mask = flags & FLAG_MASKS != 0;

        // derive the exact byte length with overflow-checked arithmetic
        let derive = || -> Option<u64> {
            let d = d as u64;
            let patches = (h as u64).checked_mul(w as u64)?;
            let class_bytes = (m as u64).checked_mul(d)?.checked_mul(4)?;
            let bg_bytes = if has_bg { d.checked_mul(4)? } else { 0 };
            let locals = patches.checked_mul(d)?.checked_mul(4)?;
            let mask = if has_mask { patches } else { 0 };
            let per_sample = 4u64
                .checked_add(d.checked_mul(4)?)?
                .checked_add(locals)?
                .checked_add(mask)?;
            (HEADER as u64)
                .checked_add(class_bytes)?
                .checked_add(bg_bytes)?
                .checked_add((n as u64).checked_mul(per_sample)?)
        };
        let expected = derive().ok_or(FormatError::InvalidHeader {
            field: "sizes",
            value: u64::MAX,
        })?;
        let actual = bytes.len() as u64;
        if actual < expected {
            return Err(FormatError::Truncated {
                expected,
                got: actual,
            });
        }
        if actual > expected {
            return Err(FormatError::SizeMismatch {
                declared: expected,
                actual,
            });
        }

        struct Cursor<'a> {
            bytes: &'a [u8],
            at: usize,
        }
        impl Cursor<'_> {
            fn f32s(&mut self, count: usize) -> Vec<f32> {
                let mut out = Vec::with_capacity(count);
                for _ in 0..count {
                    out.push(f32::from_le_bytes(
                        self.bytes[self.at..self.at + 4]
                            .try_into()
                            .expect("length pre-validated"),
                    ));
                    self.at += 4;
                }
                out
            }
            fn i32(&mut self) -> i32 {
                let v = i32::from_le_bytes(
                    self.bytes[self.at..self.at + 4]
                        .try_into()
                        .expect("length pre-validated"),
                );
                self.at += 4;
                v
            }
        }
        let mut cur = Cursor { bytes, at: HEADER };
        let d_us = d as usize;
        let patches = h as usize * w as usize;
        let class_text_features = cur.f32s(m as usize * d_us);
        let background_text_feature = if has_bg { Some(cur.f32s(d_us)) } else { None };
        let mut samples = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let label = cur.i32();
            let global = cur.f32s(d_us);
            let locals = cur.f32s(patches * d_us);
            let mask = if has_mask {
                let m = bytes[cur.at..cur.at + patches].to_vec();
                for (off, &b) in m.iter().enumerate() {
                    if b > 1 {
                        return Err(FormatError::InvalidMask {
                            offset: cur.at + off,
                            value: b,
                        });
                    }
                }
                cur.at += patches;
                Some(m)
            } else {
                None
            };
            samples.push(DumpSample {
                label,
                global,
                locals,
                mask,
            });
        }
        let dump = FeatureDump {
            feature_dim: d,
            num_classes: m,
            grid_h: h,
            grid_w: w,
            class_text_features,
            background_text_feature,
            samples,
        };
        dump.validate_norms()?;
        Ok(dump)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_dump(path: &Path, dump: &FeatureDump) -> Result<()> {
    write_file(path, &dump.to_bytes()?)
}

pub fn read_dump(path: &Path) -> Result<FeatureDump> {
    Ok(FeatureDump::from_bytes(&read_file(path)?)?)
}

/// Trained state: the full run configuration plus the prompt tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub prompts: PromptSet,
}

struct ByteWriter(Vec<u8>);

impl ByteWriter {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32_tokens(&mut self, tokens: &[Vec<f64>]) {
        for t in tokens {
            for &v in t {
                self.0.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    fn need(&self, count: usize) -> std::result::Result<(), FormatError> {
        if self.at + count > self.bytes.len() {
            return Err(FormatError::Truncated {
                expected: (self.at + count) as u64,
                got: self.bytes.len() as u64,
            });
        }
        Ok(())
    }
    fn u8(&mut self) -> std::result::Result<u8, FormatError> {
        self.need(1)?;
        let v = self.bytes[self.at];
        self.at += 1;
        Ok(v)
    }
    fn u16(&mut self) -> std::result::Result<u16, FormatError> {
        self.need(2)?;
        let v = u16::from_le_bytes(self.bytes[self.at..self.at + 2].try_into().expect("len"));
        self.at += 2;
        Ok(v)
    }
    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        self.need(4)?;
        let v = u32::from_le_bytes(self.bytes[self.at..self.at + 4].try_into().expect("len"));
        self.at += 4;
        Ok(v)
    }
    fn u64(&mut self) -> std::result::Result<u64, FormatError> {
        self.need(8)?;
        let v = u64::from_le_bytes(self.bytes[self.at..self.at + 8].try_into().expect("len"));
        self.at += 8;
        Ok(v)
    }
    fn f64(&mut self) -> std::result::Result<f64, FormatError> {
        self.need(8)?;
        let v = f64::from_le_bytes(self.bytes[self.at..self.at + 8].try_into().expect("len"));
        self.at += 8;
        Ok(v)
    }
    fn f32_tokens(
        &mut self,
        count: usize,
        dim: usize,
    ) -> std::result::Result<Vec<Vec<f64>>, FormatError> {
        let total = count
            .checked_mul(dim)
            .and_then(|x| x.checked_mul(4))
            .ok_or(FormatError::InvalidHeader {
                field: "token counts",
                value: count as u64,
            })?;
        self.need(total)?;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut token = Vec::with_capacity(dim);
            for _ in 0..dim {
                let v = f32::from_le_bytes(
                    self.bytes[self.at..self.at + 4].try_into().expect("len"),
                );
                self.at += 4;
                token.push(v as f64);
            }
            out.push(token);
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.run.model;
        if self.prompts.context_len() != m.context_len
            || self.prompts.num_classes() != m.num_classes
            || self.prompts.background_len() != m.background_len
        {
            return Err(Error::ShapeMismatch {
                context: "checkpoint prompt shape",
                expected: m.context_len + m.num_classes + m.background_len,
                got: self.prompts.context_len()
                    + self.prompts.num_classes()
                    + self.prompts.background_len(),
            });
        }
        let mut w = ByteWriter(Vec::new());
        w.0.extend_from_slice(&CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.u32(m.feature_dim as u32);
        w.u32(m.num_classes as u32);
        w.u32(m.grid_h as u32);
        w.u32(m.grid_w as u32);
        w.u32(m.context_len as u32);
        w.u32(m.background_len as u32);
        w.f64(m.temperature_train);
        w.f64(m.temperature_test);
        w.f64(m.ood_weight);
        w.f64(m.sct_strength);
        w.u32(m.topk as u32);
        w.u32(m.rmcm_q as u32);
        w.u64(m.seed);
        let t = &self.run.train;
        w.u32(t.epochs as u32);
        w.f64(t.learning_rate);
        w.u32(t.batch_size as u32);
        w.u32(t.shots as u32);
        let mut flag_bits = 0u8;
        if t.flags.use_refinement {
            flag_bits |= 1;
        }
        if t.flags.use_patch_sct {
            flag_bits |= 2;
        }
        if t.flags.use_loss_modulation {
            flag_bits |= 4;
        }
        if t.flags.grad_through_modulation {
            flag_bits |= 8;
        }
        w.u8(flag_bits);
        let d = &self.run.data;
        w.u32(d.raw_patch_dim as u32);
        w.u32(d.num_ood_classes as u32);
        w.u32(d.images_per_eval_class as u32);
        w.u32(d.background_pool_size as u32);
        w.f64(d.coverage_min);
        w.f64(d.coverage_max);
        w.f64(d.noise_level);
        w.f64(d.class_word_skew);
        w.u8(match d.background_init {
            BackgroundInit::PoolAligned => 0,
            BackgroundInit::Random => 1,
        });
        w.u8(match self.run.score {
            ScoreKind::Mcm => 0,
            ScoreKind::GlMcm => 1,
            ScoreKind::Rmcm => 2,
        });
        let dir = self
            .run
            .dataset_dir
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        w.u32(dir.len() as u32);
        w.0.extend_from_slice(dir.as_bytes());
        w.f32_tokens(&self.prompts.context_tokens);
        w.f32_tokens(&self.prompts.class_word_embeddings);
        w.f32_tokens(&self.prompts.background_tokens);
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Checkpoint, FormatError> {
        let mut r = ByteReader { bytes, at: 0 };
        r.need(6)?;
        let magic: [u8; 4] = bytes[0..4].try_into().expect("len");
        if magic != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                got: magic,
                expected: CHECKPOINT_MAGIC,
            });
        }
        r.at = 4;
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::UnsupportedVersion {
                got: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let feature_dim = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        let grid_h = r.u32()? as usize;
        let grid_w = r.u32()? as usize;
        let context_len = r.u32()? as usize;
        let background_len = r.u32()? as usize;
        let model = ModelConfig {
            feature_dim,
            num_classes,
            grid_h,
            grid_w,
            context_len,
            background_len,
            temperature_train: r.f64()?,
            temperature_test: r.f64()?,
            ood_weight: r.f64()?,
            sct_strength: r.f64()?,
            topk: r.u32()? as usize,
            rmcm_q: r.u32()? as usize,
            seed: r.u64()?,
        };
        let epochs = r.u32()? as usize;
        let learning_rate = r.f64()?;
        let batch_size = r.u32()? as usize;
        let shots = r.u32()? as usize;
        let flag_bits = r.u8()?;
        if flag_bits & !0b1111 != 0 {
            return Err(FormatError::InvalidHeader {
                field: "train flags",
                value: flag_bits as u64,
            });
        }
        let train = crate::config::TrainConfig {
            epochs,
            learning_rate,
            batch_size,
            shots,
            flags: StrategyFlags {
                use_refinement: flag_bits & 1 != 0,
                use_patch_sct: flag_bits & 2 != 0,
                use_loss_modulation: flag_bits & 4 != 0,
                grad_through_modulation: flag_bits & 8 != 0,
            },
        };
        let data = crate::config::SynthConfig {
            raw_patch_dim: r.u32()? as usize,
            num_ood_classes: r.u32()? as usize,
            images_per_eval_class: r.u32()? as usize,
            background_pool_size: r.u32()? as usize,
            coverage_min: r.f64()?,
            coverage_max: r.f64()?,
            noise_level: r.f64()?,
            class_word_skew: r.f64()?,
            background_init: match r.u8()? {
                0 => BackgroundInit::PoolAligned,
                1 => BackgroundInit::Random,
                v => {
                    return Err(FormatError::InvalidHeader {
                        field: "background_init",
                        value: v as u64,
                    })
                }
            },
        };
        let score = match r.u8()? {
            0 => ScoreKind::Mcm,
            1 => ScoreKind::GlMcm,
            2 => ScoreKind::Rmcm,
            v => {
                return Err(FormatError::InvalidHeader {
                    field: "score",
                    value: v as u64,
                })
            }
        };
        let dir_len = r.u32()? as usize;
        r.need(dir_len)?;
        let dir = std::str::from_utf8(&bytes[r.at..r.at + dir_len])
            .map_err(|_| FormatError::InvalidHeader {
                field: "dataset_dir",
                value: dir_len as u64,
            })?
            .to_string();
        r.at += dir_len;
        let dataset_dir = if dir.is_empty() {
            None
        } else {
            Some(std::path::PathBuf::from(dir))
        };
        let context_tokens = r.f32_tokens(context_len, feature_dim)?;
        let class_word_embeddings = r.f32_tokens(num_classes, feature_dim)?;
        let background_tokens = r.f32_tokens(background_len, feature_dim)?;
        if r.at != bytes.len() {
            return Err(FormatError::SizeMismatch {
                declared: r.at as u64,
                actual: bytes.len() as u64,
            });
        }
        Ok(Checkpoint {
            run: RunConfig {
                model,
                train,
                data,
                score,
                dataset_dir,
            },
            prompts: PromptSet {
                context_tokens,
                class_word_embeddings,
                background_tokens,
            },
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        Ok(Checkpoint::from_bytes(&read_file(path)?)?)
    }
}
