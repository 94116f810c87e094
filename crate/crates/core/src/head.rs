//! The stochastic classifier bank.
//!
//! Every seen class owns `M` mean vectors, one per rotation, and a single
//! variance vector shared by those `M` heads. A draw of the bank perturbs
//! every mean with its own standard-normal noise scaled by the class
//! variance: `μ̂ = μ + ε ⊙ σ`. Heads are laid out task-major, then by class in
//! insertion order, then by rotation; that flat order indexes logits,
//! gradients and noise throughout the crate.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::data::ClassEmbeddingTable;
use crate::error::{Error, NumericsError, Result};
use crate::numerics::{self, Rng};

pub const DEFAULT_ETA: f64 = 16.0;
/// Per-coordinate σ of freshly initialised base classifiers. Means start as
/// `N(0, 1/d)` coordinates, so at d = 32 this is about 6% of their spread and
/// early training is close to a deterministic cosine classifier.
pub const DEFAULT_VARIANCE_INIT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassSlot {
    pub class_id: u32,
    pub task_id: usize,
}

/// What to do when a new class cannot be matched to a base class by
/// embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceFallback {
    #[default]
    Error,
    /// Use the coordinate-wise mean of the base-class variances.
    BaseMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StochasticHead {
    dim: usize,
    rotations: usize,
    eta: f64,
    stochastic: bool,
    slots: Vec<ClassSlot>,
    means: Vec<f64>,
    variances: Vec<f64>,
}

/// One draw of the bank: the sampled weights and the noise that made them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledWeights {
    pub weights: Vec<f64>,
    pub noise: Vec<f64>,
}

impl StochasticHead {
    /// An empty bank. With `stochastic == false` the variances stay pinned at
    /// zero and the bank is a deterministic cosine classifier.
    pub fn new(dim: usize, rotations: usize, eta: f64, stochastic: bool) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("head dimension must be positive".into()));
        }
        if !(1..=4).contains(&rotations) {
            return Err(Error::Config("rotation count must be in 1..=4".into()));
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!("scale must be positive, got {eta}")));
        }
        Ok(Self {
            dim,
            rotations,
            eta,
            stochastic,
            slots: Vec::new(),
            means: Vec::new(),
            variances: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn rotations(&self) -> usize {
        self.rotations
    }
    pub fn eta(&self) -> f64 {
        self.eta
    }
    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }
    pub fn slots(&self) -> &[ClassSlot] {
        &self.slots
    }
    pub fn class_count(&self) -> usize {
        self.slots.len()
    }
    pub fn head_count(&self) -> usize {
        self.slots.len() * self.rotations
    }
    pub fn task_count(&self) -> usize {
        self.slots.last().map_or(0, |s| s.task_id + 1)
    }

    pub fn slot_of(&self, class_id: u32) -> Option<usize> {
        self.slots.iter().position(|s| s.class_id == class_id)
    }

    /// Flat head index of `(slot, rotation)`.
    pub fn head_index(&self, slot: usize, rotation: usize) -> usize {
        slot * self.rotations + rotation
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }
    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Mutable means; length `head_count · dim`.
    pub fn means_mut(&mut self) -> &mut [f64] {
        &mut self.means
    }

    /// Mutable variances; length `class_count · dim`. Callers restore the
    /// non-negativity invariant with [`Self::clamp_variances`].
    pub fn variances_mut(&mut self) -> &mut [f64] {
        &mut self.variances
    }

    pub fn mean(&self, slot: usize, rotation: usize) -> &[f64] {
        let start = self.head_index(slot, rotation) * self.dim;
        &self.means[start..start + self.dim]
    }

    pub fn variance(&self, slot: usize) -> &[f64] {
        &self.variances[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn clamp_variances(&mut self) {
        if !self.stochastic {
            self.variances.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        for v in &mut self.variances {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    /// Appends a class with explicit per-rotation means and a variance.
    pub fn add_class(
        &mut self,
        class_id: u32,
        task_id: usize,
        means: &[Vec<f64>],
        variance: &[f64],
    ) -> Result<()> {
        if self.slot_of(class_id).is_some() {
            return Err(Error::DuplicateClass(class_id));
        }
        if let Some(last) = self.slots.last() {
            if task_id < last.task_id {
                return Err(Error::Config(format!(
                    "class {class_id} of task {task_id} added after task {}",
                    last.task_id
                )));
            }
        }
        if means.len() != self.rotations
            || means.iter().any(|m| m.len() != self.dim)
            || variance.len() != self.dim
        {
            return Err(Error::ShapeMismatch {
                expected: format!(
                    "{} means and a variance of dim {}",
                    self.rotations, self.dim
                ),
                found: format!("{} means, variance of dim {}", means.len(), variance.len()),
            });
        }
        if variance.iter().any(|v| *v < 0.0 || !v.is_finite())
            || means.iter().flatten().any(|m| !m.is_finite())
        {
            return Err(Error::Config(format!(
                "invalid parameters for class {class_id}"
            )));
        }
        self.slots.push(ClassSlot { class_id, task_id });
        for m in means {
            self.means.extend_from_slice(m);
        }
        if self.stochastic {
            self.variances.extend_from_slice(variance);
        } else {
            self.variances.extend(std::iter::repeat(0.0).take(self.dim));
        }
        Ok(())
    }

    /// Adds `class_ids` with means drawn from `N(0, 1/d)` and a constant
    /// variance.
    pub fn add_random_classes(
        &mut self,
        rng: &mut Rng,
        task_id: usize,
        class_ids: &[u32],
        variance_init: f64,
    ) -> Result<()> {
        let std = 1.0 / (self.dim as f64).sqrt();
        for &class_id in class_ids {
            let means: Vec<Vec<f64>> = (0..self.rotations)
                .map(|_| (0..self.dim).map(|_| std * rng.normal()).collect())
                .collect();
            self.add_class(class_id, task_id, &means, &vec![variance_init; self.dim])?;
        }
        Ok(())
    }

    /// Initialises a new class from its few-shot features.
    ///
    /// `features[r]` holds the features of the class's training images rotated
    /// by `r` quarter turns. Each rotation's mean is the centroid of those
    /// features. The variance is copied from the task-0 class whose embedding
    /// is most cosine-similar to the new class's; ties go to the lowest class
    /// id. Returns the class the variance came from, if any.
    pub fn init_new_class(
        &mut self,
        class_id: u32,
        task_id: usize,
        features: &[Vec<Vec<f64>>],
        embeddings: &ClassEmbeddingTable,
        fallback: VarianceFallback,
    ) -> Result<Option<u32>> {
        if features.len() != self.rotations {
            return Err(Error::ShapeMismatch {
                expected: format!("features for {} rotations", self.rotations),
                found: format!("{}", features.len()),
            });
        }
        let mut means = Vec::with_capacity(self.rotations);
        for per_rotation in features {
            if per_rotation.is_empty() {
                return Err(Error::EmptyClass(class_id));
            }
            let mut centroid = vec![0.0; self.dim];
            for f in per_rotation {
                if f.len() != self.dim {
                    return Err(Error::ShapeMismatch {
                        expected: format!("feature of dim {}", self.dim),
                        found: format!("dim {}", f.len()),
                    });
                }
                centroid.iter_mut().zip(f).for_each(|(c, x)| *c += x);
            }
            let n = per_rotation.len() as f64;
            centroid.iter_mut().for_each(|c| *c /= n);
            means.push(centroid);
        }

        let (variance, source) = match self.most_similar_base_class(class_id, embeddings) {
            Ok(slot) => (
                self.variance(slot).to_vec(),
                Some(self.slots[slot].class_id),
            ),
            Err(e @ Error::MissingEmbedding(_)) => match fallback {
                VarianceFallback::Error => return Err(e),
                VarianceFallback::BaseMean => (self.mean_base_variance(), None),
            },
            Err(e) => return Err(e),
        };
        self.add_class(class_id, task_id, &means, &variance)?;
        Ok(source)
    }

    fn base_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.task_id == 0)
            .map(|(i, _)| i)
    }

    fn most_similar_base_class(
        &self,
        class_id: u32,
        embeddings: &ClassEmbeddingTable,
    ) -> Result<usize> {
        let mut best: Option<(usize, u32, f64)> = None;
        for slot in self.base_slots() {
            let base_id = self.slots[slot].class_id;
            let sim = embeddings.similarity(class_id, base_id)?;
            let better = match best {
                None => true,
                Some((_, id, s)) => sim > s || (sim == s && base_id < id),
            };
            if better {
                best = Some((slot, base_id, sim));
            }
        }
        best.map(|(slot, _, _)| slot)
            .ok_or_else(|| Error::Config("no base classes to copy a variance from".into()))
    }

    fn mean_base_variance(&self) -> Vec<f64> {
        let slots: Vec<usize> = self.base_slots().collect();
        let mut out = vec![0.0; self.dim];
        for &s in &slots {
            out.iter_mut()
                .zip(self.variance(s))
                .for_each(|(o, v)| *o += v);
        }
        if !slots.is_empty() {
            out.iter_mut().for_each(|o| *o /= slots.len() as f64);
        }
        out
    }

    /// Fresh noise for every `(class, rotation)` head. Deterministic banks
    /// draw nothing and get all-zero noise.
    pub fn draw_noise(&self, rng: &mut Rng) -> Vec<f64> {
        if !self.stochastic {
            return vec![0.0; self.means.len()];
        }
        numerics::sample_gaussian(rng, self.means.len())
    }

    /// `μ̂ = μ + ε ⊙ σ` for a given noise tensor.
    pub fn sample_with(&self, noise: Vec<f64>) -> Result<SampledWeights> {
        if noise.len() != self.means.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("noise of length {}", self.means.len()),
                found: format!("{}", noise.len()),
            });
        }
        let d = self.dim;
        let weights = self
            .means
            .iter()
            .zip(&noise)
            .enumerate()
            .map(|(k, (m, e))| {
                let slot = k / (self.rotations * d);
                m + e * self.variances[slot * d + k % d]
            })
            .collect();
        Ok(SampledWeights { weights, noise })
    }

    pub fn sample(&self, rng: &mut Rng) -> SampledWeights {
        let noise = self.draw_noise(rng);
        self.sample_with(noise).expect("noise drawn to shape")
    }

    /// The means themselves, as a zero-noise draw.
    pub fn mean_weights(&self) -> SampledWeights {
        SampledWeights {
            weights: self.means.clone(),
            noise: vec![0.0; self.means.len()],
        }
    }

    /// `η · cos(w_h, feature)` for every head `h` in flat order.
    pub fn logits(&self, weights: &SampledWeights, feature: &[f64]) -> Result<Vec<f64>> {
        logits(self.eta, self.dim, &weights.weights, feature)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(HEAD_MAGIC);
        w.u16(HEAD_VERSION);
        w.u16(self.rotations as u16);
        w.u32(self.dim as u32);
        w.f64(self.eta);
        w.u8(self.stochastic as u8);
        w.u32(self.slots.len() as u32);
        for (i, s) in self.slots.iter().enumerate() {
            w.u32(s.class_id);
            w.u16(s.task_id as u16);
            for r in 0..self.rotations {
                w.f64s(self.mean(i, r));
            }
            w.f64s(self.variance(i));
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(HEAD_MAGIC)?;
        let version = r.u16()?;
        if version != HEAD_VERSION {
            return r.fail(format!("unsupported version {version}"));
        }
        let rotations = r.u16()? as usize;
        let dim = r.u32()? as usize;
        let eta = r.f64()?;
        let stochastic = match r.u8()? {
            0 => false,
            1 => true,
            other => return r.fail(format!("bad stochastic flag {other}")),
        };
        let at = r.offset();
        let as_format = |e: Error, offset: u64| Error::Format {
            offset,
            reason: e.to_string(),
        };
        let mut head = Self::new(dim, rotations, eta, stochastic).map_err(|e| as_format(e, at))?;
        let count = r.u32()?;
        for _ in 0..count {
            let at = r.offset();
            let class_id = r.u32()?;
            let task_id = r.u16()? as usize;
            let means = (0..rotations)
                .map(|_| r.f64s(dim))
                .collect::<Result<Vec<_>>>()?;
            let variance = r.f64s(dim)?;
            head.add_class(class_id, task_id, &means, &variance)
                .map_err(|e| as_format(e, at))?;
        }
        r.finish()?;
        Ok(head)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

pub const HEAD_MAGIC: &[u8; 4] = b"S3CH";
pub const HEAD_VERSION: u16 = 1;

/// `η · cos(wₕ, feature)` for consecutive `dim`-sized rows `wₕ` of `weights`.
pub fn logits(eta: f64, dim: usize, weights: &[f64], feature: &[f64]) -> Result<Vec<f64>> {
    if feature.len() != dim {
        return Err(NumericsError::DimMismatch {
            left: dim,
            right: feature.len(),
        }
        .into());
    }
    let unit = numerics::l2_normalize(feature)?;
    weights
        .chunks_exact(dim)
        .map(|w| {
            let n = numerics::checked_norm(w)?;
            Ok(eta * (numerics::dot(w, &unit) / n).clamp(-1.0, 1.0))
        })
        .collect()
}
