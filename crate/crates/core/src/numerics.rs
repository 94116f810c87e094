//! Vector primitives, seeded Gaussian sampling and a central-difference
//! gradient oracle.
//!
//! Every real number in the crate is an `f64`. Vectors are plain slices and
//! `Vec<f64>`; the functions here never return NaN or infinite values for
//! finite inputs.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::NumericsError;

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Returns `v / ||v||₂`.
/// The norm of `v`, refusing vectors that are (nearly) zero or not finite.
pub fn checked_norm(v: &[f64]) -> Result<f64, NumericsError> {
    let n = norm(v);
    if !n.is_finite() {
        Err(NumericsError::NonFinite)
    } else if n < ZERO_NORM {
        Err(NumericsError::ZeroVector)
    } else {
        Ok(n)
    }
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, NumericsError> {
    let n = checked_norm(v)?;
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine similarity, clamped into `[-1, 1]` against rounding.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, NumericsError> {
    if u.len() != v.len() {
        return Err(NumericsError::DimMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let (nu, nv) = (checked_norm(u)?, checked_norm(v)?);
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Max-subtracted softmax. An empty input yields an empty output.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log Σ exp(logits)` computed stably.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

/// Index of the first maximal entry.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Deterministic random source.
///
/// Uniform words come from ChaCha8 (`rand_chacha`) seeded with
/// `ChaCha8Rng::seed_from_u64(seed)`. Uniform reals are the top 53 bits of a
/// word scaled by 2⁻⁵³. Standard normals use the Box–Muller transform
/// `sqrt(-2 ln u₁)·cos(2π u₂)` and `sqrt(-2 ln u₁)·sin(2π u₂)` with
/// `u₁ ∈ (0, 1]`, emitting the cosine branch first and caching the sine
/// branch for the next call.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A generator with the same seed on an independent ChaCha stream.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng {
            seed: self.seed,
            inner,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "empty range");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// Fisher–Yates from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// `dim` i.i.d. standard normal draws.
pub fn sample_gaussian(rng: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.normal()).collect()
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero pairs from
/// exploding the ratio.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
