//! Desk-scale stand-in for a natural-image benchmark.
//!
//! Each class is a Gaussian blob in a small latent space. A sample's latent
//! code weights a fixed bank of off-center Gaussian bumps; a class-independent
//! orientation cue (a vertical brightness ramp plus a corner spot) is added
//! and the result is squashed through a logistic into `[0, 1]`. The cue makes
//! the four rotations of any image distinguishable, and the bump bank makes
//! the class content move with the rotation.

use super::{ClassEmbeddingTable, Dataset, ImageGrid, Sample};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    pub channels: usize,
    pub latent_dim: usize,
    /// Within-class standard deviation of latent codes; class means are
    /// standard normal.
    pub noise: f64,
    /// Amplitude of the orientation cue.
    pub cue: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            train_per_class: 50,
            test_per_class: 20,
            size: 16,
            channels: 1,
            latent_dim: 12,
            noise: 0.6,
            cue: 1.0,
        }
    }
}

struct Bump {
    row: f64,
    col: f64,
    inv_two_var: f64,
}

impl Bump {
    fn at(&self, i: usize, j: usize) -> f64 {
        let (di, dj) = (i as f64 - self.row, j as f64 - self.col);
        (-(di * di + dj * dj) * self.inv_two_var).exp()
    }
}

/// Generates `classes × (train + test)` samples, deterministic per seed.
///
/// The embedding of each class is its latent mean.
pub fn generate_synthetic(cfg: &GeneratorConfig, rng: &mut Rng) -> Result<Dataset> {
    if cfg.classes < 2 || cfg.train_per_class == 0 {
        return Err(Error::Config(
            "need at least 2 classes and 1 training sample per class".into(),
        ));
    }
    if cfg.size < 2 || cfg.channels == 0 || cfg.latent_dim == 0 {
        return Err(Error::Config(
            "size >= 2, channels >= 1, latent_dim >= 1".into(),
        ));
    }
    let n = cfg.size as f64;

    let bumps: Vec<Vec<Bump>> = (0..cfg.channels)
        .map(|_| {
            (0..cfg.latent_dim)
                .map(|_| {
                    let width = n * (0.08 + 0.12 * rng.uniform());
                    Bump {
                        row: n * (0.1 + 0.8 * rng.uniform()),
                        col: n * (0.1 + 0.8 * rng.uniform()),
                        inv_two_var: 1.0 / (2.0 * width * width),
                    }
                })
                .collect()
        })
        .collect();
    let means: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..cfg.latent_dim).map(|_| rng.normal()).collect())
        .collect();

    let render = |latent: &[f64]| -> Result<ImageGrid> {
        let mut pixels = Vec::with_capacity(cfg.channels * cfg.size * cfg.size);
        for bank in &bumps {
            for i in 0..cfg.size {
                for j in 0..cfg.size {
                    let content: f64 = bank.iter().zip(latent).map(|(b, z)| z * b.at(i, j)).sum();
                    let ramp = 1.0 - 2.0 * i as f64 / (n - 1.0);
                    let spot = if i < cfg.size / 4 && j < cfg.size / 4 {
                        1.0
                    } else {
                        0.0
                    };
                    let v = 1.5 * content + cfg.cue * (ramp + spot);
                    pixels.push((1.0 / (1.0 + (-v).exp())) as f32);
                }
            }
        }
        ImageGrid::new(cfg.channels, cfg.size, cfg.size, pixels)
    };

    let mut train = Vec::with_capacity(cfg.classes * cfg.train_per_class);
    let mut test = Vec::with_capacity(cfg.classes * cfg.test_per_class);
    for (class, mean) in means.iter().enumerate() {
        for k in 0..cfg.train_per_class + cfg.test_per_class {
            let latent: Vec<f64> = mean.iter().map(|m| m + cfg.noise * rng.normal()).collect();
            let sample = Sample {
                class_id: class as u32,
                image: render(&latent)?,
            };
            if k < cfg.train_per_class {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }

    let embeddings = ClassEmbeddingTable::new(
        cfg.latent_dim,
        means
            .iter()
            .map(|m| m.iter().map(|&x| x as f32).collect())
            .collect(),
    )?;
    Ok(Dataset {
        channels: cfg.channels,
        size: cfg.size,
        class_count: cfg.classes,
        embeddings,
        train,
        test,
    })
}
