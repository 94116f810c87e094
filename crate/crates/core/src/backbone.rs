//! The feature extractor: a stack of dense layers with exact backward passes.
//!
//! The default architecture flattens the image, applies a 64-unit tanh layer
//! and projects linearly to a 32-dimensional feature. Weights are row-major
//! `out × in` and initialised from `N(0, 1/fan_in)` with zero biases.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::binio::{Reader, Writer};
use crate::data::ImageGrid;
use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_FEATURE_DIM: usize = 32;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn random(rng: &mut Rng, in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        Self {
            in_dim,
            out_dim,
            weights: (0..in_dim * out_dim).map(|_| std * rng.normal()).collect(),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| {
                let z: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b;
                self.activation.apply(z)
            })
            .collect()
    }
}

/// Flattened input geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputShape {
    pub channels: usize,
    pub size: usize,
}

impl InputShape {
    pub fn len(&self) -> usize {
        self.channels * self.size * self.size
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    input: InputShape,
    layers: Vec<Dense>,
    frozen: bool,
    version: u64,
}

impl PartialEq for FeatureExtractor {
    fn eq(&self, other: &Self) -> bool {
        self.input == other.input && self.layers == other.layers && self.frozen == other.frozen
    }
}

/// Activations recorded by [`FeatureExtractor::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    input: Vec<f64>,
    outputs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients shaped like the extractor's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneGradients {
    pub layers: Vec<LayerGradients>,
}

impl BackboneGradients {
    pub fn zeros_like(fe: &FeatureExtractor) -> Self {
        Self {
            layers: fe
                .layers
                .iter()
                .map(|l| LayerGradients {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &BackboneGradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights
                .iter_mut()
                .zip(&b.weights)
                .for_each(|(x, y)| *x += scale * y);
            a.bias
                .iter_mut()
                .zip(&b.bias)
                .for_each(|(x, y)| *x += scale * y);
        }
    }

    /// Same order as [`FeatureExtractor::params`].
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }
}

impl FeatureExtractor {
    pub fn from_layers(input: InputShape, layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("extractor needs at least one layer".into()));
        }
        let mut width = input.len();
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim != width
                || l.weights.len() != l.in_dim * l.out_dim
                || l.bias.len() != l.out_dim
            {
                return Err(Error::ShapeMismatch {
                    expected: format!("layer {i} taking {width} inputs"),
                    found: format!(
                        "{}x{} weights, {} biases",
                        l.out_dim,
                        l.in_dim,
                        l.bias.len()
                    ),
                });
            }
            width = l.out_dim;
        }
        if width < 2 {
            return Err(Error::Config("feature dimension must be at least 2".into()));
        }
        Ok(Self {
            input,
            layers,
            frozen: false,
            version: next_version(),
        })
    }

    /// Random dense stack; `widths` lists `(units, activation)` per layer.
    pub fn random(
        rng: &mut Rng,
        input: InputShape,
        widths: &[(usize, Activation)],
    ) -> Result<Self> {
        let mut in_dim = input.len();
        let mut layers = Vec::with_capacity(widths.len());
        for &(out, act) in widths {
            layers.push(Dense::random(rng, in_dim, out, act));
            in_dim = out;
        }
        Self::from_layers(input, layers)
    }

    /// flatten → `hidden` tanh → `feature_dim` linear.
    pub fn mlp(
        rng: &mut Rng,
        input: InputShape,
        hidden: usize,
        feature_dim: usize,
    ) -> Result<Self> {
        Self::random(
            rng,
            input,
            &[
                (hidden, Activation::Tanh),
                (feature_dim, Activation::Identity),
            ],
        )
    }

    pub fn input_shape(&self) -> InputShape {
        self.input
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    fn check_image(&self, img: &ImageGrid) -> Result<()> {
        if img.channels() != self.input.channels || img.height() != self.input.size {
            return Err(Error::ShapeMismatch {
                expected: format!(
                    "{}x{}x{}",
                    self.input.channels, self.input.size, self.input.size
                ),
                found: format!("{}x{}x{}", img.channels(), img.height(), img.width()),
            });
        }
        Ok(())
    }

    /// Feature of `img` plus the activations needed by [`Self::backward`].
    pub fn forward(&self, img: &ImageGrid) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_image(img)?;
        let input = img.to_f64();
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x = outputs.last().unwrap_or(&input);
            outputs.push(layer.forward(x));
        }
        let feature = outputs.last().cloned().unwrap_or_default();
        Ok((
            feature,
            ForwardCache {
                version: self.version,
                input,
                outputs,
            },
        ))
    }

    pub fn features(&self, img: &ImageGrid) -> Result<Vec<f64>> {
        self.forward(img).map(|(f, _)| f)
    }

    /// Gradients of a scalar loss w.r.t. every parameter, given the loss
    /// gradient w.r.t. the feature produced by the cached forward pass.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_feature: &[f64],
    ) -> Result<BackboneGradients> {
        if cache.version != self.version || cache.outputs.len() != self.layers.len() {
            return Err(Error::StaleCache);
        }
        if grad_feature.len() != self.feature_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("feature gradient of length {}", self.feature_dim()),
                found: format!("length {}", grad_feature.len()),
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = grad_feature.to_vec();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let out = &cache.outputs[idx];
            let x = if idx == 0 {
                &cache.input
            } else {
                &cache.outputs[idx - 1]
            };
            let delta: Vec<f64> = upstream
                .iter()
                .zip(out)
                .map(|(g, &y)| g * layer.activation.derivative_from_output(y))
                .collect();
            let mut weights = Vec::with_capacity(layer.weights.len());
            for &d in &delta {
                weights.extend(x.iter().map(|xi| d * xi));
            }
            let mut down = vec![0.0; layer.in_dim];
            for (row, &d) in layer.weights.chunks_exact(layer.in_dim).zip(&delta) {
                for (acc, w) in down.iter_mut().zip(row) {
                    *acc += w * d;
                }
            }
            grads.push(LayerGradients {
                weights,
                bias: delta,
            });
            upstream = down;
        }
        grads.reverse();
        Ok(BackboneGradients { layers: grads })
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    /// Replaces every parameter. Fails on a frozen extractor.
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        if params.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", self.param_count()),
                found: format!("{}", params.len()),
            });
        }
        let mut rest = params;
        for l in &mut self.layers {
            let (w, tail) = rest.split_at(l.weights.len());
            let (b, tail) = tail.split_at(l.bias.len());
            l.weights.copy_from_slice(w);
            l.bias.copy_from_slice(b);
            rest = tail;
        }
        self.version = next_version();
        Ok(())
    }

    fn encode_params(&self, w: &mut Writer) {
        w.u16(self.input.channels as u16);
        w.u16(self.input.size as u16);
        w.u32(self.layers.len() as u32);
        for l in &self.layers {
            w.u32(l.in_dim as u32);
            w.u32(l.out_dim as u32);
            w.u8(l.activation.tag());
            w.f64s(&l.weights);
            w.f64s(&l.bias);
        }
    }

    /// First eight bytes (little-endian) of the SHA-256 of the serialized
    /// shapes and parameters. The frozen flag is not part of it.
    pub fn fingerprint(&self) -> u64 {
        let mut w = Writer::default();
        self.encode_params(&mut w);
        let digest = Sha256::digest(&w.buf);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.u8(self.frozen as u8);
        self.encode_params(&mut w);
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return r.fail(format!("unsupported version {version}"));
        }
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            other => return r.fail(format!("bad frozen flag {other}")),
        };
        let input = InputShape {
            channels: r.u16()? as usize,
            size: r.u16()? as usize,
        };
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let in_dim = r.u32()? as usize;
            let out_dim = r.u32()? as usize;
            let activation = match Activation::from_tag(r.u8()?) {
                Some(a) => a,
                None => return r.fail("unknown activation tag"),
            };
            let weights = r.f64s(in_dim * out_dim)?;
            let bias = r.f64s(out_dim)?;
            layers.push(Dense {
                in_dim,
                out_dim,
                weights,
                bias,
                activation,
            });
        }
        r.finish()?;
        let at = r.offset();
        let mut fe = Self::from_layers(input, layers).map_err(|e| Error::Format {
            offset: at,
            reason: e.to_string(),
        })?;
        fe.frozen = frozen;
        Ok(fe)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"S3CB";
pub const CHECKPOINT_VERSION: u16 = 1;

/// A fixed Gaussian projection to `feature_dim`, frozen from the start.
pub fn make_random_projection(
    seed: u64,
    input: InputShape,
    feature_dim: usize,
) -> Result<FeatureExtractor> {
    if feature_dim < 2 {
        return Err(Error::Config("feature dimension must be at least 2".into()));
    }
    let mut fe = FeatureExtractor::random(
        &mut Rng::new(seed),
        input,
        &[(feature_dim, Activation::Identity)],
    )?;
    fe.freeze();
    Ok(fe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};

    fn image(rng: &mut Rng, c: usize, n: usize) -> ImageGrid {
        ImageGrid::new(
            c,
            n,
            n,
            (0..c * n * n).map(|_| rng.uniform() as f32).collect(),
        )
        .unwrap()
    }

    fn shape(c: usize, n: usize) -> InputShape {
        InputShape {
            channels: c,
            size: n,
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut weights = vec![0.0; 16];
        for i in 0..4 {
            weights[i * 4 + i] = 1.0;
        }
        let fe = FeatureExtractor::from_layers(
            shape(1, 2),
            vec![Dense {
                in_dim: 4,
                out_dim: 4,
                weights,
                bias: vec![0.0; 4],
                activation: Activation::Identity,
            }],
        )
        .unwrap();
        let img = ImageGrid::new(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(fe.features(&img).unwrap(), img.to_f64());
    }

    #[test]
    fn zero_weights_give_zero_feature() {
        let fe = FeatureExtractor::from_layers(
            shape(1, 2),
            vec![Dense {
                in_dim: 4,
                out_dim: 3,
                weights: vec![0.0; 12],
                bias: vec![0.0; 3],
                activation: Activation::Tanh,
            }],
        )
        .unwrap();
        let img = image(&mut Rng::new(0), 1, 2);
        assert_eq!(fe.features(&img).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn forward_is_deterministic() {
        let a = FeatureExtractor::mlp(&mut Rng::new(4), shape(1, 4), 8, 3).unwrap();
        let b = FeatureExtractor::mlp(&mut Rng::new(4), shape(1, 4), 8, 3).unwrap();
        let img = image(&mut Rng::new(1), 1, 4);
        assert_eq!(a.features(&img).unwrap(), b.features(&img).unwrap());
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn shape_mismatch() {
        let fe = FeatureExtractor::mlp(&mut Rng::new(4), shape(1, 4), 8, 3).unwrap();
        let img = image(&mut Rng::new(1), 1, 3);
        assert!(matches!(fe.forward(&img), Err(Error::ShapeMismatch { .. })));
        let (_, cache) = fe.forward(&image(&mut Rng::new(1), 1, 4)).unwrap();
        assert!(fe.backward(&cache, &[1.0]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let fe = FeatureExtractor::mlp(&mut Rng::new(2), shape(1, 3), 5, 4).unwrap();
        let (_, cache) = fe.forward(&image(&mut Rng::new(3), 1, 3)).unwrap();
        let g = fe.backward(&cache, &[0.0; 4]).unwrap();
        assert!(g.flat().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let fe =
            FeatureExtractor::random(&mut Rng::new(2), shape(1, 2), &[(3, Activation::Identity)])
                .unwrap();
        let img = image(&mut Rng::new(3), 1, 2);
        let (_, cache) = fe.forward(&img).unwrap();
        let upstream = [0.5, -1.0, 2.0];
        let g = fe.backward(&cache, &upstream).unwrap();
        let x = img.to_f64();
        for (o, u) in upstream.iter().enumerate() {
            for (i, xi) in x.iter().enumerate() {
                assert_eq!(g.layers[0].weights[o * 4 + i], u * xi);
            }
        }
        assert_eq!(g.layers[0].bias, upstream.to_vec());
    }

    #[test]
    fn stale_cache_detected() {
        let mut fe = FeatureExtractor::mlp(&mut Rng::new(2), shape(1, 3), 5, 4).unwrap();
        let (_, cache) = fe.forward(&image(&mut Rng::new(3), 1, 3)).unwrap();
        let p = fe.params();
        fe.set_params(&p).unwrap();
        assert!(matches!(
            fe.backward(&cache, &[1.0; 4]),
            Err(Error::StaleCache)
        ));
        let other = FeatureExtractor::mlp(&mut Rng::new(2), shape(1, 3), 5, 4).unwrap();
        let (_, cache) = other.forward(&image(&mut Rng::new(3), 1, 3)).unwrap();
        assert!(matches!(
            fe.backward(&cache, &[1.0; 4]),
            Err(Error::StaleCache)
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = Rng::new(100 + seed);
            let fe = FeatureExtractor::mlp(&mut rng, shape(1, 3), 6, 4).unwrap();
            let img = image(&mut rng, 1, 3);
            let upstream: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let (_, cache) = fe.forward(&img).unwrap();
            let analytic = fe.backward(&cache, &upstream).unwrap().flat();
            let loss = |p: &[f64]| {
                let mut probe = fe.clone();
                probe.set_params(p).unwrap();
                let f = probe.features(&img).unwrap();
                f.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
            };
            let numeric = finite_diff_grad(loss, &fe.params(), 1e-5);
            for (a, n) in analytic.iter().zip(&numeric) {
                let err = relative_error(*a, *n, 1e-6);
                assert!(err <= 1e-4, "seed {seed}: analytic {a} numeric {n}");
            }
        }
    }

    #[test]
    fn random_projection_is_frozen_and_stable() {
        let a = make_random_projection(9, shape(1, 4), 5).unwrap();
        let b = make_random_projection(9, shape(1, 4), 5).unwrap();
        assert_eq!(a, b);
        assert!(a.is_frozen());
        assert_eq!(a.feature_dim(), 5);
        let img = image(&mut Rng::new(1), 1, 4);
        assert_eq!(a.features(&img).unwrap().len(), 5);
        let mut c = a.clone();
        assert!(matches!(c.set_params(&a.params()), Err(Error::Frozen)));
        assert_eq!(c, a);
        assert!(make_random_projection(9, shape(1, 4), 1).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut fe = FeatureExtractor::mlp(&mut Rng::new(6), shape(2, 3), 7, 4).unwrap();
        fe.freeze();
        let bytes = fe.encode();
        let back = FeatureExtractor::decode(&bytes).unwrap();
        assert_eq!(back, fe);
        assert_eq!(back.params(), fe.params());
        assert_eq!(back.fingerprint(), fe.fingerprint());
        assert!(FeatureExtractor::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[1] = 0;
        assert!(matches!(
            FeatureExtractor::decode(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn fingerprint_ignores_freeze_but_tracks_params() {
        let mut fe = FeatureExtractor::mlp(&mut Rng::new(6), shape(1, 3), 7, 4).unwrap();
        let before = fe.fingerprint();
        let mut p = fe.params();
        p[0] += 1e-9;
        fe.set_params(&p).unwrap();
        assert_ne!(fe.fingerprint(), before);
        let f = fe.fingerprint();
        fe.freeze();
        assert_eq!(fe.fingerprint(), f);
    }
}
