//! Joint class×rotation softmax losses and their exact gradients.
//!
//! Every loss here is a cross-entropy over *all* heads of the bank: every
//! rotation of every class of every task seen so far competes in the
//! denominator. For a head weight `w`, a feature `f` and `c = cos(w, f)`:
//!
//! ```text
//! ∂c/∂w = (f̄ − c·w̄) / ‖w‖        ∂c/∂f = (w̄ − c·f̄) / ‖f‖
//! ```
//!
//! and the softmax cross-entropy gives `∂L/∂aₕ = pₕ − 1[h = target]` for the
//! logits `aₕ = η·cₕ`. Gradients w.r.t. sampled weights pass unchanged to the
//! means and, multiplied by the noise that produced them, to the shared class
//! variance (`μ̂ = μ + ε ⊙ σ`).
//!
//! Batch losses are means over their elements. Probabilities are floored at
//! [`PROB_FLOOR`] before the logarithm; a floored term contributes no
//! gradient.

use crate::backbone::{BackboneGradients, FeatureExtractor};
use crate::data::LabeledSample;
use crate::error::{Error, NumericsError, Result};
use crate::head::{SampledWeights, StochasticHead};
use crate::numerics;

pub const PROB_FLOOR: f64 = 1e-30;
pub const DEFAULT_LAMBDA_PROTO: f64 = 5.0;
pub const DEFAULT_LAMBDA_S3C: f64 = 1.0;

/// Which head parameters may receive gradient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradientMask {
    /// One flag per head, flat order.
    pub means: Vec<bool>,
    /// One flag per class slot.
    pub variances: Vec<bool>,
}

impl GradientMask {
    pub fn all(head: &StochasticHead) -> Self {
        Self {
            means: vec![true; head.head_count()],
            variances: vec![true; head.class_count()],
        }
    }

    /// Incremental fine-tuning of `task`: classes of earlier tasks may only
    /// move their 0° mean; classes of `task` are fully trainable.
    pub fn incremental(head: &StochasticHead, task: usize) -> Self {
        let m = head.rotations();
        let mut means = Vec::with_capacity(head.head_count());
        let mut variances = Vec::with_capacity(head.class_count());
        for slot in head.slots() {
            let new = slot.task_id >= task;
            means.extend((0..m).map(|r| new || r == 0));
            variances.push(new);
        }
        Self { means, variances }
    }

    /// Zeroes masked gradient coordinates in place.
    pub fn apply(&self, dim: usize, grad_means: &mut [f64], grad_variances: &mut [f64]) {
        for (chunk, &keep) in grad_means.chunks_exact_mut(dim).zip(&self.means) {
            if !keep {
                chunk.iter_mut().for_each(|g| *g = 0.0);
            }
        }
        for (chunk, &keep) in grad_variances.chunks_exact_mut(dim).zip(&self.variances) {
            if !keep {
                chunk.iter_mut().for_each(|g| *g = 0.0);
            }
        }
    }
}

/// A scalar loss with gradients for the head and, where requested, for the
/// features or backbone that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub grad_means: Vec<f64>,
    pub grad_variances: Vec<f64>,
    /// `[sample][rotation]` feature gradients.
    pub grad_features: Option<Vec<Vec<Vec<f64>>>>,
    pub grad_backbone: Option<BackboneGradients>,
}

impl LossValue {
    fn zeros(head: &StochasticHead) -> Self {
        Self {
            loss: 0.0,
            grad_means: vec![0.0; head.means().len()],
            grad_variances: vec![0.0; head.variances().len()],
            grad_features: None,
            grad_backbone: None,
        }
    }
}

/// Features of one training image under each of the `M` rotations.
#[derive(Debug, Clone, PartialEq)]
pub struct RotatedFeatures {
    pub class_id: u32,
    /// `features[r]` comes from the image rotated by `r` quarter turns.
    pub features: Vec<Vec<f64>>,
}

/// Per-head geometry of one feature against one draw of the bank.
struct HeadGeometry {
    unit_feature: Vec<f64>,
    feature_norm: f64,
    cosines: Vec<f64>,
    weight_norms: Vec<f64>,
    logits: Vec<f64>,
}

fn geometry(head: &StochasticHead, weights: &[f64], feature: &[f64]) -> Result<HeadGeometry> {
    let d = head.dim();
    if feature.len() != d {
        return Err(NumericsError::DimMismatch {
            left: d,
            right: feature.len(),
        }
        .into());
    }
    let feature_norm = numerics::checked_norm(feature)?;
    let unit_feature: Vec<f64> = feature.iter().map(|x| x / feature_norm).collect();
    let mut cosines = Vec::with_capacity(head.head_count());
    let mut weight_norms = Vec::with_capacity(head.head_count());
    for w in weights.chunks_exact(d) {
        let n = numerics::checked_norm(w)?;
        weight_norms.push(n);
        cosines.push(numerics::dot(w, &unit_feature) / n);
    }
    let logits = cosines.iter().map(|c| head.eta() * c).collect();
    Ok(HeadGeometry {
        unit_feature,
        feature_norm,
        cosines,
        weight_norms,
        logits,
    })
}

/// Softmax probability of `target` among all heads for `vector`.
pub fn joint_softmax(
    head: &StochasticHead,
    sampled: &SampledWeights,
    vector: &[f64],
    target: usize,
) -> Result<f64> {
    let g = geometry(head, &sampled.weights, vector)?;
    let lse = numerics::log_sum_exp(&g.logits);
    Ok((g.logits[target] - lse).exp())
}

fn target_head(head: &StochasticHead, class_id: u32, rotation: usize) -> Result<usize> {
    let slot = head
        .slot_of(class_id)
        .ok_or(Error::UnknownClass(class_id))?;
    if rotation >= head.rotations() {
        return Err(Error::Config(format!(
            "rotation {rotation} out of range for {} rotations",
            head.rotations()
        )));
    }
    Ok(head.head_index(slot, rotation))
}

/// Joint class×rotation softmax ρ of a feature for `(class_id, rotation)`.
pub fn joint_softmax_rho(
    head: &StochasticHead,
    sampled: &SampledWeights,
    feature: &[f64],
    class_id: u32,
    rotation: usize,
) -> Result<f64> {
    joint_softmax(
        head,
        sampled,
        feature,
        target_head(head, class_id, rotation)?,
    )
}

/// Joint softmax ζ of a prototype for the 0° head of `class_id`.
pub fn proto_softmax_zeta(
    head: &StochasticHead,
    sampled: &SampledWeights,
    prototype: &[f64],
    class_id: u32,
) -> Result<f64> {
    joint_softmax(head, sampled, prototype, target_head(head, class_id, 0)?)
}

/// Adds `scale · (−log p_target)` for one vector and its gradients into
/// `grad_weights`; returns the loss term and, if asked, `∂/∂vector`.
fn cross_entropy_term(
    head: &StochasticHead,
    weights: &[f64],
    vector: &[f64],
    target: usize,
    scale: f64,
    grad_weights: &mut [f64],
    want_vector_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let d = head.dim();
    let eta = head.eta();
    let g = geometry(head, weights, vector)?;
    let lse = numerics::log_sum_exp(&g.logits);
    let log_p = g.logits[target] - lse;
    if log_p < PROB_FLOOR.ln() {
        let zero = want_vector_grad.then(|| vec![0.0; d]);
        return Ok((-scale * PROB_FLOOR.ln(), zero));
    }
    let mut grad_vec = want_vector_grad.then(|| vec![0.0; d]);
    for (h, w) in weights.chunks_exact(d).enumerate() {
        let p = (g.logits[h] - lse).exp();
        let dlogit = p - if h == target { 1.0 } else { 0.0 };
        if dlogit == 0.0 {
            continue;
        }
        let coeff = scale * eta * dlogit;
        let (c, n) = (g.cosines[h], g.weight_norms[h]);
        let gw = &mut grad_weights[h * d..(h + 1) * d];
        for k in 0..d {
            let w_unit = w[k] / n;
            gw[k] += coeff * (g.unit_feature[k] - c * w_unit) / n;
        }
        if let Some(gv) = grad_vec.as_mut() {
            for k in 0..d {
                let w_unit = w[k] / n;
                gv[k] += coeff * (w_unit - c * g.unit_feature[k]) / g.feature_norm;
            }
        }
    }
    Ok((-scale * log_p, grad_vec))
}

/// Moves gradients w.r.t. sampled weights onto means and variances, then
/// masks.
fn finish(
    head: &StochasticHead,
    sampled: &SampledWeights,
    grad_weights: Vec<f64>,
    mask: &GradientMask,
    out: &mut LossValue,
) {
    let d = head.dim();
    let m = head.rotations();
    let mut grad_variances = vec![0.0; head.variances().len()];
    if head.is_stochastic() {
        for (k, (gw, eps)) in grad_weights.iter().zip(&sampled.noise).enumerate() {
            let slot = k / (m * d);
            grad_variances[slot * d + k % d] += gw * eps;
        }
    }
    let mut grad_means = grad_weights;
    mask.apply(d, &mut grad_means, &mut grad_variances);
    out.grad_means = grad_means;
    out.grad_variances = grad_variances;
}

fn check_shapes(
    head: &StochasticHead,
    sampled: &SampledWeights,
    mask: &GradientMask,
) -> Result<()> {
    if sampled.weights.len() != head.means().len() || sampled.noise.len() != head.means().len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} sampled weights", head.means().len()),
            found: format!("{}", sampled.weights.len()),
        });
    }
    if mask.means.len() != head.head_count() || mask.variances.len() != head.class_count() {
        return Err(Error::ShapeMismatch {
            expected: format!("mask over {} heads", head.head_count()),
            found: format!("{}", mask.means.len()),
        });
    }
    Ok(())
}

/// Self-supervised stochastic classification loss on precomputed features:
/// `−(1/M) Σᵣ log ρ(class, r | features[r])`, averaged over the batch.
pub fn s3c_loss_on_features(
    head: &StochasticHead,
    sampled: &SampledWeights,
    batch: &[RotatedFeatures],
    mask: &GradientMask,
    want_feature_grads: bool,
) -> Result<LossValue> {
    check_shapes(head, sampled, mask)?;
    let mut out = LossValue::zeros(head);
    let mut grad_weights = vec![0.0; head.means().len()];
    let m = head.rotations();
    let mut feature_grads = Vec::new();
    if !batch.is_empty() {
        let scale = 1.0 / (m * batch.len()) as f64;
        for item in batch {
            if item.features.len() != m {
                return Err(Error::ShapeMismatch {
                    expected: format!("{m} rotated features"),
                    found: format!("{}", item.features.len()),
                });
            }
            let mut per_rotation = Vec::with_capacity(m);
            for (r, f) in item.features.iter().enumerate() {
                let target = target_head(head, item.class_id, r)?;
                let (loss, gf) = cross_entropy_term(
                    head,
                    &sampled.weights,
                    f,
                    target,
                    scale,
                    &mut grad_weights,
                    want_feature_grads,
                )?;
                out.loss += loss;
                if let Some(gf) = gf {
                    per_rotation.push(gf);
                }
            }
            if want_feature_grads {
                feature_grads.push(per_rotation);
            }
        }
    }
    finish(head, sampled, grad_weights, mask, &mut out);
    if want_feature_grads {
        out.grad_features = Some(feature_grads);
    }
    Ok(out)
}

/// The same loss computed from images: each image is rotated `M` times and
/// passed through `extractor`. When the extractor is not frozen the result
/// also carries backbone gradients.
pub fn s3c_loss(
    head: &StochasticHead,
    sampled: &SampledWeights,
    extractor: &FeatureExtractor,
    batch: &[LabeledSample],
    mask: &GradientMask,
) -> Result<LossValue> {
    let m = head.rotations();
    let mut items = Vec::with_capacity(batch.len());
    let mut caches = Vec::with_capacity(batch.len() * m);
    for s in batch {
        let slot = head
            .slot_of(s.class_id)
            .ok_or(Error::UnknownClass(s.class_id))?;
        if head.slots()[slot].task_id != s.task_id {
            return Err(Error::Config(format!(
                "class {} is not in the label space of task {}",
                s.class_id, s.task_id
            )));
        }
        let mut features = Vec::with_capacity(m);
        for r in 0..m {
            let (f, cache) = extractor.forward(&s.image.rotate(r)?)?;
            features.push(f);
            caches.push(cache);
        }
        items.push(RotatedFeatures {
            class_id: s.class_id,
            features,
        });
    }
    let train_backbone = !extractor.is_frozen();
    let mut value = s3c_loss_on_features(head, sampled, &items, mask, train_backbone)?;
    if train_backbone {
        let mut total = BackboneGradients::zeros_like(extractor);
        let grads = value.grad_features.as_ref().expect("requested");
        for (cache, g) in caches.iter().zip(grads.iter().flatten()) {
            total.accumulate(&extractor.backward(cache, g)?, 1.0);
        }
        value.grad_backbone = Some(total);
    }
    Ok(value)
}

/// Prototype rehearsal loss `−log ζ(class, 0° | q)`, averaged over the
/// prototypes.
pub fn proto_loss(
    head: &StochasticHead,
    sampled: &SampledWeights,
    prototypes: &[(u32, Vec<f64>)],
    mask: &GradientMask,
) -> Result<LossValue> {
    check_shapes(head, sampled, mask)?;
    let mut out = LossValue::zeros(head);
    let mut grad_weights = vec![0.0; head.means().len()];
    if !prototypes.is_empty() {
        let scale = 1.0 / prototypes.len() as f64;
        for (class_id, q) in prototypes {
            let target = target_head(head, *class_id, 0)?;
            let (loss, _) = cross_entropy_term(
                head,
                &sampled.weights,
                q,
                target,
                scale,
                &mut grad_weights,
                false,
            )?;
            out.loss += loss;
        }
    }
    finish(head, sampled, grad_weights, mask, &mut out);
    Ok(out)
}

/// `λ_proto · L_proto + λ_s3c · L_S3C` with the matching combination of
/// gradients. Both terms see the same draw of the bank.
pub fn incremental_loss(
    head: &StochasticHead,
    sampled: &SampledWeights,
    new_batch: &[RotatedFeatures],
    prototypes: &[(u32, Vec<f64>)],
    lambda_proto: f64,
    lambda_s3c: f64,
    mask: &GradientMask,
) -> Result<LossValue> {
    if !(lambda_proto >= 0.0 && lambda_s3c >= 0.0) {
        return Err(Error::Config("loss weights must be non-negative".into()));
    }
    let proto = proto_loss(head, sampled, prototypes, mask)?;
    let s3c = s3c_loss_on_features(head, sampled, new_batch, mask, false)?;
    let combine = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(x, y)| lambda_proto * x + lambda_s3c * y)
            .collect()
    };
    Ok(LossValue {
        loss: lambda_proto * proto.loss + lambda_s3c * s3c.loss,
        grad_means: combine(&proto.grad_means, &s3c.grad_means),
        grad_variances: combine(&proto.grad_variances, &s3c.grad_variances),
        grad_features: None,
        grad_backbone: None,
    })
}
