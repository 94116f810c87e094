//! Base training, incremental fine-tuning and the optimizer.
//!
//! The base session trains the extractor and the task-0 classifiers jointly
//! on the rotation-augmented loss. Each later session freezes the extractor,
//! starts the new classifiers at their few-shot centroids, and fine-tunes
//! the whole bank against the new images plus the stored prototypes. Old
//! classes may only move their 0° means during that fine-tuning.

use std::fmt;
use std::str::FromStr;

use crate::backbone::{FeatureExtractor, InputShape, DEFAULT_FEATURE_DIM, DEFAULT_HIDDEN};
use crate::config::KeyValues;
use crate::data::protocol::SessionPlan;
use crate::data::{ClassEmbeddingTable, Dataset, LabeledSample};
use crate::error::{Error, Result};
use crate::evaluation::{self, MetricsReport};
use crate::head::{StochasticHead, VarianceFallback, DEFAULT_ETA, DEFAULT_VARIANCE_INIT};
use crate::losses::{
    self, GradientMask, RotatedFeatures, DEFAULT_LAMBDA_PROTO, DEFAULT_LAMBDA_S3C,
};
use crate::numerics::Rng;
use crate::prototypes::{compute_task_prototypes, PrototypeStore};

/// Which parts of the method are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    /// Rotation heads and stochastic classifiers.
    #[default]
    S3c,
    /// Rotation heads with deterministic cosine classifiers.
    SelfsupLinear,
    /// A single deterministic cosine classifier per class.
    LinearHead,
    /// Stochastic classifiers without rotation heads.
    NoSelfsup,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Self::S3c,
        Self::SelfsupLinear,
        Self::LinearHead,
        Self::NoSelfsup,
    ];

    pub fn rotations(self) -> usize {
        match self {
            Self::S3c | Self::SelfsupLinear => 4,
            Self::LinearHead | Self::NoSelfsup => 1,
        }
    }

    pub fn stochastic(self) -> bool {
        matches!(self, Self::S3c | Self::NoSelfsup)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::S3c => "s3c",
            Self::SelfsupLinear => "selfsup-linear",
            Self::LinearHead => "linear-head",
            Self::NoSelfsup => "no-selfsup",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_epochs: usize,
    pub base_lr: f64,
    /// Epochs at which the base learning rate is multiplied by `lr_decay`;
    /// `None` means 60% and 80% of `base_epochs`.
    pub base_milestones: Option<Vec<usize>>,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub inc_epochs: usize,
    pub inc_lr: f64,
    pub lambda_proto: f64,
    pub lambda_s3c: f64,
    pub eta: f64,
    pub rotations: usize,
    pub stochastic: bool,
    pub momentum: f64,
    pub variance_init: f64,
    pub variance_fallback: VarianceFallback,
    pub hidden: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_epochs: 60,
            base_lr: 0.01,
            base_milestones: None,
            lr_decay: 0.1,
            batch_size: 32,
            inc_epochs: 100,
            inc_lr: 0.01,
            lambda_proto: DEFAULT_LAMBDA_PROTO,
            lambda_s3c: DEFAULT_LAMBDA_S3C,
            eta: DEFAULT_ETA,
            rotations: 4,
            stochastic: true,
            momentum: 0.9,
            variance_init: DEFAULT_VARIANCE_INIT,
            variance_fallback: VarianceFallback::Error,
            hidden: DEFAULT_HIDDEN,
            feature_dim: DEFAULT_FEATURE_DIM,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "ablation",
        "base_epochs",
        "base_lr",
        "base_milestones",
        "lr_decay",
        "batch_size",
        "inc_epochs",
        "inc_lr",
        "lambda_proto",
        "lambda_s3c",
        "eta",
        "rotations",
        "stochastic",
        "momentum",
        "variance_init",
        "variance_fallback",
        "hidden",
        "feature_dim",
        "seed",
    ];

    /// Sets `rotations` and `stochastic` for an ablation.
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.rotations = ablation.rotations();
        self.stochastic = ablation.stochastic();
        self
    }

    /// Defaults overridden by `kv`. An `ablation` key is applied first, so
    /// explicit `rotations`/`stochastic` keys win over it.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(a) = kv.take::<Ablation>("ablation")? {
            cfg = cfg.with_ablation(a);
        }
        macro_rules! field {
            ($($name:ident),*) => {$(
                if let Some(v) = kv.take(stringify!($name))? {
                    cfg.$name = v;
                }
            )*};
        }
        field!(
            base_epochs,
            base_lr,
            lr_decay,
            batch_size,
            inc_epochs,
            inc_lr,
            lambda_proto,
            lambda_s3c,
            eta,
            rotations,
            stochastic,
            momentum,
            variance_init,
            hidden,
            feature_dim,
            seed
        );
        if let Some(m) = kv.take_list("base_milestones")? {
            cfg.base_milestones = Some(m);
        }
        match kv.get("variance_fallback") {
            None | Some("error") => {}
            Some("base-mean") => cfg.variance_fallback = VarianceFallback::BaseMean,
            Some(other) => {
                return Err(Error::Config(format!(
                    "unknown variance_fallback {other:?}"
                )))
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("base_epochs", self.base_epochs);
        kv.set("base_lr", self.base_lr);
        let ms: Vec<String> = self.milestones().iter().map(usize::to_string).collect();
        kv.set("base_milestones", ms.join(","));
        kv.set("lr_decay", self.lr_decay);
        kv.set("batch_size", self.batch_size);
        kv.set("inc_epochs", self.inc_epochs);
        kv.set("inc_lr", self.inc_lr);
        kv.set("lambda_proto", self.lambda_proto);
        kv.set("lambda_s3c", self.lambda_s3c);
        kv.set("eta", self.eta);
        kv.set("rotations", self.rotations);
        kv.set("stochastic", self.stochastic);
        kv.set("momentum", self.momentum);
        kv.set("variance_init", self.variance_init);
        kv.set(
            "variance_fallback",
            match self.variance_fallback {
                VarianceFallback::Error => "error",
                VarianceFallback::BaseMean => "base-mean",
            },
        );
        kv.set("hidden", self.hidden);
        kv.set("feature_dim", self.feature_dim);
        kv.set("seed", self.seed);
        kv
    }

    pub fn milestones(&self) -> Vec<usize> {
        match &self.base_milestones {
            Some(m) => m.clone(),
            None => {
                let at = |share: f64| (share * self.base_epochs as f64).round() as usize;
                let mut m = vec![at(0.6), at(0.8)];
                m.dedup();
                m
            }
        }
    }

    /// Base learning rate in effect during `epoch`.
    pub fn base_lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones().iter().filter(|&&m| m <= epoch).count();
        self.base_lr * self.lr_decay.powi(passed as i32)
    }

    // `!(x >= 0.0)` also rejects NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.base_lr > 0.0 && self.inc_lr > 0.0 && self.lr_decay > 0.0) {
            return bad("learning rates and decay must be positive");
        }
        if self.milestones().windows(2).any(|w| w[0] >= w[1]) {
            return bad("milestones must be strictly increasing");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lambda_proto >= 0.0 && self.lambda_s3c >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.eta > 0.0) {
            return bad("eta must be positive");
        }
        if !(1..=4).contains(&self.rotations) {
            return bad("rotations must be between 1 and 4");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.variance_init >= 0.0) {
            return bad("variance_init must be non-negative");
        }
        if self.hidden == 0 || self.feature_dim < 2 {
            return bad("hidden must be positive and feature_dim at least 2");
        }
        Ok(())
    }
}

/// One momentum-SGD step on `params`. Coordinates whose `mask` entry is false
/// are left untouched, velocity included.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    mask: Option<&[bool]>,
    lr: f64,
    momentum: f64,
    velocity: &mut [f64],
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || velocity.len() != n || mask.is_some_and(|m| m.len() != n) {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} gradients, velocities and mask entries"),
            found: format!(
                "{}, {}, {}",
                grads.len(),
                velocity.len(),
                mask.map_or(n, <[bool]>::len)
            ),
        });
    }
    for i in 0..n {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        velocity[i] = momentum * velocity[i] + grads[i];
        params[i] -= lr * velocity[i];
    }
    Ok(())
}

fn expand(flags: &[bool], dim: usize) -> Vec<bool> {
    flags
        .iter()
        .flat_map(|&f| std::iter::repeat(f).take(dim))
        .collect()
}

/// Momentum buffers for the classifier bank.
#[derive(Debug, Clone, Default)]
struct HeadOptimizer {
    means: Vec<f64>,
    variances: Vec<f64>,
}

impl HeadOptimizer {
    fn for_head(head: &StochasticHead) -> Self {
        Self {
            means: vec![0.0; head.means().len()],
            variances: vec![0.0; head.variances().len()],
        }
    }

    /// Applies the step, then clamps variances at zero.
    fn step(
        &mut self,
        head: &mut StochasticHead,
        grad_means: &[f64],
        grad_variances: &[f64],
        mask: &GradientMask,
        lr: f64,
        momentum: f64,
    ) -> Result<()> {
        let d = head.dim();
        let mm = expand(&mask.means, d);
        sgd_step(
            head.means_mut(),
            grad_means,
            Some(&mm),
            lr,
            momentum,
            &mut self.means,
        )?;
        if head.is_stochastic() {
            let vm = expand(&mask.variances, d);
            sgd_step(
                head.variances_mut(),
                grad_variances,
                Some(&vm),
                lr,
                momentum,
                &mut self.variances,
            )?;
        }
        head.clamp_variances();
        Ok(())
    }
}

/// Mean training loss of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub session: usize,
    pub epoch: usize,
    pub loss: f64,
}

impl LossRecord {
    pub fn split(&self) -> &'static str {
        if self.session == 0 {
            "base"
        } else {
            "incremental"
        }
    }
}

/// Renders loss records as `session,epoch,split,loss` CSV.
pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("session,epoch,split,loss\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.session,
            r.epoch,
            r.split(),
            r.loss
        ));
    }
    out
}

/// Model state carried across sessions.
#[derive(Debug, Clone)]
pub struct SessionState {
    pub extractor: FeatureExtractor,
    pub head: StochasticHead,
    pub store: PrototypeStore,
    /// Number of completed sessions.
    pub completed: usize,
    pub metrics: MetricsReport,
    pub losses: Vec<LossRecord>,
}

impl SessionState {
    /// A fresh extractor and one randomly initialised classifier per base
    /// class.
    pub fn new(cfg: &TrainConfig, input: InputShape, base_classes: &[u32]) -> Result<Self> {
        cfg.validate()?;
        let root = Rng::new(cfg.seed);
        let extractor =
            FeatureExtractor::mlp(&mut root.fork(1), input, cfg.hidden, cfg.feature_dim)?;
        let mut head =
            StochasticHead::new(cfg.feature_dim, cfg.rotations, cfg.eta, cfg.stochastic)?;
        head.add_random_classes(&mut root.fork(2), 0, base_classes, cfg.variance_init)?;
        Ok(Self {
            extractor,
            head,
            store: PrototypeStore::default(),
            completed: 0,
            metrics: MetricsReport::default(),
            losses: Vec::new(),
        })
    }

    fn rotated(&self, samples: &[LabeledSample]) -> Result<Vec<RotatedFeatures>> {
        samples
            .iter()
            .map(|s| {
                let features = (0..self.head.rotations())
                    .map(|r| self.extractor.features(&s.image.rotate(r)?))
                    .collect::<Result<_>>()?;
                Ok(RotatedFeatures {
                    class_id: s.class_id,
                    features,
                })
            })
            .collect()
    }
}

fn abort(batch: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::TrainingAborted {
        batch,
        source: Box::new(e),
    }
}

/// Trains the extractor and the base classifiers on `data`, stores the base
/// prototypes and freezes the extractor.
pub fn train_base(
    state: &mut SessionState,
    data: &[LabeledSample],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<()> {
    train_base_with(state, data, cfg, rng, |_| {})
}

/// [`train_base`] calling `on_step` after every optimizer step.
pub fn train_base_with(
    state: &mut SessionState,
    data: &[LabeledSample],
    cfg: &TrainConfig,
    rng: &mut Rng,
    mut on_step: impl FnMut(&SessionState),
) -> Result<()> {
    if state.completed != 0 || state.extractor.is_frozen() {
        return Err(Error::Config(
            "base training needs a fresh, unfrozen state".into(),
        ));
    }
    if data.is_empty() {
        return Err(Error::Config("base session has no training data".into()));
    }
    let mask = GradientMask::all(&state.head);
    let mut head_opt = HeadOptimizer::for_head(&state.head);
    let mut backbone_velocity = vec![0.0; state.extractor.param_count()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch_index = 0;
    for epoch in 0..cfg.base_epochs {
        let lr = cfg.base_lr_at(epoch);
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<LabeledSample> = chunk.iter().map(|&i| data[i].clone()).collect();
            let sampled = state.head.sample(rng);
            let value = losses::s3c_loss(&state.head, &sampled, &state.extractor, &batch, &mask)
                .map_err(abort(batch_index))?;
            if !value.loss.is_finite() {
                return Err(abort(batch_index)(Error::Config(format!(
                    "loss became {}",
                    value.loss
                ))));
            }
            head_opt
                .step(
                    &mut state.head,
                    &value.grad_means,
                    &value.grad_variances,
                    &mask,
                    lr,
                    cfg.momentum,
                )
                .map_err(abort(batch_index))?;
            if let Some(g) = &value.grad_backbone {
                let mut params = state.extractor.params();
                sgd_step(
                    &mut params,
                    &g.flat(),
                    None,
                    lr,
                    cfg.momentum,
                    &mut backbone_velocity,
                )
                .and_then(|()| state.extractor.set_params(&params))
                .map_err(abort(batch_index))?;
            }
            total += value.loss * chunk.len() as f64;
            batch_index += 1;
            on_step(state);
        }
        state.losses.push(LossRecord {
            session: 0,
            epoch,
            loss: total / data.len() as f64,
        });
        log::debug!("base epoch {epoch}: loss {:.5}", total / data.len() as f64);
    }
    state.extractor.freeze();
    let base: Vec<u32> = state.head.slots().iter().map(|s| s.class_id).collect();
    let mut store = PrototypeStore::new(state.extractor.fingerprint());
    store.update(compute_task_prototypes(&state.extractor, &base, data)?)?;
    state.store = store;
    state.completed = 1;
    Ok(())
}

/// Adds the classes of `data` as task `task` and fine-tunes every classifier.
/// Returns, per new class, the base class its variance was copied from.
pub fn train_incremental(
    state: &mut SessionState,
    task: usize,
    data: &[LabeledSample],
    cfg: &TrainConfig,
    rng: &mut Rng,
    embeddings: &ClassEmbeddingTable,
) -> Result<Vec<(u32, Option<u32>)>> {
    train_incremental_with(state, task, data, cfg, rng, embeddings, |_| {})
}

/// [`train_incremental`] calling `on_step` after every optimizer step.
pub fn train_incremental_with(
    state: &mut SessionState,
    task: usize,
    data: &[LabeledSample],
    cfg: &TrainConfig,
    rng: &mut Rng,
    embeddings: &ClassEmbeddingTable,
    mut on_step: impl FnMut(&SessionState),
) -> Result<Vec<(u32, Option<u32>)>> {
    if task == 0 || state.completed != task {
        return Err(Error::Config(format!(
            "session {task} cannot follow {} completed sessions",
            state.completed
        )));
    }
    if !state.extractor.is_frozen() {
        return Err(Error::Config(
            "extractor must be frozen after the base session".into(),
        ));
    }
    if let Some(missing) = state
        .head
        .slots()
        .iter()
        .find(|s| !state.store.contains(s.class_id))
    {
        return Err(Error::MissingPrototypes(missing.class_id));
    }
    if let Some(s) = data.iter().find(|s| s.task_id != task) {
        return Err(Error::Config(format!(
            "sample of class {} is tagged task {}, expected {task}",
            s.class_id, s.task_id
        )));
    }
    let mut classes: Vec<u32> = data.iter().map(|s| s.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::Config(format!(
            "session {task} has no training data"
        )));
    }

    let batch = state.rotated(data)?;
    let m = state.head.rotations();
    let mut sources = Vec::with_capacity(classes.len());
    for &class_id in &classes {
        let mut per_rotation = vec![Vec::new(); m];
        for item in batch.iter().filter(|b| b.class_id == class_id) {
            for (r, f) in item.features.iter().enumerate() {
                per_rotation[r].push(f.clone());
            }
        }
        let source = state.head.init_new_class(
            class_id,
            task,
            &per_rotation,
            embeddings,
            cfg.variance_fallback,
        )?;
        sources.push((class_id, source));
    }

    let mask = GradientMask::incremental(&state.head, task);
    let protos = state.store.labeled();
    let mut head_opt = HeadOptimizer::for_head(&state.head);
    for epoch in 0..cfg.inc_epochs {
        let sampled = state.head.sample(rng);
        let value = losses::incremental_loss(
            &state.head,
            &sampled,
            &batch,
            &protos,
            cfg.lambda_proto,
            cfg.lambda_s3c,
            &mask,
        )
        .map_err(abort(epoch))?;
        head_opt
            .step(
                &mut state.head,
                &value.grad_means,
                &value.grad_variances,
                &mask,
                cfg.inc_lr,
                cfg.momentum,
            )
            .map_err(abort(epoch))?;
        state.losses.push(LossRecord {
            session: task,
            epoch,
            loss: value.loss,
        });
        on_step(state);
    }

    state
        .store
        .update(compute_task_prototypes(&state.extractor, &classes, data)?)?;
    state.completed = task + 1;
    Ok(sources)
}

/// Runs every session of `plan` on `dataset`, evaluating after each one.
/// `after_session` sees the state once the session's metrics are recorded.
pub fn run_plan(
    plan: &SessionPlan,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut after_session: impl FnMut(&SessionState) -> Result<()>,
) -> Result<SessionState> {
    let input = InputShape {
        channels: dataset.channels,
        size: dataset.size,
    };
    let mut state = SessionState::new(cfg, input, &plan.tasks[0].classes)?;
    let root = Rng::new(cfg.seed);
    let mut test_sets = Vec::with_capacity(plan.session_count());
    for t in 0..plan.session_count() {
        let train = plan.train_data(dataset, t)?;
        let mut rng = root.fork(100 + t as u64);
        if t == 0 {
            train_base(&mut state, &train, cfg, &mut rng)?;
        } else {
            train_incremental(&mut state, t, &train, cfg, &mut rng, &dataset.embeddings)?;
        }
        test_sets.push(plan.test_data(dataset, t));
        let row = evaluation::evaluate_session(&state.head, &state.extractor, t, &test_sets)?;
        log::info!(
            "session {t}: top-1 {:.4}{}",
            row.top1,
            row.hm.map(|h| format!(", hm {h:.4}")).unwrap_or_default()
        );
        state.metrics.push(row);
        after_session(&state)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::protocol::build_sessions;
    use crate::data::ProtocolConfig;
    use crate::data::{generate_synthetic, GeneratorConfig};

    #[test]
    fn sgd_examples() {
        let mut w = vec![2.0];
        let mut v = vec![0.0];
        let g = w.clone();
        sgd_step(&mut w, &g, None, 0.1, 0.0, &mut v).unwrap();
        assert_eq!(w, vec![1.8]);

        let mut w = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        sgd_step(&mut w, &[3.0, 4.0], None, 0.0, 0.9, &mut v).unwrap();
        assert_eq!(w, vec![1.0, -2.0]);
        sgd_step(&mut w, &[3.0, 4.0], Some(&[false, false]), 0.5, 0.9, &mut v).unwrap();
        assert_eq!(w, vec![1.0, -2.0]);
        assert!(matches!(
            sgd_step(&mut w, &[1.0], None, 0.1, 0.0, &mut v),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn momentum_accumulates() {
        let mut w = vec![0.0];
        let mut v = vec![0.0];
        sgd_step(&mut w, &[1.0], None, 1.0, 0.5, &mut v).unwrap();
        sgd_step(&mut w, &[1.0], None, 1.0, 0.5, &mut v).unwrap();
        assert_eq!(w, vec![-2.5]);
    }

    #[test]
    fn schedule_and_config() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.milestones(), vec![36, 48]);
        assert_eq!(cfg.base_lr_at(0), 0.01);
        assert!((cfg.base_lr_at(36) - 0.001).abs() < 1e-15);
        assert!((cfg.base_lr_at(59) - 0.0001).abs() < 1e-15);

        let kv =
            KeyValues::parse("ablation = linear-head\nbase_epochs = 5\nbase_milestones = 2,4\n")
                .unwrap();
        let cfg = TrainConfig::from_kv(&kv).unwrap();
        assert_eq!(
            (cfg.rotations, cfg.stochastic, cfg.base_epochs),
            (1, false, 5)
        );
        assert_eq!(cfg.milestones(), vec![2, 4]);
        assert_eq!(
            TrainConfig::from_kv(&cfg.to_kv()).unwrap(),
            TrainConfig {
                base_milestones: Some(vec![2, 4]),
                ..cfg.clone()
            }
        );

        let bad = KeyValues::parse("base_milestones = 4,2\n").unwrap();
        assert!(TrainConfig::from_kv(&bad).is_err());
        let bad = KeyValues::parse("base_lr = 0\n").unwrap();
        assert!(TrainConfig::from_kv(&bad).is_err());
        assert!("s4c".parse::<Ablation>().is_err());
        for a in Ablation::ALL {
            assert_eq!(a.to_string().parse::<Ablation>().unwrap(), a);
        }
    }

    fn small_setup(seed: u64, base_epochs: usize) -> (Dataset, SessionPlan, TrainConfig) {
        let ds = generate_synthetic(
            &GeneratorConfig {
                classes: 9,
                train_per_class: 30,
                test_per_class: 10,
                ..GeneratorConfig::default()
            },
            &mut Rng::new(seed),
        )
        .unwrap();
        let plan = build_sessions(
            &ProtocolConfig {
                base_classes: 5,
                tasks: 2,
                ways: 2,
                shots: 5,
                seed,
                ..ProtocolConfig::default()
            },
            ds.class_count,
        )
        .unwrap();
        let cfg = TrainConfig {
            base_epochs,
            inc_epochs: 20,
            hidden: 32,
            feature_dim: 16,
            seed,
            ..TrainConfig::default()
        };
        (ds, plan, cfg)
    }

    #[test]
    fn zero_epochs_only_computes_prototypes() {
        let (ds, plan, cfg) = small_setup(1, 0);
        let input = InputShape {
            channels: 1,
            size: ds.size,
        };
        let mut state = SessionState::new(&cfg, input, &plan.tasks[0].classes).unwrap();
        let before = (state.extractor.params(), state.head.clone());
        let train = plan.train_data(&ds, 0).unwrap();
        train_base(&mut state, &train, &cfg, &mut Rng::new(1)).unwrap();
        assert_eq!(state.extractor.params(), before.0);
        assert_eq!(state.head, before.1);
        assert_eq!(state.store.len(), 5);
        assert!(state.extractor.is_frozen());
        assert!(state.losses.is_empty());
    }

    #[test]
    fn base_training_learns_and_loss_falls() {
        let (ds, plan, cfg) = small_setup(2, 60);
        let input = InputShape {
            channels: 1,
            size: ds.size,
        };
        let mut state = SessionState::new(&cfg, input, &plan.tasks[0].classes).unwrap();
        let train = plan.train_data(&ds, 0).unwrap();
        train_base(&mut state, &train, &cfg, &mut Rng::new(2)).unwrap();
        let first = state.losses.first().unwrap().loss;
        let last = state.losses.last().unwrap().loss;
        assert!(last < first, "loss {first} -> {last}");
        let test = vec![plan.test_data(&ds, 0)];
        let m = evaluation::evaluate_session(&state.head, &state.extractor, 0, &test).unwrap();
        assert!(m.top1 > 0.9, "base top-1 {}", m.top1);
    }

    #[test]
    fn incremental_contracts() {
        let (ds, plan, cfg) = small_setup(3, 5);
        let input = InputShape {
            channels: 1,
            size: ds.size,
        };
        let mut state = SessionState::new(&cfg, input, &plan.tasks[0].classes).unwrap();
        train_base(
            &mut state,
            &plan.train_data(&ds, 0).unwrap(),
            &cfg,
            &mut Rng::new(3),
        )
        .unwrap();
        for t in 1..plan.session_count() {
            let params = state.extractor.params();
            let classes_before = state.head.class_count();
            let old_heads: Vec<Vec<f64>> = (0..classes_before)
                .flat_map(|s| (1..4).map(move |r| (s, r)))
                .map(|(s, r)| state.head.mean(s, r).to_vec())
                .collect();
            let data = plan.train_data(&ds, t).unwrap();
            train_incremental(
                &mut state,
                t,
                &data,
                &cfg,
                &mut Rng::new(t as u64),
                &ds.embeddings,
            )
            .unwrap();
            assert_eq!(state.extractor.params(), params);
            assert_eq!(state.head.class_count(), classes_before + 2);
            assert_eq!(state.head.head_count(), (classes_before + 2) * 4);
            let after: Vec<Vec<f64>> = (0..classes_before)
                .flat_map(|s| (1..4).map(move |r| (s, r)))
                .map(|(s, r)| state.head.mean(s, r).to_vec())
                .collect();
            assert_eq!(after, old_heads);
            assert!(state.head.variances().iter().all(|v| *v >= 0.0));
            assert_eq!(state.store.len(), state.head.class_count());
        }
    }

    #[test]
    fn incremental_preconditions() {
        let (ds, plan, cfg) = small_setup(4, 0);
        let input = InputShape {
            channels: 1,
            size: ds.size,
        };
        let mut state = SessionState::new(&cfg, input, &plan.tasks[0].classes).unwrap();
        let data = plan.train_data(&ds, 1).unwrap();
        assert!(
            train_incremental(&mut state, 1, &data, &cfg, &mut Rng::new(0), &ds.embeddings)
                .is_err()
        );
        train_base(
            &mut state,
            &plan.train_data(&ds, 0).unwrap(),
            &cfg,
            &mut Rng::new(0),
        )
        .unwrap();
        let mut broken = state.clone();
        broken.store = PrototypeStore::new(0);
        assert!(matches!(
            train_incremental(
                &mut broken,
                1,
                &data,
                &cfg,
                &mut Rng::new(0),
                &ds.embeddings
            ),
            Err(Error::MissingPrototypes(0))
        ));
        let no_embeddings = ClassEmbeddingTable::new(0, vec![Vec::new(); ds.class_count]).unwrap();
        assert!(matches!(
            train_incremental(
                &mut state.clone(),
                1,
                &data,
                &cfg,
                &mut Rng::new(0),
                &no_embeddings
            ),
            Err(Error::MissingEmbedding(_))
        ));
        let fallback = TrainConfig {
            variance_fallback: VarianceFallback::BaseMean,
            ..cfg.clone()
        };
        train_incremental(
            &mut state,
            1,
            &data,
            &fallback,
            &mut Rng::new(0),
            &no_embeddings,
        )
        .unwrap();
    }

    #[test]
    fn run_plan_is_deterministic() {
        let (ds, plan, cfg) = small_setup(5, 3);
        let a = run_plan(&plan, &ds, &cfg, |_| Ok(())).unwrap();
        let b = run_plan(&plan, &ds, &cfg, |_| Ok(())).unwrap();
        assert_eq!(a.metrics.sessions.len(), 3);
        assert_eq!(a.metrics.to_csv(), b.metrics.to_csv());
        assert_eq!(loss_csv(&a.losses), loss_csv(&b.losses));
    }
}
