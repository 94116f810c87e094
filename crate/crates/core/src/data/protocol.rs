//! Session construction for the standard protocol and its imbalanced
//! (`im`) and fewer-base-classes (`lb`) variants.
//!
//! Class ids are laid out in order: the base task takes the first
//! `base_classes` ids and incremental task `t` takes the `ways` ids that
//! follow task `t - 1`. The `lb` variant keeps the incremental tasks exactly
//! where the standard layout puts them and trains the base task on a prefix
//! of the standard base classes; the ids in between are never used.

use std::fmt;
use std::str::FromStr;

use super::{Dataset, LabeledSample};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    #[default]
    Standard,
    /// Per-class shot counts taken from a shot list.
    Imbalanced,
    /// Fewer base classes, incremental tasks unchanged.
    LessBase,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Variant::Standard),
            "im" => Ok(Variant::Imbalanced),
            "lb" => Ok(Variant::LessBase),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (standard, im, lb)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Standard => "standard",
            Variant::Imbalanced => "im",
            Variant::LessBase => "lb",
        })
    }
}

pub const DEFAULT_SHOT_LIST: [usize; 5] = [5, 4, 3, 2, 1];

/// Share of all protocol classes used as base classes by the `lb` variant
/// when `lb_base_classes` is not given (40 of 100 in the CIFAR layout).
pub const LB_BASE_SHARE: f64 = 0.4;

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub base_classes: usize,
    /// Number of incremental tasks.
    pub tasks: usize,
    pub ways: usize,
    pub shots: usize,
    pub shot_list: Option<Vec<usize>>,
    pub variant: Variant,
    pub lb_base_classes: Option<usize>,
    pub rotations: usize,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            base_classes: 10,
            tasks: 4,
            ways: 2,
            shots: 5,
            shot_list: None,
            variant: Variant::Standard,
            lb_base_classes: None,
            rotations: 4,
            seed: 0,
        }
    }
}

impl ProtocolConfig {
    /// 60 base classes followed by eight 5-way 5-shot tasks.
    pub fn cifar_like() -> Self {
        Self {
            base_classes: 60,
            tasks: 8,
            ways: 5,
            shots: 5,
            ..Self::default()
        }
    }

    pub const KEYS: &'static [&'static str] = &[
        "base_classes",
        "tasks",
        "ways",
        "shots",
        "shot_list",
        "variant",
        "lb_base_classes",
        "rotations",
        "seed",
    ];

    /// Overrides defaults with whatever protocol keys `kv` carries.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            base_classes: kv.take("base_classes")?.unwrap_or(d.base_classes),
            tasks: kv.take("tasks")?.unwrap_or(d.tasks),
            ways: kv.take("ways")?.unwrap_or(d.ways),
            shots: kv.take("shots")?.unwrap_or(d.shots),
            shot_list: kv.take_list("shot_list")?,
            variant: kv.take("variant")?.unwrap_or(d.variant),
            lb_base_classes: kv.take("lb_base_classes")?,
            rotations: kv.take("rotations")?.unwrap_or(d.rotations),
            seed: kv.take("seed")?.unwrap_or(d.seed),
        })
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("base_classes", self.base_classes);
        kv.set("tasks", self.tasks);
        kv.set("ways", self.ways);
        kv.set("shots", self.shots);
        if let Some(list) = &self.shot_list {
            let s: Vec<String> = list.iter().map(|x| x.to_string()).collect();
            kv.set("shot_list", s.join(","));
        }
        kv.set("variant", self.variant);
        if let Some(lb) = self.lb_base_classes {
            kv.set("lb_base_classes", lb);
        }
        kv.set("rotations", self.rotations);
        kv.set("seed", self.seed);
        kv
    }

    /// Classes spanned by the standard layout: base plus every task.
    pub fn class_budget(&self) -> usize {
        self.base_classes + self.tasks * self.ways
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: usize,
    pub classes: Vec<u32>,
    /// Training samples per class, aligned with `classes`; `None` means the
    /// class's whole training split.
    pub shots: Option<Vec<usize>>,
}

impl TaskSpec {
    pub fn shots_of(&self, index: usize) -> Option<usize> {
        self.shots.as_ref().map(|s| s[index])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionPlan {
    pub variant: Variant,
    pub rotations: usize,
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
}

impl SessionPlan {
    pub fn base_classes(&self) -> usize {
        self.tasks[0].classes.len()
    }

    pub fn session_count(&self) -> usize {
        self.tasks.len()
    }

    /// Classes of tasks `0..=t`.
    pub fn seen_classes(&self, t: usize) -> Vec<u32> {
        self.tasks[..=t]
            .iter()
            .flat_map(|task| task.classes.iter().copied())
            .collect()
    }

    pub fn task_of(&self, class_id: u32) -> Option<usize> {
        self.tasks
            .iter()
            .position(|t| t.classes.contains(&class_id))
    }

    /// Training samples of task `t`. Few-shot tasks draw their samples from a
    /// per-class shuffle seeded by the plan seed and class id, so the choice
    /// is independent of call order.
    pub fn train_data(&self, ds: &Dataset, t: usize) -> Result<Vec<LabeledSample>> {
        let task = &self.tasks[t];
        let root = Rng::new(self.seed);
        let mut out = Vec::new();
        for (k, &class_id) in task.classes.iter().enumerate() {
            let mut pool: Vec<&super::Sample> = ds.train_of(class_id).collect();
            if pool.is_empty() {
                return Err(Error::EmptyClass(class_id));
            }
            if let Some(shots) = task.shots_of(k) {
                if pool.len() < shots {
                    return Err(Error::Config(format!(
                        "class {class_id} has {} training samples, {shots} shots requested",
                        pool.len()
                    )));
                }
                root.fork(class_id as u64).shuffle(&mut pool);
                pool.truncate(shots);
            }
            out.extend(pool.into_iter().map(|s| LabeledSample {
                image: s.image.clone(),
                class_id,
                task_id: t,
            }));
        }
        Ok(out)
    }

    /// The full test split of task `t`.
    pub fn test_data(&self, ds: &Dataset, t: usize) -> Vec<LabeledSample> {
        self.tasks[t]
            .classes
            .iter()
            .flat_map(|&class_id| {
                ds.test_of(class_id).map(move |s| LabeledSample {
                    image: s.image.clone(),
                    class_id,
                    task_id: t,
                })
            })
            .collect()
    }
}

/// Lays out the sessions of `cfg` over `available_classes` class ids.
///
/// ```
/// # use s3c::data::{protocol::build_sessions, ProtocolConfig};
/// let plan = build_sessions(&ProtocolConfig::cifar_like(), 100).unwrap();
/// assert_eq!(plan.session_count(), 9);
/// assert_eq!(plan.seen_classes(8).len(), 100);
/// ```
pub fn build_sessions(cfg: &ProtocolConfig, available_classes: usize) -> Result<SessionPlan> {
    if cfg.base_classes == 0 {
        return Err(Error::Config("base_classes must be positive".into()));
    }
    if cfg.tasks > 0 && (cfg.ways == 0 || cfg.shots == 0) {
        return Err(Error::Config("ways and shots must be positive".into()));
    }
    if cfg.rotations == 0 || cfg.rotations > 4 {
        return Err(Error::Config("rotations must be in 1..=4".into()));
    }
    let needed = cfg.class_budget();
    if needed > available_classes {
        return Err(Error::InsufficientClasses {
            needed,
            available: available_classes,
        });
    }

    let per_class_shots: Vec<usize> = match cfg.variant {
        Variant::Imbalanced => {
            let list = cfg
                .shot_list
                .clone()
                .unwrap_or_else(|| DEFAULT_SHOT_LIST.to_vec());
            if list.len() != cfg.ways {
                return Err(Error::Config(format!(
                    "shot_list has {} entries but tasks are {}-way",
                    list.len(),
                    cfg.ways
                )));
            }
            if list.contains(&0) {
                return Err(Error::Config("shot_list entries must be positive".into()));
            }
            list
        }
        _ => {
            if cfg.shot_list.is_some() {
                return Err(Error::Config(
                    "shot_list is only valid for the im variant".into(),
                ));
            }
            vec![cfg.shots; cfg.ways]
        }
    };

    let base_count = match cfg.variant {
        Variant::LessBase => {
            let lb = cfg.lb_base_classes.unwrap_or_else(|| {
                ((needed as f64 * LB_BASE_SHARE).round() as usize).clamp(1, cfg.base_classes)
            });
            if lb == 0 || lb > cfg.base_classes {
                return Err(Error::Config(format!(
                    "lb_base_classes must be in 1..={}",
                    cfg.base_classes
                )));
            }
            lb
        }
        _ => {
            if cfg.lb_base_classes.is_some() {
                return Err(Error::Config(
                    "lb_base_classes is only valid for the lb variant".into(),
                ));
            }
            cfg.base_classes
        }
    };

    let mut tasks = vec![TaskSpec {
        task_id: 0,
        classes: (0..base_count as u32).collect(),
        shots: None,
    }];
    for t in 1..=cfg.tasks {
        let start = (cfg.base_classes + (t - 1) * cfg.ways) as u32;
        tasks.push(TaskSpec {
            task_id: t,
            classes: (start..start + cfg.ways as u32).collect(),
            shots: Some(per_class_shots.clone()),
        });
    }
    Ok(SessionPlan {
        variant: cfg.variant,
        rotations: cfg.rotations,
        seed: cfg.seed,
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn cifar_layout() {
        let plan = build_sessions(&ProtocolConfig::cifar_like(), 100).unwrap();
        assert_eq!(plan.session_count(), 9);
        assert_eq!(plan.base_classes(), 60);
        assert_eq!(plan.seen_classes(8).len(), 100);
        for t in &plan.tasks[1..] {
            assert_eq!(t.classes.len(), 5);
            assert_eq!(t.shots, Some(vec![5; 5]));
        }
        assert_eq!(plan.tasks[8].classes, vec![95, 96, 97, 98, 99]);
        assert_eq!(plan.task_of(61), Some(1));
    }

    #[test]
    fn imbalanced_shots() {
        let cfg = ProtocolConfig {
            variant: Variant::Imbalanced,
            ..ProtocolConfig::cifar_like()
        };
        let plan = build_sessions(&cfg, 100).unwrap();
        for t in &plan.tasks[1..] {
            for (k, &shots) in DEFAULT_SHOT_LIST.iter().enumerate() {
                assert_eq!(t.shots_of(k), Some(shots));
            }
            assert_eq!(t.shots.as_ref().unwrap().iter().sum::<usize>(), 15);
        }
        let bad = ProtocolConfig {
            shot_list: Some(vec![3, 2]),
            ..cfg
        };
        assert!(build_sessions(&bad, 100).is_err());
    }

    #[test]
    fn less_base_keeps_tasks() {
        let standard = build_sessions(&ProtocolConfig::cifar_like(), 100).unwrap();
        let cfg = ProtocolConfig {
            variant: Variant::LessBase,
            ..ProtocolConfig::cifar_like()
        };
        let lb = build_sessions(&cfg, 100).unwrap();
        assert_eq!(lb.base_classes(), 40);
        assert_eq!(lb.tasks[1..], standard.tasks[1..]);

        let explicit = build_sessions(
            &ProtocolConfig {
                lb_base_classes: Some(30),
                ..cfg
            },
            100,
        )
        .unwrap();
        assert_eq!(explicit.base_classes(), 30);

        // 10 base + 4x2-way: 40% of 18 rounds to 7
        let desk = ProtocolConfig {
            variant: Variant::LessBase,
            ..ProtocolConfig::default()
        };
        assert_eq!(build_sessions(&desk, 18).unwrap().base_classes(), 7);
    }

    #[test]
    fn insufficient_classes() {
        assert!(matches!(
            build_sessions(&ProtocolConfig::cifar_like(), 99),
            Err(Error::InsufficientClasses {
                needed: 100,
                available: 99
            })
        ));
    }

    #[test]
    fn config_parsing() {
        let kv = KeyValues::parse(
            "base_classes = 6\ntasks = 2\nways = 3\nvariant = im\nshot_list = 3,2,1\nseed = 4",
        )
        .unwrap();
        let cfg = ProtocolConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.variant, Variant::Imbalanced);
        assert_eq!(cfg.shot_list, Some(vec![3, 2, 1]));
        assert_eq!(ProtocolConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert!("bogus".parse::<Variant>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn label_spaces_disjoint(base in 1usize..20, tasks in 0usize..6, ways in 1usize..6,
                                     variant in 0usize..3, extra in 0usize..5) {
                let variant = [Variant::Standard, Variant::Imbalanced, Variant::LessBase][variant];
                let cfg = ProtocolConfig {
                    base_classes: base,
                    tasks,
                    ways,
                    shot_list: (variant == Variant::Imbalanced).then(|| (1..=ways).rev().collect()),
                    variant,
                    ..ProtocolConfig::default()
                };
                let plan = build_sessions(&cfg, cfg.class_budget() + extra).unwrap();
                let all = plan.seen_classes(tasks);
                let unique: HashSet<_> = all.iter().collect();
                prop_assert_eq!(unique.len(), all.len());
                for t in &plan.tasks[1..] {
                    prop_assert_eq!(t.classes.len(), ways);
                }
                if variant != Variant::LessBase {
                    prop_assert_eq!(plan.tasks[0].classes.len(), base);
                }
            }
        }
    }
}
