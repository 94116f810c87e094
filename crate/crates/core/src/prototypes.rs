//! Class prototypes: the mean feature of a class's unrotated training images,
//! kept as the only memory of classes from earlier sessions.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;

use crate::backbone::FeatureExtractor;
use crate::binio::{Reader, Writer};
use crate::data::LabeledSample;
use crate::error::{Error, Result};

pub const STORE_MAGIC: &[u8; 4] = b"S3CP";
pub const STORE_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub class_id: u32,
    pub task_id: usize,
    pub vector: Vec<f64>,
}

/// Mean of `vectors`, summed in a canonical order (lexicographic under
/// `f64::total_cmp`) so the result does not depend on sample order.
fn canonical_mean(mut vectors: Vec<Vec<f64>>) -> Vec<f64> {
    vectors.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let n = vectors.len() as f64;
    let mut sum = vec![0.0; vectors[0].len()];
    for v in &vectors {
        sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
    }
    sum.into_iter().map(|s| s / n).collect()
}

/// One prototype per class present in `samples`, ordered by class id.
/// Only the original (0°) images are used.
pub fn compute_prototypes(
    extractor: &FeatureExtractor,
    samples: &[LabeledSample],
) -> Result<Vec<Prototype>> {
    let mut by_class: BTreeMap<u32, (usize, Vec<Vec<f64>>)> = BTreeMap::new();
    for s in samples {
        let entry = by_class
            .entry(s.class_id)
            .or_insert((s.task_id, Vec::new()));
        if entry.0 != s.task_id {
            return Err(Error::Config(format!(
                "class {} appears in tasks {} and {}",
                s.class_id, entry.0, s.task_id
            )));
        }
        entry.1.push(extractor.features(&s.image)?);
    }
    Ok(by_class
        .into_iter()
        .map(|(class_id, (task_id, feats))| Prototype {
            class_id,
            task_id,
            vector: canonical_mean(feats),
        })
        .collect())
}

/// Prototypes of `classes`, failing with [`Error::EmptyClass`] for any class
/// with no sample in `samples`.
pub fn compute_task_prototypes(
    extractor: &FeatureExtractor,
    classes: &[u32],
    samples: &[LabeledSample],
) -> Result<Vec<Prototype>> {
    let protos = compute_prototypes(extractor, samples)?;
    for &c in classes {
        if !protos.iter().any(|p| p.class_id == c) {
            return Err(Error::EmptyClass(c));
        }
    }
    Ok(protos)
}

/// Prototypes of every class seen so far, tagged with the fingerprint of the
/// extractor that produced them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrototypeStore {
    entries: BTreeMap<u32, (usize, Vec<f64>)>,
    fingerprint: u64,
}

impl PrototypeStore {
    pub fn new(fingerprint: u64) -> Self {
        Self {
            entries: BTreeMap::new(),
            fingerprint,
        }
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
    pub fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(|(_, v)| v.len())
    }

    pub fn get(&self, class_id: u32) -> Option<&[f64]> {
        self.entries.get(&class_id).map(|(_, v)| v.as_slice())
    }

    pub fn contains(&self, class_id: u32) -> bool {
        self.entries.contains_key(&class_id)
    }

    /// `(class_id, task_id, vector)` in class order.
    pub fn iter(&self) -> impl Iterator<Item = (u32, usize, &[f64])> {
        self.entries
            .iter()
            .map(|(&c, (t, v))| (c, *t, v.as_slice()))
    }

    /// Labeled prototypes in class order, ready for the rehearsal loss.
    pub fn labeled(&self) -> Vec<(u32, Vec<f64>)> {
        self.entries
            .iter()
            .map(|(&c, (_, v))| (c, v.clone()))
            .collect()
    }

    /// Adds new prototypes. Existing entries are never replaced; all new
    /// entries are checked before any is inserted.
    pub fn update(&mut self, prototypes: Vec<Prototype>) -> Result<()> {
        let dim = self
            .dim()
            .or_else(|| prototypes.first().map(|p| p.vector.len()));
        for (i, p) in prototypes.iter().enumerate() {
            if self.entries.contains_key(&p.class_id)
                || prototypes[..i].iter().any(|q| q.class_id == p.class_id)
            {
                return Err(Error::DuplicateClass(p.class_id));
            }
            if Some(p.vector.len()) != dim {
                return Err(Error::ShapeMismatch {
                    expected: format!("prototype of dim {}", dim.unwrap_or(0)),
                    found: format!("dim {}", p.vector.len()),
                });
            }
        }
        for p in prototypes {
            self.entries.insert(p.class_id, (p.task_id, p.vector));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(STORE_MAGIC);
        w.u16(STORE_VERSION);
        w.u64(self.fingerprint);
        w.u32(self.dim().unwrap_or(0) as u32);
        w.u32(self.entries.len() as u32);
        for (&class_id, (task_id, v)) in &self.entries {
            w.u32(class_id);
            w.u16(*task_id as u16);
            w.f64s(v);
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(STORE_MAGIC)?;
        let version = r.u16()?;
        if version != STORE_VERSION {
            return r.fail(format!("unsupported version {version}"));
        }
        let fingerprint = r.u64()?;
        let dim = r.u32()? as usize;
        let count = r.u32()?;
        let mut store = Self::new(fingerprint);
        for _ in 0..count {
            let at = r.offset();
            let class_id = r.u32()?;
            let task_id = r.u16()? as usize;
            let vector = r.f64s(dim)?;
            if store.entries.insert(class_id, (task_id, vector)).is_some() {
                return Err(Error::Format {
                    offset: at,
                    reason: format!("duplicate class {class_id}"),
                });
            }
        }
        r.finish()?;
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }
}

/// A loaded store and whether its fingerprint disagrees with the extractor
/// it is about to be used with.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedStore {
    pub store: PrototypeStore,
    pub fingerprint_mismatch: bool,
}

/// Loads a store; a fingerprint that differs from `expected` is reported and
/// logged at warn level, not treated as an error.
pub fn load_store(path: impl AsRef<Path>, expected: Option<u64>) -> Result<LoadedStore> {
    let path = path.as_ref();
    let store = PrototypeStore::decode(&std::fs::read(path)?)?;
    let fingerprint_mismatch = expected.is_some_and(|e| e != store.fingerprint);
    if fingerprint_mismatch {
        warn!(
            "prototypes in {} were computed with extractor {:016x}, current is {:016x}",
            path.display(),
            store.fingerprint,
            expected.unwrap_or_default()
        );
    }
    Ok(LoadedStore {
        store,
        fingerprint_mismatch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Activation, Dense, InputShape};
    use crate::data::ImageGrid;
    use crate::numerics::Rng;

    fn identity_extractor(n: usize) -> FeatureExtractor {
        let len = n * n;
        let mut weights = vec![0.0; len * len];
        for i in 0..len {
            weights[i * len + i] = 1.0;
        }
        FeatureExtractor::from_layers(
            InputShape {
                channels: 1,
                size: n,
            },
            vec![Dense {
                in_dim: len,
                out_dim: len,
                weights,
                bias: vec![0.0; len],
                activation: Activation::Identity,
            }],
        )
        .unwrap()
    }

    fn sample(class_id: u32, px: &[f32]) -> LabeledSample {
        LabeledSample {
            image: ImageGrid::new(1, 2, 2, px.to_vec()).unwrap(),
            class_id,
            task_id: 0,
        }
    }

    #[test]
    fn single_and_pair() {
        let fe = identity_extractor(2);
        let p = compute_prototypes(&fe, &[sample(3, &[0.5, 0.25, 0.0, 1.0])]).unwrap();
        assert_eq!(p[0].vector, vec![0.5, 0.25, 0.0, 1.0]);
        let p = compute_prototypes(
            &fe,
            &[
                sample(1, &[0.5, 0.25, 0.0, 1.0]),
                sample(1, &[0.0, 0.75, 1.0, 0.5]),
            ],
        )
        .unwrap();
        assert_eq!(p[0].vector, vec![0.25, 0.5, 0.5, 0.75]);
    }

    #[test]
    fn matches_naive_mean_and_ignores_order() {
        let mut rng = Rng::new(4);
        let fe = FeatureExtractor::mlp(
            &mut rng,
            InputShape {
                channels: 1,
                size: 2,
            },
            5,
            3,
        )
        .unwrap();
        let mut samples: Vec<LabeledSample> = (0..7)
            .map(|_| {
                let px: Vec<f32> = (0..4).map(|_| rng.uniform() as f32).collect();
                sample(2, &px)
            })
            .collect();
        let got = compute_prototypes(&fe, &samples).unwrap();
        let mut naive = vec![0.0; 3];
        for s in &samples {
            for (n, f) in naive.iter_mut().zip(fe.features(&s.image).unwrap()) {
                *n += f / 7.0;
            }
        }
        for (g, n) in got[0].vector.iter().zip(&naive) {
            assert!((g - n).abs() < 1e-12);
        }
        for seed in 0..5 {
            Rng::new(seed).shuffle(&mut samples);
            assert_eq!(compute_prototypes(&fe, &samples).unwrap(), got);
        }
    }

    #[test]
    fn empty_class_detected() {
        let fe = identity_extractor(2);
        let r = compute_task_prototypes(&fe, &[0, 1], &[sample(0, &[0.0; 4])]);
        assert!(matches!(r, Err(Error::EmptyClass(1))));
    }

    fn proto(class_id: u32, task_id: usize, v: &[f64]) -> Prototype {
        Prototype {
            class_id,
            task_id,
            vector: v.to_vec(),
        }
    }

    #[test]
    fn store_grows_and_rejects_duplicates() {
        let mut store = PrototypeStore::new(7);
        store
            .update((0..6).map(|c| proto(c, 0, &[c as f64, 1.0])).collect())
            .unwrap();
        assert_eq!(store.len(), 6);
        store
            .update(vec![proto(6, 1, &[0.0, 1.0]), proto(7, 1, &[1.0, 1.0])])
            .unwrap();
        assert_eq!(store.len(), 8);
        let before = store.clone();
        assert!(matches!(
            store.update(vec![proto(9, 2, &[0.0, 1.0]), proto(3, 2, &[0.0, 2.0])]),
            Err(Error::DuplicateClass(3))
        ));
        assert_eq!(store, before);
        assert!(store.update(vec![proto(10, 2, &[1.0])]).is_err());
    }

    #[test]
    fn store_round_trip_and_fingerprint() {
        let mut store = PrototypeStore::new(0xdead_beef_0123_4567);
        store
            .update(vec![proto(0, 0, &[0.1, -2.5]), proto(4, 1, &[1e-300, 3.0])])
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.s3cp");
        store.save(&path).unwrap();
        let loaded = load_store(&path, Some(store.fingerprint())).unwrap();
        assert_eq!(loaded.store, store);
        assert!(!loaded.fingerprint_mismatch);
        assert_eq!(loaded.store.encode(), store.encode());
        let other = load_store(&path, Some(1)).unwrap();
        assert!(other.fingerprint_mismatch);

        let bytes = store.encode();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_store(&path, None), Err(Error::Format { .. })));
    }
}
