//! Few-shot class-incremental learning with self-supervised stochastic
//! classifiers.
//!
//! A feature extractor is trained on a data-rich base session together with a
//! bank of stochastic cosine classifiers, one per `(class, rotation)` pair.
//! Later sessions bring a handful of labeled images for new classes; the
//! extractor is frozen, new classifiers start at the few-shot centroids, and
//! every classifier is fine-tuned against the new images plus one stored
//! prototype per old class. Test images are scored under all rotations and
//! the scores averaged.
//!
//! | module | contents |
//! |---|---|
//! | [`numerics`] | vector primitives, seeded sampling, finite differences |
//! | [`data`] | images, rotations, sessions, the dataset file |
//! | [`backbone`] | dense feature extractor with analytic gradients |
//! | [`head`] | the stochastic classifier bank |
//! | [`losses`] | joint class×rotation softmax losses and their gradients |
//! | [`prototypes`] | per-class prototypes and their store |
//! | [`trainer`] | base and incremental training |
//! | [`evaluation`] | aggregated inference and protocol metrics |
//!
//! The guide under `book/` walks through each piece; its code listings are
//! compiled as doc-tests of this crate.

mod binio;

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod head;
pub mod losses;
pub mod numerics;
pub mod prototypes;
pub mod trainer;

pub use error::{Error, NumericsError, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
mod readme {}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/stochastic-classifiers.md")]
    mod stochastic_classifiers {}
    #[doc = include_str!("../../../book/src/rotations.md")]
    mod rotations {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/incremental.md")]
    mod incremental {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/protocols.md")]
    mod protocols {}
    #[doc = include_str!("../../../book/src/file-formats.md")]
    mod file_formats {}
}
