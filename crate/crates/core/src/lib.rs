pub mod adaptors;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod pnm;
pub mod synth;
pub mod tensor;
pub mod trainer;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/autodiff.md")]
mod book_autodiff {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/model.md")]
mod book_model {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/contrastive.md")]
mod book_contrastive {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/training.md")]
mod book_training {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/evaluation.md")]
mod book_evaluation {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
