pub mod checkpoint;
pub mod config;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod scoring;
pub mod sparsify;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod units;

pub use error::{Error, Result};

/// The guide's chapters, compiled so their snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/distillation.md")]
    mod distillation {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/masks.md")]
    mod masks {}
    #[doc = include_str!("../../../book/src/auto.md")]
    mod auto {}
    #[doc = include_str!("../../../book/src/rewinding.md")]
    mod rewinding {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
}
