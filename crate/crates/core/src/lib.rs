pub mod dataset;
pub mod edapp;
pub mod error;
pub mod geometry;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod raster;
pub mod tensor;
pub mod train;
mod util;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

/// Guide chapters compiled as doctests so their snippets stay current.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/unfolding.md")]
    pub struct Unfolding;
    #[doc = include_str!("../../../book/src/datasets.md")]
    pub struct Datasets;
    #[doc = include_str!("../../../book/src/edapp.md")]
    pub struct Edapp;
    #[doc = include_str!("../../../book/src/model.md")]
    pub struct Model;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
