//! Position-aware spatio-temporal graph network for traffic forecasting.
//!
//! The [`tensor`] module holds a reverse-mode autodiff tape; [`model`] assembles
//! the network from [`stlm`], [`tpam`] and [`spae`]; [`train`] and [`metrics`]
//! fit and score it on windows built by [`data`].

pub mod cli;
pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod spae;
pub mod stlm;
pub mod tensor;
pub mod train;
pub mod tpam;

pub use error::{PastnError, Result};
pub use tensor::{Tape, Tensor, Var};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/quick-start.md")]
    mod quick_start {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/graph.md")]
    mod graph {}
    #[doc = include_str!("../../../book/src/stlm.md")]
    mod stlm {}
    #[doc = include_str!("../../../book/src/spae.md")]
    mod spae {}
    #[doc = include_str!("../../../book/src/tpam.md")]
    mod tpam {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/ablations.md")]
    mod ablations {}
}
