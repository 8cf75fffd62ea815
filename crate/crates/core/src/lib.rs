//! Self-supervised learning of ordered landmark sets from a given
//! registration model.

pub mod error;
pub mod evalkit;
pub mod diffengine;
pub mod downstream;
pub mod fieldcore;
pub mod losses;
pub mod proposal;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

/// Guide chapters under `book/src`, compiled here so their snippets run as
/// doctests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/fields.md")]
    pub struct Fields;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub struct Autodiff;
    #[doc = include_str!("../../../book/src/proposal.md")]
    pub struct Proposal;
    #[doc = include_str!("../../../book/src/losses.md")]
    pub struct Losses;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
    #[doc = include_str!("../../../book/src/downstream.md")]
    pub struct Downstream;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
