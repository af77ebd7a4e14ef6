//! Character personalization for a toy rectified-flow image generator.
//!
//! The crate implements a two-stage pipeline on a procedural character world:
//! unified supervised fine-tuning (text cross-entropy plus flow matching) and a
//! group-relative policy optimization stage driven by a composite reward of
//! prompt alignment, visual question answering, group diversity and a
//! training-set similarity penalty.

pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod error;
pub mod evalbench;
pub mod flowgen;
pub mod grporl;
pub mod optim;
pub mod pipeline;
pub mod rewards;
pub mod rng;
pub mod scorer;
pub mod sft;
pub mod toyworld;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/toy-world.md")]
    struct ToyWorld;
    #[doc = include_str!("../../../book/src/encoders.md")]
    struct Encoders;
    #[doc = include_str!("../../../book/src/flow.md")]
    struct Flow;
    #[doc = include_str!("../../../book/src/sft.md")]
    struct Sft;
    #[doc = include_str!("../../../book/src/rewards.md")]
    struct Rewards;
    #[doc = include_str!("../../../book/src/grpo.md")]
    struct Grpo;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
