//! Temporal point-process models for event streams on graphs.
//!
//! Node embeddings evolve with every event; pair intensities are softplus
//! functions of the two embeddings. Neighbourhoods for the embedding update
//! come either from a known association graph ([`config::AttentionMode::DyRep`])
//! or from a latent graph inferred by [`encoder`] at every event.
//!
//! The guide under `book/` walks through each piece with runnable examples.

pub mod attention;
pub mod autodiff;
pub mod config;
pub mod dyrep;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod events;
pub mod intensity;
pub mod model;
pub mod params;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/events.md")]
    mod events {}
    #[doc = include_str!("../../../book/src/intensity.md")]
    mod intensity {}
    #[doc = include_str!("../../../book/src/embeddings.md")]
    mod embeddings {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
