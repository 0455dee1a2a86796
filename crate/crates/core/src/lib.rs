//! Realism evaluation for text-to-image outputs.
//!
//! An image is judged by a visual question answering model through a plan of
//! gated yes/no questions compiled from an attribute schema or a relation
//! query. The transcript of answers is scored, optionally combined with a
//! photo-likeness score, ranked into splits and compared with human labels.

pub mod benchmark;
pub mod config;
pub mod exec;
pub mod pipeline;
pub mod plan;
pub mod ranking;
pub mod schema;
pub mod scoring;
pub mod stats;
pub mod style;
pub mod vqa;

// The guide's chapters run as doc-tests so its snippets stay in step with
// the library.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/schemas.md")]
    mod schemas {}
    #[doc = include_str!("../../../book/src/plans.md")]
    mod plans {}
    #[doc = include_str!("../../../book/src/gateway.md")]
    mod gateway {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/ranking.md")]
    mod ranking {}
    #[doc = include_str!("../../../book/src/statistics.md")]
    mod statistics {}
    #[doc = include_str!("../../../book/src/benchmark.md")]
    mod benchmark {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
