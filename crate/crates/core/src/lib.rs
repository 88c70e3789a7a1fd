//! Object detection and 6D pose estimation in RGB-D frames by voting with
//! local patch descriptors learned from synthetic renders.
//!
//! The detection pipeline is [`pipeline::run_detect`]: grid patches
//! ([`patch`]) are encoded by a [`descriptor::Regressor`], matched against a
//! [`codebook::Codebook`] of synthetic patches, turned into 6D votes and
//! filtered into hypotheses ([`vote`]), then refined and verified against
//! depth ([`verify`]). [`metrics`], [`eval`] and [`sweep`] score detections
//! against ground truth; [`selftest`] runs the whole loop on synthetic
//! scenes.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ann;
mod binio;
pub mod codebook;
pub mod config;
pub mod dataset;
pub mod descriptor;
pub mod error;
pub mod eval;
pub mod frame;
pub mod geom;
pub mod mesh;
pub mod metrics;
pub mod nn;
pub mod patch;
pub mod pca;
pub mod pipeline;
pub mod plot;
pub mod render;
pub mod scene;
pub mod selftest;
pub mod sweep;
pub mod verify;
pub mod vote;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    pub mod geometry {}
    #[doc = include_str!("../../../book/src/patches.md")]
    pub mod patches {}
    #[doc = include_str!("../../../book/src/descriptors.md")]
    pub mod descriptors {}
    #[doc = include_str!("../../../book/src/codebook.md")]
    pub mod codebook {}
    #[doc = include_str!("../../../book/src/voting.md")]
    pub mod voting {}
    #[doc = include_str!("../../../book/src/verification.md")]
    pub mod verification {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
}
