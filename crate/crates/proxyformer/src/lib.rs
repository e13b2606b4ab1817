//! Desk-scale referring video object segmentation with cross-modality proxy
//! queries.
//!
//! The crate trains and evaluates a small video-text segmentation model on a
//! deterministic synthetic task: scenes of moving colored shapes, one of which
//! is referred to by a short expression ("the red circle moving left"). The
//! model encodes the clip with decoupled spatial/temporal attention, carries a
//! small set of proxy queries that aggregate text and video semantics, and
//! decodes per-frame masks with dynamic kernels.
//!
//! Everything runs on one CPU core in double precision, bit-deterministically
//! for a fixed seed. Module map:
//!
//! - [`numerics`]: flat-storage tensors, the reverse-mode tape, attention, and
//!   the finite-difference gradient checker.
//! - [`backbone`]: convolutional frame encoder, vocabulary, tokenizer, text
//!   embedding.
//! - [`cmie`]: the cross-modality interaction encoder (decoupled self/cross
//!   attention stages) and the attention cost model.
//! - [`heads`]: feature-pyramid mask decoder, dynamic kernel head, class/box
//!   heads, joint-embedding head.
//! - [`training`]: losses, trajectory matching, the optimizer, checkpoints,
//!   and the training loop.
//! - [`metrics`]: region/boundary quality, precision@K, mAP, IoU summaries.
//! - [`synthdata`]: scene generator, rasterizer, dataset builder and formats.
//! - [`model`]: the assembled network.
//! - [`cli`]: the `proxyformer` command-line verbs.

pub mod backbone;
pub mod cli;
pub mod cmie;
pub mod config;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
