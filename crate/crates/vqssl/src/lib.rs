//! Self-supervised pretraining on procedural phantom radiographs with a
//! multi-scale discrete bottleneck.
//!
//! Two augmented views of each image feed a gradient-trained encoder branch
//! and a momentum-updated supervision branch. The supervision branch's
//! feature maps are quantized against per-scale EMA codebooks, fused, and
//! refined against the branch's global embedding to produce a second
//! alignment target next to the usual momentum embedding. Training minimizes
//! a cosine regression toward both targets plus a commitment loss.
//!
//! Crate layout mirrors the pipeline: [`datagen`] synthesizes the corpus and
//! augmentations, [`encoder`] is the shared backbone, [`vq`] the discrete
//! bottleneck, [`serf`] the fusion/refinement stage, [`objective`] the loss,
//! [`momentum`] the schedules and branch update, [`trainer`] the loop,
//! [`evalsuite`] the linear-probe/fine-tune harness, and [`checkpoint`] the
//! on-disk state format.

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod evalsuite;
pub mod momentum;
pub mod nn;
pub mod objective;
pub mod rng;
pub mod serf;
pub mod trainer;
pub mod vq;

pub use error::{Error, Result};
