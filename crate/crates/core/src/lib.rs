//! Stochastic accumulation of diffusion-style object detections.
//!
//! A diffusion box detector starts every run from random proposal boxes, so
//! repeated runs on one image disagree a little. This crate concatenates the
//! detections of `n` such runs and suppresses duplicates
//! ([`accumulator::accumulate`]), turns the accumulated detections on
//! unlabeled images into confidence-weighted pseudo-labels ([`pseudolabel`]),
//! and finetunes with a loss that normalizes the pseudo-label term by its
//! total weight ([`ssl::ssl_loss`]).
//!
//! Everything is exercised against a small trainable box denoiser
//! ([`diffusion`]) running on synthetic scenes with a controllable
//! source/target domain gap ([`simworld`]), and scored with COCO-style
//! size-bucketed mAP ([`evaluation`]).

pub mod accumulator;
pub mod boxgeom;
pub mod dataio;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod ids;
pub mod matching;
pub mod nms;
pub mod pseudolabel;
pub mod seeding;
pub mod simworld;
pub mod ssl;
pub mod stats;

pub use accumulator::{accumulate, accumulate_streaming, AccumulatedDetections, DetectionRun};
pub use boxgeom::{Bbox, SizeBucket, SizeThresholds};
pub use error::{Error, Result};
pub use ids::{ClassId, ImageId};
pub use nms::{nms, Detection, NmsConfig};
