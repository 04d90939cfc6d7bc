//! Text-guided bottom-up patch summarization for vision-language
//! pretraining, at a scale that trains on one CPU core.
//!
//! The crate is organised around the data flow of one training step:
//!
//! - [`synth`] renders colored-shape images with captions and boxes;
//! - [`model`] holds the ViT, text, fusion and decoder stacks;
//! - [`summarizer`] scores patches against the caption, drops the least
//!   salient inside the ViT and condenses the rest into a short summary;
//! - [`objectives`] defines the five losses;
//! - [`schedule`] runs the alternating region/paired training loop;
//! - [`flops`] and [`bench`] account for the compute saved.
//!
//! ```no_run
//! use patchsum::{config::RunConfig, model::Model, synth};
//!
//! let cfg = RunConfig::desk();
//! let model = Model::new(&cfg)?;
//! let sample = synth::generate(7, synth::SampleKind::Paired, cfg.image_size as u32)?;
//! let text = model.text_encode(&sample.caption)?;
//! let vision = model.vit_forward(&sample.image(), &text, 0.5)?;
//! println!("kept {} of {} patches", vision.seq.patch_count(), cfg.num_patches());
//! # Ok::<(), patchsum::Error>(())
//! ```

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod flops;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod schedule;
pub mod summarizer;
pub mod synth;

pub use error::{Error, Result};
pub use patchsum_tensor as tensor;
