//! Edge-aware adversarial 3D segmentation.
//!
//! A volumetric segmentation stack built for ultrasound-like data: an
//! encoder-decoder U-Net generator augmented with a residual detail branch,
//! spatial/channel attention, an edge-supervision head, and a dense fusion
//! head, trained against a conditional patch discriminator with a combined
//! least-squares-adversarial + Dice + edge-Dice objective. Ships with a
//! synthetic phantom generator, five-metric evaluation suite, training
//! engine with checkpointing and ablation harness, and a CLI.

pub mod adversarial;
pub mod backbone;
pub mod data;
pub mod dcm;
pub mod eem;
pub mod engine;
pub mod error;
pub mod gfe;
pub mod metrics;
pub mod nn;
pub mod scam;

pub use error::{Error, Result};
