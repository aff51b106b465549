//! Promptable segmentation of cells and glands with interactive refinement.
//!
//! The crate is organised bottom-up:
//!
//! * [`maskcore`] binary masks, overlap metrics, error regions and click derivation
//! * [`raster`] RGB images and resampling
//! * [`model`] the promptable model contract, LoRA adapters and the toy backbone
//! * [`promptsim`] simulated interactive prompting
//! * [`augment`] geometric and colour augmentation
//! * [`training`] loss, optimizers and the fine-tuning loop
//! * [`pipeline`] two-stage inference sessions
//! * [`evalharness`] iterative-click evaluation and reports
//! * [`dataio`] annotation formats, manifests and session export
//! * [`service`] the HTTP annotation service

pub mod augment;
pub mod dataio;
mod error;
pub mod evalharness;
pub mod maskcore;
pub mod model;
pub mod pipeline;
pub mod promptsim;
pub mod raster;
pub mod service;
pub mod training;

pub use error::{Error, Result};
pub use maskcore::{BinaryMask, BoxPrompt, PointPrompt, Polarity, Prompt};
pub use raster::RgbImage;
