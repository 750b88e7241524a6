//! Weather-robust cross-view retrieval with a jointly trained diffusion
//! restoration path.
//!
//! The crate is organized bottom-up:
//! - [`tensor`], [`diffusion`]: image tensors and the Gaussian diffusion math.
//! - [`nn`]: a small neural kernel with hand-written backward passes.
//! - [`weather`], [`dataset`]: synthetic corruption and the paired toy dataset.
//! - [`restoration`], [`matching`]: the shared encoder, restoration decoder and
//!   classification head.
//! - [`retrieval`]: exact cosine top-K search and Recall@K / AP.
//! - [`config`], [`container`], [`ppm`], [`train`]: experiment plumbing.

pub mod error;
pub mod tensor;
pub mod diffusion;
pub mod nn;
pub mod weather;
pub mod dataset;
pub mod model;
pub mod restoration;
pub mod matching;
pub mod ppm;
pub mod config;
pub mod container;
pub mod train;
pub mod retrieval;

pub use error::{Error, Result};
pub use tensor::{ImageTensor, Real, Tensor};
pub use config::ExperimentConfig;
pub use diffusion::{NoiseSchedule, SigmaMode};
pub use model::{JointModel, ModelSpec};
pub use retrieval::{EmbeddingVector, GalleryIndex, ItemId, RankedList};
