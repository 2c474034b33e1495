//! Grouped-token transformer backbone for event cameras.
//!
//! The pipeline turns an asynchronous event stream into *group tokens*
//! (per-patch, per-polarity, per-time-bin counts and time weights), embeds
//! them with a grouped convolution, and runs a staged transformer whose blocks
//! attend both across space and across temporal-polarity groups. Stages are
//! joined by overlapping group convolutions that halve the group count and
//! double the channel width.
//!
//! Modules map onto the pipeline:
//!
//! - [`events`]: event streams, file formats, synthetic data
//! - [`group_token`]: event-to-token encoding, embedding, baseline encoders
//! - [`tensor`]: the autodiff tensor used by every learned component
//! - [`edsa`]: spatial and group self-attention and the dual-residual block
//! - [`gta`]: inter-stage group token aggregation
//! - [`model`]: configuration, parameters, forward pass, checkpoints
//! - [`trainer`]: toy training loop and evaluation
//! - [`commands`]: the operations behind the `get` binary

pub mod commands;
pub mod edsa;
pub mod error;
pub mod events;
pub mod group_token;
pub mod gta;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use events::{EventStream, MotionModel};
pub use model::{GetConfig, ModelParams};
pub use tensor::Tensor;
