//! Channel-level analysis and masked task-vector transfer between sibling
//! model checkpoints.
//!
//! The pipeline: record per-token module outputs of two sibling models on
//! identical inputs ([`dump`]), reduce them to per-channel activation
//! differences ([`stats`]), select the top-p% channels per ability and
//! aggregate them per source model ([`mask`]), then add the scaled task
//! vector only on the selected channel slices ([`merge`]). Task Arithmetic,
//! TIES and DARE are available as baselines. [`miniforward`] builds small
//! synthetic models with planted differences for closed-loop testing.

pub mod channel;
pub mod checkpoint;
pub mod dtype;
pub mod dump;
pub mod error;
pub mod mask;
pub mod merge;
pub mod miniforward;
pub mod rng;
pub mod stats;

pub use channel::{ChannelId, ChannelSpace, ModuleChannels};
pub use dtype::DType;
pub use error::{Error, Result};
