//! Layer-wise channel pruning: architectures and their prune-flag
//! topology, pruning profiles, channel metrics, physical network
//! reconstruction, fine-tuning and the search rewards.

pub mod data;
mod error;
pub mod metrics;
pub mod model;
pub mod netzoo;
pub mod profiles;
pub mod pruning;
pub mod rewards;
pub mod train;

pub use error::{Error, Result};
pub use model::{Mode, TrainedNet};
pub use netzoo::{Arch, FlagId, InputShape, NetworkSpec};
pub use profiles::{MaskSet, Profile};
