//! Synthetic occupancy world, toy base network and the temporal correction
//! plug-in, with training, evaluation metrics and checkpoints.

pub mod base;
pub mod checkpoint;
pub mod episode_io;
pub mod error;
pub mod grid;
pub mod loss;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod occlinker;
pub mod optim;
pub mod taxonomy;
pub mod training;
pub mod verify;
pub mod world;

pub use base::{BaseConfig, BaseNet, BaseShape};
pub use error::{CoreError, Result};
pub use grid::LabelGrid;
pub use occlinker::{Aggregation, OccLinker, PluginConfig, TemporalWindow};
pub use taxonomy::{ClassTaxonomy, Group, Tag};
pub use world::{generate_episode, Episode, SceneSpec};
