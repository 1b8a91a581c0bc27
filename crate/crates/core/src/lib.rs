pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod scenes;
pub mod tensor;
pub mod train;

mod conv;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::RunConfig;
pub use error::{CheckpointError, ConfigError, Error, Result};
pub use graph::{Graph, Var};
pub use image::ImageBuffer;
pub use model::{Ablation, NetworkConfig, RidNet};
pub use tensor::{Scalar, Tensor};
pub use train::{train, TrainConfig, TrainEvent};
