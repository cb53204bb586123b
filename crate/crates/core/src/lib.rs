//! Stereo waterdrop removal with row-wise dilated attention.

pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod container;
pub mod conv;
pub mod decoder;
pub mod disparity;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rda;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod variant;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use conv::ConvGeom;
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use model::{ModelConfig, StereoNet, StereoOutput};
pub use params::ParamStore;
pub use synth::{SceneSpec, StereoSample};
pub use tensor::{Real, Tensor};
pub use variant::VariantSpec;
