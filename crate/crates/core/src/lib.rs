//! Dual-head pyramid segmentation transformer built on a small
//! reverse-mode autodiff kernel, with analytic cost accounting, a
//! synthetic RGB-D scene generator and the assistive decision engine that
//! turns aggregated segmentations plus depth into one feedback event per
//! cycle.
//!
//! Every numeric type is generic over [`Scalar`]; the aliases below fix
//! the two precisions in use: `f32` for training and inference, `f64` for
//! finite-difference checks.

pub mod autograd;
pub mod checkpoint;
pub mod classes;
pub mod config;
pub mod confusion;
pub mod decision;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod netpbm;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Graph, Var};
pub use checkpoint::Checkpoint;
pub use config::{ModelSize, RunConfig};
pub use decision::{DecisionConfig, DecisionEngine, EventRecord, FeedbackEvent, FeedbackKind};
pub use decoder::{DualSegmentation, Fusion, ModelConfig, Trans4Trans, TpmConfig};
pub use encoder::{EncoderConfig, FeaturePyramid};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use synth::{ClassSets, Scene, SceneSpec};
pub use tensor::Tensor;
pub use train::TrainConfig;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Model32 = Trans4Trans<f32>;
pub type Model64 = Trans4Trans<f64>;
