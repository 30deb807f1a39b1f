//! The 2.5D classifier: configuration, parameters, forward/backward passes
//! and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod network;
pub mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{GatingSite, ModelConfig, Orientation};
pub use network::{
    backward, classify, cross_entropy, encode_2d, encode_3d, forward, forward_with, fuse_concat, score_gradient,
    AttentionState, BackwardRequest, Classification, FeatureStack, Gradients, Override,
};
pub use params::{ConvParams, Encoder2dParams, HeadParams, Params, Stage3dParams};
