//! Learned components of the depth-prompting pipeline: a relative-depth
//! backbone that can be bias-tuned, the depth prompt encoder and affinity
//! decoder, training losses, and the composed forward/backward pass.
//!
//! The networks are deliberately small (CPU, `f32`, im2col + GEMM
//! convolutions) but keep the interfaces of their full-scale counterparts.

pub mod block;
pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod foundation;
pub mod loss;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod prompt;
pub mod pyramid;
pub mod tensor;

pub use checkpoint::{Checkpoint, Manifest};
pub use error::{NetError, Result};
pub use foundation::{apply_bias_tuning, predict_relative, BackboneConfig, FoundationModel};
pub use loss::{loss_comb, loss_si, loss_total, LossConfig, LossValue};
pub use optim::{Adam, AdamConfig, StepSchedule};
pub use params::{ParamKind, ParamStore};
pub use pipeline::{
    batch_gradient, forward_pipeline, forward_pipeline_with, relative_gradient, sample_gradient, PipelineConfig,
    PipelineOutput, SampleGradient,
};
pub use prompt::{decode_affinity, encode_prompt, PromptConfig, PromptModule};
pub use pyramid::FeaturePyramid;
pub use tensor::Tensor;
