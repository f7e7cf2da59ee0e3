//! Efficient blocks, parallel redundant modules and the U-shaped model.

mod block;
mod config;
mod layers;
mod model;

pub use block::{Branch, EfficientBlock, Prm};
pub use config::{
    ArchitectureDescriptor, BranchState, EfficientBlockSpec, Kernel, ModelConfig, Variant, KERNELS_4, KERNELS_7,
    SQUEEZE_RATIO,
};
pub use layers::{Conv, ConvNormAct, Norm, Param, ParamFactory, UpConv};
pub use model::{BranchRef, DecoderStage, EncoderStage, ForwardOutputs, Network, ParamCount};
