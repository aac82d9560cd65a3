//! Backbones, parallel ensemble, training loop and checkpoints for binary
//! aerial-scene classifiers, on a small CPU autograd engine.

mod arch;
pub mod checkpoint;
pub mod data;
pub mod graph;
pub mod kernels;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use model::{
    build_model, build_network, build_parallel_ensemble, imagenet_parameter_count, Architecture, FusionMode,
    ModelError, ModelHandle, ModelSpec, NetworkSpec, ParallelEnsembleSpec, WeightsFailure, WeightsSource,
};
pub use tensor::Tensor;
