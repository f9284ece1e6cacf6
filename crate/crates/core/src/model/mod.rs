//! The toy transformer substrate with a gated delta path.

pub mod config;
pub mod forward;
pub mod gated;
pub mod gates;
pub mod weights;

pub use config::ModelConfig;
pub use forward::{backward, forward, ForwardCache, GradRequest, Grads, OutputGrads};
pub use gated::{
    model_forward, prefixed_embeddings, relative_error, DeltaModel, ExecutionMode, Gating, Input,
    Trace, WriteRecord,
};
pub use gates::{binarize, materialize_mask, sigmoid, sigmoid_prime, ste_gradient, GateGroup, GateSet, LayerGates};
pub use weights::{LayerMatrix, LayerWeights, Weights, FROZEN_MATRICES, PAD_TOKEN};
