//! Minimal deterministic tensor/autodiff engine: exactly the layers the
//! networks need, plus the Adam optimizer.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{check_layer, random_tensor};
pub use layers::{Cache, EngineError, Layer, LayerSpec, Param, LAYERNORM_EPS};
pub use tensor::Tensor;
