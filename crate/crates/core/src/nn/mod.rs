//! Minimal deterministic CNN engine: layers with analytic backward passes,
//! MSE loss, SGD/Adam, and finite-difference gradient checking.

pub mod gradcheck;
pub mod layer;
pub mod loss;
pub mod model;
pub mod optim;
pub mod reduce;

pub use layer::{ConvSpec, LayerSpec, Mode, PoolSpec, ShapeError};
pub use loss::{mse_loss, mse_partial};
pub use model::{propagate_shapes, ForwardCache, Gradients, Model, ModelError};
pub use optim::{OptimError, OptimizerConfig, OptimizerState};
pub use reduce::{BatchReduce, LocalReduce};
