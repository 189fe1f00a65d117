//! Dense tensors, the layer primitives of the instance classifier, seeded
//! random streams, and a finite-difference gradient oracle.

mod finite_diff;
pub mod gemm;
mod layers;
mod rng;
mod tensor;

pub use finite_diff::{finite_difference_gradient, max_relative_error};
pub use layers::{layer_backward, layer_forward, LayerCache, LayerSpec, Mode};
pub use rng::{Prng, Purpose, StreamKey};
pub use tensor::Tensor;
