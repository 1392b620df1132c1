//! Multi-view depth-image point-cloud classification.
//!
//! The pipeline renders a point cloud into orthographic depth images, runs a
//! shared residual backbone over every view, merges views by element-wise
//! max and classifies with a global-average branch and a multi-scale strip
//! pooling branch. Training-time occlusion and density defects push the
//! model towards features that survive the synthetic-to-real gap.
//!
//! The tensor engine is generic over the element type (see [`Scalar`]);
//! training runs in `f32` and gradient checks in `f64`.

pub mod augment;
pub mod autograd;
pub mod eval;
pub mod geom;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod nn;
pub mod ops;
pub mod project;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = autograd::Graph<f32>;
pub type Graph64 = autograd::Graph<f64>;
pub type Model32 = model::DgMvp<f32>;
pub type Model64 = model::DgMvp<f64>;
