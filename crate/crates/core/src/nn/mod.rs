//! Minimal CPU autodiff engine: dense tensors, a reverse-mode tape, and the
//! handful of layers the models need.

mod adam;
mod graph;
pub(crate) mod kernels;
mod layers;
mod params;
mod tensor;


pub use adam::{Adam, AdamConfig};
pub use graph::{Gradients, Graph, Var};
pub use layers::{BatchNorm2d, Conv2d, ConvSpec, Init, Linear, Mode};
pub use params::{kaiming_uniform, lecun_uniform, ParamId, ParamStore};
pub use tensor::{Float, Tensor};
