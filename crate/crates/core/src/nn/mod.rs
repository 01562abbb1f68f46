//! Tiny f64 autodiff engine with the layers and optimizers used by the
//! projection denoiser and the latent refiner.

pub mod graph;
pub mod layers;
pub mod ops2d;
pub mod optim;

pub use graph::{Graph, Var};
pub use layers::ParamSet;
