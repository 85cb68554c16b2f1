//! Dense linear algebra, dense layers with hand-written backward passes, Adam
//! and the seeded RNG used throughout the crate.

mod adam;
mod linear;
mod matrix;
mod rng;

pub use adam::{AdamConfig, AdamState, ParamTensor};
pub use linear::{Activation, LinearGrad, LinearLayer, Mlp, MlpBatchCache, MlpCache};
pub use matrix::{axpy, dot, squared_distance, squared_norm, Matrix};
pub use rng::Rng;
