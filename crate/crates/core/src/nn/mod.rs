//! Minimal neural-network toolkit over `candle-core`: a seeded parameter
//! store, the layer types the renderer and joint GAN need, Adam, and custom
//! CPU kernels for padded convolution.

mod adam;
mod layers;
pub mod ops;
mod store;

pub use adam::{Adam, AdamConfig};
pub use layers::{BatchNorm2d, Conv2d, ConvSpec, Linear};
pub use ops::Padding;
pub use store::{Init, VarPath, VarStore};
pub(crate) use store::scalar_f64;
