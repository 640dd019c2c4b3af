//! Wireframe-to-image translation: data handling, the joint
//! encoder/decoder renderer, its training objectives, the trainer,
//! evaluation metrics and the noise-to-pair joint GAN.

mod error;
pub mod joint_gan;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod trainer;
pub mod wireframe;

pub use error::{Error, Result};
