//! Inference engine and `/v1` HTTP service behind the `wr` binary.

pub mod infer;
pub mod service;

pub use infer::{Engine, Guidance, Rendered};
pub use service::{router, ServiceConfig, ServiceError};
