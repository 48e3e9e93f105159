//! Label-guided self-distillation for a tiny anchor-free object detector.
//!
//! The crate carries its own small reverse-mode autodiff ([`graph`]), a
//! synthetic shapes dataset ([`scene`]), the student detector
//! ([`detector`]), the knowledge-generating modules that exist only at
//! training time ([`encoder`], [`adapter`], [`mapper`]), and the training
//! and evaluation drivers.

pub mod adapter;
pub mod cli;
pub mod config;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod mapper;
pub mod model;
pub mod numeric;
pub mod params;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{ParamStore, SgdConfig};
pub use tensor::Tensor;
