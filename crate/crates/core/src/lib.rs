//! Selective state-space denoiser for two-person motion diffusion.
//!
//! The crate is organized bottom-up: [`tensor`] is a small reverse-mode
//! autodiff engine, [`kernels`] holds the precision-generic scan and GEMM
//! routines, and the model layers build on both.

pub mod astm;
pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod motion;
pub mod nn;
pub mod optim;
pub mod param;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
pub use param::{Init, Module, ParamFactory, Parameter};
pub use tensor::{grad_enabled, no_grad, Tensor};
