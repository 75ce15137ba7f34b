#![no_std]
#![doc = include_str!("../README.md")]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod data;
pub mod decoding;
pub mod encoder;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod lm;
pub mod metrics;
pub mod mapping;
pub mod param;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod training;
mod transformer;

pub use autodiff::{Gradients, Graph, ParamRef, Var};
pub use error::{Error, Result};
pub use param::{HasParams, ParamId, ParamSet, Parameter};
pub use real::Real;
pub use tensor::Tensor;
