//! Lifelong multi-domain segmentation with per-domain batch normalization.
//!
//! A single encoder-decoder network shares its convolution filters across
//! every domain (scanner, protocol, synthetic transform) while each domain
//! owns a complete set of BN parameters and running statistics. New domains
//! are added by picking the closest stored BN set, cloning it and fine-tuning
//! only the clone, which leaves every earlier domain bit-for-bit unchanged.
//!
//! The numeric core is generic over [`Scalar`] (`f32` and `f64`); the type
//! aliases at the crate root name the two concrete instantiations.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod lifelong;
pub mod metrics;
pub mod norm;
pub mod ops;
pub mod optim;
pub mod preproc;
pub mod scalar;
pub mod segnet;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use norm::{DomainBnBank, DomainId, Mode};
pub use scalar::Scalar;
pub use segnet::{SegNet, SegNetConfig};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type SegNet32 = SegNet<f32>;
pub type SegNet64 = SegNet<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
