//! Slice-level kernels behind the autodiff graph.
//!
//! Each kernel works on flat row-major buffers with explicit dimensions so the
//! graph can keep ownership of values and gradients.

pub mod activation;
pub mod conv;
pub mod pool;
pub mod upsample;
