//! CPU transformer inference kernels.
//!
//! The crate is `no_std` (with `alloc`) so the numeric core can be embedded
//! anywhere; timing, IO and the command line live in the `slimfer` crate.
//!
//! * [`tensor`]: dense f32 tensors, matmul, softmax, INT8 row quantization and
//!   the hybrid INT8/f32 matmul.
//! * [`attention`]: naive, slim (query-row blocked) and flash-style (tiled,
//!   online softmax) attention plus the single-query decode path.
//! * [`kvcache`]: per-(token, head) scaled INT8 KV cache and the cache size
//!   planner.
//! * [`model`]: a Llama-style toy decoder with synthetic seeded weights.
//! * [`distributed`]: tensor-parallel decode over an instrumented in-process
//!   transport.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod distributed;
pub mod error;
pub mod kvcache;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{QuantRowsI8, QuantRowsView, Tensor};
