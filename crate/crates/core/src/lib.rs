//! Focused linear attention kernels and the routines that check their
//! mathematical properties.
//!
//! The crate is `no_std` (it needs `alloc`) and has no I/O. It provides:
//!
//! - [`linalg`]: dense row-major matrices, products, row softmax, and
//!   [`svd::numerical_rank`] for measuring attention-map rank.
//! - [`attention`]: softmax attention, linear attention in reordered
//!   `Q(KᵀV)` form, the focused map `f_p(ReLU(x))`, and focused linear
//!   attention (the linear term plus a depthwise convolution of `V`).
//! - [`dwc`]: the depthwise convolution over the token grid and its dense
//!   `N×N` matrix.
//! - [`diagnostics`]: inner-product scans of the focused map, rank scans,
//!   equivalent attention matrices and entropy-based sharpness.
//! - [`gradients`]: hand-written VJPs checked against central differences.
//! - [`kernels`]: the precision-generic slice kernels used by all of the
//!   above and by the `f32` benchmark path.
//!
//! All verification paths run in `f64`. Random instances come from
//! [`rng::Streams`], so a seed fixes every matrix bit for bit.
//!
//! ```
//! use fla_core::attention::{linear_attention, FeatureMap};
//! use fla_core::rng::Streams;
//!
//! let (q, k, v) = Streams::new(42).qkv(0, 16, 4);
//! let out = linear_attention(&q, &k, &v, FeatureMap::Focused(3.0), 1e-6, false).unwrap();
//! assert_eq!(out.output.shape(), (16, 4));
//! ```

#![cfg_attr(not(test), no_std)]
#![allow(clippy::too_many_arguments)]
// `!(x >= 0.0)` style tests are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod attention;
pub mod diagnostics;
pub mod dwc;
pub mod error;
pub mod gradients;
pub mod kernels;
pub mod linalg;
pub mod rng;
pub mod svd;

pub use attention::{AttentionConfig, AttentionResult, FeatureMap, Normalization};
pub use dwc::{DwcKernel, Grid};
pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
