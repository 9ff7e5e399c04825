//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records operations as they are applied; calling
//! [`Graph::backward`] on a scalar result propagates gradients back to every
//! parameter leaf. Graphs are single-use: build one per forward pass.
//!
//! ```
//! use autodiff::{Array, Graph};
//!
//! let mut g = Graph::new();
//! let x = g.param(Array::vector(vec![1.0, 2.0, 3.0]));
//! let sq = g.square(x);
//! let loss = g.mean(sq);
//! let grads = g.backward(loss).unwrap();
//! // d/dx mean(x^2) = 2x / n
//! let expected = [2.0 / 3.0, 4.0 / 3.0, 2.0];
//! for (a, b) in grads.get(x).unwrap().data().iter().zip(expected) {
//!     assert!((a - b).abs() < 1e-15);
//! }
//! ```
//!
//! Besides the graph this crate provides [`Adam`], a named [`ParamSet`]
//! and [`gradcheck`] for finite-difference verification.

mod adam;
mod array;
mod error;
mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod sparse;

pub use adam::{Adam, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS};
pub use array::{Array, MAX_RANK};
pub use error::{AdError, AdResult};
pub use gradcheck::{gradcheck, relative_error, GradCheckReport, ParamCheck, RELATIVE_FLOOR};
pub use graph::{attention_probs_into, CustomOp, Gradients, Graph, Var};
pub use params::{BoundParams, ParamSet};
pub use sparse::CsrMatrix;
