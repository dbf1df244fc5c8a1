//! Numeric substrate for the flow post-training lab.
//!
//! A deliberately small toolkit: dense 64-bit tensors, a tape-based
//! reverse-mode autodiff [`Graph`] over row-major matrices, a named
//! [`ParamStore`], bias-corrected [`Adam`], and counter-based random
//! streams ([`RngStream`]) derived from `(seed, stage, group, member)`.
//!
//! ```
//! use diffcore::{Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::new();
//! store.insert("x", Tensor::scalar(3.0));
//! let mut g = Graph::new();
//! let x = g.param(&store, "x").unwrap();
//! let y = g.mul(x, x);
//! let y = g.sum(y);
//! g.backward(y, &mut store).unwrap();
//! assert_eq!(store.get("x").unwrap().grad().unwrap()[0], 6.0);
//! ```

mod adam;
mod error;
mod graph;
mod rng;
mod store;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{DiffError, Result};
pub use graph::{Gradients, Graph, Var};
pub use rng::RngStream;
pub use store::ParamStore;
pub use tensor::Tensor;
