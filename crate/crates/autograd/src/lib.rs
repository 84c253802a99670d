//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records operations eagerly as they run and replays them
//! backwards in [`Graph::backward`]. Trainable tensors live in a
//! [`ParamStore`] that graphs borrow, so many graphs (one per scene, say)
//! can evaluate the same parameters concurrently and have their
//! [`Gradients`] merged afterwards in a fixed order.
//!
//! ```
//! use ded_autograd::{Graph, Mat, ParamStore};
//!
//! let mut store = ParamStore::new();
//! let w = store.add("w", Mat::from_rows(&[[2.0], [-1.0]]));
//! let mut g = Graph::new(&store);
//! let x = g.constant(Mat::from_rows(&[[1.0, 3.0]]));
//! let wv = g.param(w);
//! let y = g.matmul(x, wv);
//! let loss = g.sum_squares(y);
//! let grads = g.backward(loss);
//! // d(xw)^2/dw = 2 (xw) x^T = 2 * (-1) * [1, 3]
//! assert_eq!(grads.get(w).unwrap().data(), &[-2.0, -6.0]);
//! ```

mod adam;
mod graph;
mod mat;
mod params;

pub use adam::Adam;
pub use graph::{Graph, Var};
pub use mat::Mat;
pub use params::{Gradients, ParamId, ParamStore};
