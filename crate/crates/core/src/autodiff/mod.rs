//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation evaluates eagerly, appends a node
//! holding its value and whatever it needs for the backward rule, and returns
//! a [`Var`] handle. [`Graph::backward`] walks the tape once in reverse.
//!
//! ```
//! use svs_core::autodiff::Graph;
//! use svs_core::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.parameter(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod graph;
mod kernels;

pub use graph::{Graph, GraphError, Var, LAYER_NORM_EPS};
