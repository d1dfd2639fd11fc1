//! Dense tensor arithmetic with define-by-run reverse-mode differentiation.
//!
//! ```
//! use mubert_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod check;
mod error;
mod graph;
mod real;
mod tensor;

pub use check::{
    analytic_gradients, evaluate, finite_diff_check, finite_diff_check_many, numeric_gradients,
    probe_weights, relative_error,
};
pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;

/// Row-wise softmax of a plain tensor, outside any graph.
pub fn softmax_rows<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let c = *t.shape().last().unwrap_or(&1);
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(c.max(1)) {
        graph::softmax_in_place(row);
    }
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}
