//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Computations are recorded on a [`Graph`]. Gradients produced by
//! [`Graph::grad`] are themselves graph nodes, so they can be differentiated
//! again: gradient steps can sit inside a function whose gradient is taken,
//! which is what meta-gradients and Hessian-vector products need.
//!
//! ```
//! use autodiff::{grad, Graph, Tensor};
//!
//! let r = grad(|g, x| g.square(x), &[3.0]).unwrap();
//! assert_eq!(r.value, 9.0);
//! assert_eq!(r.grad, vec![6.0]);
//! ```

mod graph;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::{logsumexp, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("non-finite value produced by `{op}` at node {node}")]
    NonFinite { node: usize, op: &'static str },
    #[error("gradient requires a scalar output, got shape {shape:?}")]
    NotScalar { shape: (usize, usize) },
}

/// Value and gradient of a scalar function at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct GradResult {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Evaluates `f` at `theta` (passed as a column leaf) and returns `f(θ)` and `∇f(θ)`.
pub fn grad<F>(f: F, theta: &[f64]) -> Result<GradResult, AutodiffError>
where
    F: FnOnce(&mut Graph, Var) -> Var,
{
    let mut g = Graph::new();
    let x = g.leaf(Tensor::column(theta));
    let y = f(&mut g, x);
    let dx = g.grad(y, &[x])?[0];
    Ok(GradResult {
        value: g.item(y),
        grad: g.value(dx).data().to_vec(),
    })
}

/// Same contract as [`grad`], for functions whose bodies call [`Graph::grad`]
/// themselves. Because inner gradients are recorded as differentiable nodes,
/// the outer gradient contains the exact second-order terms.
pub fn grad_nested<F>(f: F, theta: &[f64]) -> Result<GradResult, AutodiffError>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let x = g.leaf(Tensor::column(theta));
    let y = f(&mut g, x)?;
    let dx = g.grad(y, &[x])?[0];
    Ok(GradResult {
        value: g.item(y),
        grad: g.value(dx).data().to_vec(),
    })
}

/// Hessian-vector product `∇²f(θ) · v` by double backpropagation.
pub fn hvp<F>(f: F, theta: &[f64], v: &[f64]) -> Result<Vec<f64>, AutodiffError>
where
    F: FnOnce(&mut Graph, Var) -> Var,
{
    assert_eq!(theta.len(), v.len(), "hvp direction has wrong length");
    let mut g = Graph::new();
    let x = g.leaf(Tensor::column(theta));
    let y = f(&mut g, x);
    let dx = g.grad(y, &[x])?[0];
    let dir = g.constant(Tensor::column(v));
    let gv = g.dot(dx, dir);
    let hv = g.grad(gv, &[x])?[0];
    Ok(g.value(hv).data().to_vec())
}
