//! Dense tensors and the reverse-mode engine behind the model.
//!
//! The free functions here are forward-only conveniences over [`Graph`];
//! differentiable code builds on the graph methods directly.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use graph::{Graph, MacLedger, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{DType, Scalar, Tensor};

use crate::error::{Error, Result};

/// Forward-only `a · b` for 2-D tensors.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let mut g = Graph::inference();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(va, vb)?;
    Ok(g.value(out).clone())
}

/// Forward-only RMSNorm along the trailing dimension.
pub fn rmsnorm<S: Scalar>(x: &Tensor<S>, gamma: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
    let mut g = Graph::inference();
    let (vx, vg) = (g.constant(x.clone()), g.constant(gamma.clone()));
    let out = g.rmsnorm(vx, vg, eps)?;
    Ok(g.value(out).clone())
}

pub fn sigmoid<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let data = x.data().iter().map(|&v| kernels::sigmoid(v)).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

pub fn silu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let data = x.data().iter().map(|&v| kernels::silu(v)).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Differentiable SwiGLU `down · (silu(act · x) ⊙ (up · x))` on rows of `x`.
pub fn swiglu_graph<S: Scalar>(g: &mut Graph<S>, x: Var, up: Var, act: Var, down: Var) -> Result<Var> {
    let u = g.linear(x, up)?;
    let a = g.linear(x, act)?;
    let a = g.silu(a);
    let h = g.mul(a, u)?;
    g.linear(h, down)
}

/// Forward-only SwiGLU. Weights are stored `[out × in]`.
pub fn swiglu<S: Scalar>(
    x: &Tensor<S>,
    w_up: &Tensor<S>,
    w_act: &Tensor<S>,
    w_down: &Tensor<S>,
) -> Result<Tensor<S>> {
    let mut g = Graph::inference();
    let vx = g.constant(x.clone());
    let (u, a, d) = (
        g.constant(w_up.clone()),
        g.constant(w_act.clone()),
        g.constant(w_down.clone()),
    );
    if w_up.shape() != w_act.shape() {
        return Err(Error::shape("swiglu", w_up.shape(), w_act.shape()));
    }
    let out = swiglu_graph(&mut g, vx, u, a, d)?;
    Ok(g.value(out).clone())
}

/// Mean token cross-entropy of `logits[T × V]` against `targets`.
pub fn softmax_cross_entropy<S: Scalar>(logits: &Tensor<S>, targets: &[usize]) -> Result<f64> {
    let mut g = Graph::inference();
    let vl = g.constant(logits.clone());
    let loss = g.cross_entropy(vl, targets)?;
    Ok(g.value(loss).data()[0].as_f64())
}
