//! Minimal reverse-mode differentiable array engine: exactly the operations
//! the motion-transfer model and the recognition embedder need.

mod array;
mod graph;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
mod params;

pub use array::Array;
pub use graph::{Binary, Graph, Resample, Unary, Var};
pub use kernels::{grid_sample_forward, ConvGeom, CoordMap};
pub use params::{sgd_step, Gradients, Param, ParamId, ParamStore, Session, Sgd};

/// No-grad bilinear warp of a `c x h x w` array by a `2 x h x w` flow.
pub fn warp(input: &Array, flow: &Array) -> crate::Result<Array> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let f = g.constant(flow.clone());
    let y = g.grid_sample(x, f)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests;
