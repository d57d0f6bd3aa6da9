//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! Backward rules are expressed with the same differentiable primitives as
//! the forward pass, so `grad(.., create_graph = true)` returns tensors that
//! can be differentiated again. [`Tensor::stop_gradient`] cuts the graph.

mod autodiff;
mod kernels;
mod ops;
mod params;
mod tensor;

pub use autodiff::grad;
pub use params::{Group, ParamEntry, ParamRecord, ParamSet, ParamValues};
pub use tensor::{grad_enabled, no_grad, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    BadAxis { op: &'static str, axis: isize, shape: Vec<usize> },
    #[error("{op}: factor {factor} does not divide spatial dims of {shape:?}")]
    BadFactor { op: &'static str, factor: usize, shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{0}: empty input list")]
    Empty(&'static str),
    #[error("gradient requires a single-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter override has no value for leaf `{0}`")]
    MissingLeaf(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateLeaf(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x(v: f64) -> Tensor {
        Tensor::param(vec![v], &[1]).unwrap()
    }

    #[test]
    fn first_derivative_of_square() {
        let a = x(3.0);
        let g = grad(&a.mul(&a).unwrap(), &[a.clone()], false).unwrap();
        assert_eq!(g[0].item(), 6.0);
    }

    #[test]
    fn second_derivative_of_cube() {
        let a = x(2.0);
        let cube = a.mul(&a).unwrap().mul(&a).unwrap();
        let g = grad(&cube, &[a.clone()], true).unwrap();
        assert_eq!(g[0].item(), 12.0);
        let gg = grad(&g[0], &[a.clone()], false).unwrap();
        assert_eq!(gg[0].item(), 12.0);
    }

    #[test]
    fn stop_gradient_detaches_one_factor() {
        let a = x(3.0);
        let y = a.stop_gradient().mul(&a).unwrap();
        assert_eq!(grad(&y, &[a.clone()], false).unwrap()[0].item(), 3.0);
        let z = a.mul(&a).unwrap().stop_gradient();
        let g = grad(&z, &[a.clone()], false).unwrap()[0].item();
        assert_eq!(g.to_bits(), 0.0f64.to_bits());
        let v = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        assert_eq!(v.stop_gradient().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let a = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(grad(&a, &[a.clone()], false), Err(GraphError::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let a = x(1.0);
        let b = Tensor::param(vec![1.0, 1.0], &[2]).unwrap();
        let g = grad(&a.scale(2.0), &[b], false).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn no_grad_produces_constants() {
        let a = x(1.0);
        let y = no_grad(|| a.scale(2.0));
        assert!(!y.requires_grad());
        assert!(grad_enabled());
    }
}
