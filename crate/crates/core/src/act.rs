//! Elementwise activations.

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `dz/dy` through where `x > 0`; the kink at zero gets zero.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dzdy: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(dzdy, |v, p| if v > T::zero() { p } else { T::zero() })
}

/// `1 / (1 + e^{-x})`, evaluated without overflow at either tail.
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid)
}

/// Uses the forward output: `dz/dx = dz/dy · y (1 - y)`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, dzdy: &Tensor<T>) -> Result<Tensor<T>> {
    y.zip_map(dzdy, |s, p| p * s * (T::one() - s))
}
