//! Receptive fields and output sizes, in exact rational arithmetic.
//!
//! Along one axis, output sample `i''` (one-based) of a block depends on the
//! input samples `i` with
//!
//! ```text
//! |i - α (i'' - 1) - β| <= (Δ - 1) / 2
//! ```
//!
//! where `α` is the stride, `β` the offset and `Δ` the receptive field size.

use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Q = Ratio<i64>;

fn q(n: i64) -> Q {
    Q::from_integer(n)
}

/// `(α, β, Δ)` along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RfTransform {
    pub alpha: Q,
    pub beta: Q,
    pub delta: Q,
}

impl RfTransform {
    pub fn new(alpha: Q, beta: Q, delta: Q) -> Result<Self> {
        if alpha <= q(0) {
            return Err(Error::InvalidParam(format!(
                "receptive field stride must be positive, got {alpha}"
            )));
        }
        Ok(RfTransform { alpha, beta, delta })
    }

    pub fn identity() -> Self {
        RfTransform {
            alpha: q(1),
            beta: q(1),
            delta: q(1),
        }
    }

    /// Input interval `[lo, hi]` seen by output `i''` (one-based).
    pub fn interval(&self, out: i64) -> (Q, Q) {
        let centre = self.alpha * q(out - 1) + self.beta;
        let half = (self.delta - q(1)) / q(2);
        (centre - half, centre + half)
    }

    pub fn contains(&self, out: i64, input: i64) -> bool {
        let (lo, hi) = self.interval(out);
        lo <= q(input) && q(input) <= hi
    }
}

impl fmt::Display for RfTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(α={}, β={}, Δ={})", self.alpha, self.beta, self.delta)
    }
}

/// Size, stride and padding of a filter-like block along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub size: usize,
    pub stride: usize,
    /// `(P^-, P^+)`.
    pub pad: (usize, usize),
}

impl FilterSpec {
    pub fn new(size: usize, stride: usize, pad: (usize, usize)) -> Result<Self> {
        if size == 0 || stride == 0 {
            return Err(Error::InvalidParam(format!(
                "filter size {size} and stride {stride} must be positive"
            )));
        }
        Ok(FilterSpec { size, stride, pad })
    }
}

/// `α = S`, `β = (H' + 1)/2 - P^-`, `Δ = H'`.
pub fn rf_of_filter(spec: FilterSpec) -> RfTransform {
    RfTransform {
        alpha: q(spec.stride as i64),
        beta: Q::new(spec.size as i64 + 1, 2) - q(spec.pad.0 as i64),
        delta: q(spec.size as i64),
    }
}

/// `H'' = floor((H - H' + P^- + P^+)/S) + 1`.
pub fn output_size_filter(h: usize, spec: FilterSpec) -> Result<usize> {
    let padded = h + spec.pad.0 + spec.pad.1;
    if padded < spec.size {
        return Err(Error::InputTooSmall(format!(
            "padded input {padded} is smaller than filter {}",
            spec.size
        )));
    }
    Ok((padded - spec.size) / spec.stride + 1)
}

/// Receptive field of a convolution transpose with upsampling `U`, top crop
/// `C^-` and filter size `H'`:
/// `α = 1/U`, `β = (2C^- - H' + 1)/(2U) + 1`, `Δ = (H' - 1)/U + 1`.
pub fn rf_of_convt(upsample: usize, crop_lo: usize, size: usize) -> Result<RfTransform> {
    if upsample == 0 || size == 0 {
        return Err(Error::InvalidParam(format!(
            "upsampling {upsample} and filter size {size} must be positive"
        )));
    }
    let u = upsample as i64;
    Ok(RfTransform {
        alpha: Q::new(1, u),
        beta: Q::new(2 * crop_lo as i64 - size as i64 + 1, 2 * u) + q(1),
        delta: Q::new(size as i64 - 1, u) + q(1),
    })
}

/// `H'' = U (H - 1) + H' - C^- - C^+`.
pub fn output_size_convt(
    h: usize,
    upsample: usize,
    crop: (usize, usize),
    size: usize,
) -> Result<usize> {
    if h == 0 || upsample == 0 || size == 0 {
        return Err(Error::InvalidParam(
            "sizes and upsampling must be positive".into(),
        ));
    }
    let full = upsample * (h - 1) + size;
    if full <= crop.0 + crop.1 {
        return Err(Error::InvalidParam(format!(
            "crops {} + {} leave no output from {full} samples",
            crop.0, crop.1
        )));
    }
    Ok(full - crop.0 - crop.1)
}

/// Receptive field of the transposed block:
/// `(1/α, (1 + α - β)/α, (Δ + α - 1)/α)`.
pub fn rf_transpose(t: RfTransform) -> RfTransform {
    RfTransform {
        alpha: q(1) / t.alpha,
        beta: (q(1) + t.alpha - t.beta) / t.alpha,
        delta: (t.delta + t.alpha - q(1)) / t.alpha,
    }
}

/// Receptive field of `g ∘ f`, where `f` is applied first.
pub fn rf_compose(f: RfTransform, g: RfTransform) -> RfTransform {
    RfTransform {
        alpha: f.alpha * g.alpha,
        beta: f.alpha * (g.beta - q(1)) + f.beta,
        delta: f.alpha * (g.delta - q(1)) + f.delta,
    }
}

/// Smallest receptive field enclosing both, for branches that merge.
/// Requires equal strides.
pub fn rf_overlay(f: RfTransform, g: RfTransform) -> Result<RfTransform> {
    if f.alpha != g.alpha {
        return Err(Error::InvalidParam(format!(
            "cannot overlay receptive fields with strides {} and {}",
            f.alpha, g.alpha
        )));
    }
    let half = |t: &RfTransform| (t.delta - q(1)) / q(2);
    let a = (f.beta - half(&f)).min(g.beta - half(&g));
    let b = (f.beta + half(&f)).max(g.beta + half(&g));
    Ok(RfTransform {
        alpha: f.alpha,
        beta: (a + b) / q(2),
        delta: b - a + q(1),
    })
}

/// Equivalent padding and output size of a Caffe pooling layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaffePool {
    pub pad: (usize, usize),
    pub output: usize,
}

/// Maps Caffe's symmetric pooling pad `P` to explicit pads
/// `(P, min(P + S - 1, H' - 1))` and computes Caffe's output size: the ceil
/// form of the filter formula, lowered by one when the last window would
/// start past the last input sample.
pub fn caffe_pool_equiv(h: usize, size: usize, stride: usize, pad: usize) -> Result<CaffePool> {
    if size == 0 || stride == 0 || h == 0 {
        return Err(Error::InvalidParam(
            "pool size, stride and input must be positive".into(),
        ));
    }
    if pad > size - 1 {
        return Err(Error::InvalidParam(format!(
            "Caffe pooling pad {pad} exceeds window {size} minus one"
        )));
    }
    if h + 2 * pad < size {
        return Err(Error::InputTooSmall(format!(
            "padded input {} is smaller than window {size}",
            h + 2 * pad
        )));
    }
    let span = h + 2 * pad - size;
    let mut output = span.div_ceil(stride) + 1;
    if stride * (output - 1) + 1 > h + pad {
        output -= 1;
    }
    Ok(CaffePool {
        pad: (pad, (pad + stride - 1).min(size - 1)),
        output,
    })
}
