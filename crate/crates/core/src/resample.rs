//! Bilinear grid resampling.
//!
//! A grid `g` of shape `2 x H' x W' x N` gives, for every output pixel, a
//! vertical (`g[0]`) and horizontal (`g[1]`) coordinate in the normalized
//! frame `[-1, 1]` spanning the input. Coordinate `g` along an axis of length
//! `H` sits at one-based pixel position `v = (H - 1)/2 · g + (H + 1)/2`, so
//! `-1` and `1` land on the first and last samples, and the output mixes the
//! input with weights `max(0, 1 - |v - i|)`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Pixel position of normalized coordinate `g` on an axis of length `len`.
#[inline]
fn position<T: Scalar>(g: T, len: usize) -> (T, T) {
    let alpha = T::of((len as f64 - 1.0) / 2.0);
    (alpha * g + T::of((len as f64 + 1.0) / 2.0), alpha)
}

/// Input samples with nonzero weight around one-based position `v`, as
/// `(zero-based index, weight, d weight / d v)`.
fn taps<T: Scalar>(v: T, len: usize) -> impl Iterator<Item = (usize, T, T)> {
    let lo = v.floor().to_f64().unwrap_or(f64::NAN);
    let candidates = if lo.is_finite() {
        [lo - 1.0, lo, lo + 1.0]
    } else {
        [f64::NAN; 3]
    };
    candidates.into_iter().filter_map(move |i| {
        if !(i >= 1.0 && i <= len as f64) {
            return None;
        }
        let t = v - T::of(i);
        let at = t.abs();
        if at >= T::one() {
            return None;
        }
        // d/dv max(0, 1 - |v - i|) with sign(0) = 0
        let slope = if t > T::zero() {
            -T::one()
        } else if t < T::zero() {
            T::one()
        } else {
            T::zero()
        };
        Some((i as usize - 1, T::one() - at, slope))
    })
}

fn check<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Result<Shape> {
    let (xs, gs) = (x.shape(), g.shape());
    if gs.h() != 2 || gs.n() != xs.n() {
        return Err(Error::ShapeMismatch(format!(
            "sampling grid must be 2 x H' x W' x {}, got {gs}",
            xs.n()
        )));
    }
    Ok(Shape::new(gs.w(), gs.c(), xs.c(), xs.n()))
}

/// Uniform grid over the full input frame with `h x w` output samples,
/// replicated `n` times. At the input's own size it reproduces the input;
/// at any other size it resizes it.
pub fn identity_grid<T: Scalar>(h: usize, w: usize, n: usize) -> Tensor<T> {
    let coord = |k: usize, len: usize| {
        if len == 1 {
            0.0
        } else {
            -1.0 + 2.0 * k as f64 / (len - 1) as f64
        }
    };
    Tensor::from_fn(Shape::new(2, h, w, n), |a, i, j, _| {
        T::of(if a == 0 { coord(i, h) } else { coord(j, w) })
    })
}

pub fn bilinear_forward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let out = check(x, g)?;
    let xs = x.shape();
    let mut y = Tensor::zeros(out);
    for n in 0..out.n() {
        for j in 0..out.w() {
            for i in 0..out.h() {
                let (v, _) = position(g.at(0, i, j, n), xs.h());
                let (u, _) = position(g.at(1, i, j, n), xs.w());
                let rows: Vec<_> = taps(v, xs.h()).collect();
                for (sj, wu, _) in taps(u, xs.w()) {
                    for &(si, wv, _) in &rows {
                        let wgt = wu * wv;
                        for c in 0..out.c() {
                            *y.at_mut(i, j, c, n) += wgt * x.at(si, sj, c, n);
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Returns `(dz/dx, dz/dg)`.
pub fn bilinear_backward<T: Scalar>(
    x: &Tensor<T>,
    g: &Tensor<T>,
    dzdy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let out = check(x, g)?;
    dzdy.expect_shape(out, "bilinear backward dz/dy")?;
    let xs = x.shape();
    let mut dx = Tensor::zeros(xs);
    let mut dg = Tensor::zeros(g.shape());
    for n in 0..out.n() {
        for j in 0..out.w() {
            for i in 0..out.h() {
                let (v, av) = position(g.at(0, i, j, n), xs.h());
                let (u, au) = position(g.at(1, i, j, n), xs.w());
                let rows: Vec<_> = taps(v, xs.h()).collect();
                let (mut gv, mut gu) = (T::zero(), T::zero());
                for (sj, wu, su) in taps(u, xs.w()) {
                    for &(si, wv, sv) in &rows {
                        for c in 0..out.c() {
                            let p = dzdy.at(i, j, c, n);
                            let xv = x.at(si, sj, c, n);
                            *dx.at_mut(si, sj, c, n) += p * wv * wu;
                            gv += p * xv * sv * wu;
                            gu += p * xv * wv * su;
                        }
                    }
                }
                *dg.at_mut(0, i, j, n) = av * gv;
                *dg.at_mut(1, i, j, n) = au * gu;
            }
        }
    }
    Ok((dx, dg))
}
