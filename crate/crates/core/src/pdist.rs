//! The p-distance comparison block.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

fn check<T: Scalar>(x: &Tensor<T>, xbar: &Tensor<T>, p: f64) -> Result<()> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::InvalidParam(format!(
            "p-distance needs p > 0, got {p}"
        )));
    }
    xbar.expect_shape(x.shape(), "p-distance second input")
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `y_ij = (Σ_d |x_ijd - x̄_ijd|^p)^{1/p}`, or the inner sum alone when
/// `no_root` is set. The output is `H x W x 1 x N`.
pub fn pdist_forward<T: Scalar>(
    x: &Tensor<T>,
    xbar: &Tensor<T>,
    p: f64,
    no_root: bool,
) -> Result<Tensor<T>> {
    check(x, xbar, p)?;
    let s = x.shape();
    let pt = T::of(p);
    Ok(Tensor::from_fn(
        Shape::new(s.h(), s.w(), 1, s.n()),
        |i, j, _, n| {
            let total: T = (0..s.c())
                .map(|d| {
                    let a = (x.at(i, j, d, n) - xbar.at(i, j, d, n)).abs();
                    if p == 1.0 {
                        a
                    } else if p == 2.0 {
                        a * a
                    } else {
                        a.powf(pt)
                    }
                })
                .sum();
            if no_root || p == 1.0 {
                total
            } else if p == 2.0 {
                total.sqrt()
            } else {
                total.powf(pt.recip())
            }
        },
    ))
}

/// Returns `(dz/dx, dz/dx̄)`, with `dz/dx̄ = -dz/dx`.
///
/// In the rooted form the derivative at coincident vectors (`y = 0`) is
/// taken to be zero.
pub fn pdist_backward<T: Scalar>(
    x: &Tensor<T>,
    xbar: &Tensor<T>,
    p: f64,
    no_root: bool,
    dzdy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let y = pdist_forward(x, xbar, p, no_root)?;
    dzdy.expect_shape(y.shape(), "p-distance backward dz/dy")?;
    let pt = T::of(p);
    let dx = Tensor::from_fn(x.shape(), |i, j, d, n| {
        let delta = x.at(i, j, d, n) - xbar.at(i, j, d, n);
        let g = dzdy.at(i, j, 0, n);
        if delta == T::zero() {
            return T::zero();
        }
        let yv = y.at(i, j, 0, n);
        match (no_root, p) {
            (_, 1.0) => g * sign(delta),
            (true, 2.0) => g * T::of(2.0) * delta,
            (true, _) => g * pt * delta.abs().powf(pt - T::one()) * sign(delta),
            (false, _) if yv == T::zero() => T::zero(),
            (false, 2.0) => g * delta / yv,
            (false, _) => g * (delta.abs() / yv).powf(pt - T::one()) * sign(delta),
        }
    });
    let dxbar = dx.map(|v| -v);
    Ok((dx, dxbar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{fd_projected, rand_tensor, rel_err};
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256StarStar;

    fn vecd(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(Shape::new(1, 1, v.len(), 1), v).unwrap()
    }

    #[test]
    fn forward_examples() {
        let x = vecd(&[1.0, -2.0, 0.5]);
        assert_eq!(pdist_forward(&x, &x, 3.0, false).unwrap().vec(), &[0.0]);
        let zero = vecd(&[0.0, 0.0]);
        assert_eq!(
            pdist_forward(&vecd(&[3.0, 4.0]), &zero, 2.0, false)
                .unwrap()
                .vec(),
            &[5.0]
        );
        assert_eq!(
            pdist_forward(&vecd(&[1.0, -2.0]), &zero, 1.0, true)
                .unwrap()
                .vec(),
            &[3.0]
        );
        assert!(pdist_forward(&x, &x, 0.0, false).is_err());
        assert!(pdist_forward(&x, &zero, 2.0, false).is_err());
    }

    #[test]
    fn backward_examples() {
        let zero = vecd(&[0.0, 0.0]);
        let (dx, dxbar) =
            pdist_backward(&vecd(&[3.0, 4.0]), &zero, 2.0, false, &Tensor::scalar(2.0)).unwrap();
        assert!(rel_err(dx.vec(), &[1.2, 1.6]) < 1e-15);
        assert_eq!(dxbar, dx.map(|v| -v));
        let (dx, _) = pdist_backward(&zero, &zero, 2.0, false, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(dx.vec(), &[0.0, 0.0]);
        let (dx, _) = pdist_backward(&zero, &zero, 0.5, true, &Tensor::scalar(1.0)).unwrap();
        assert!(dx.all_finite());
    }

    #[test]
    fn special_cases_agree_with_general_formula() {
        let mut r = Xoshiro256StarStar::seed_from_u64(1);
        let x = rand_tensor::<f64>(&mut r, Shape::new(2, 2, 3, 2));
        let xb = rand_tensor::<f64>(&mut r, x.shape());
        let dy = rand_tensor::<f64>(&mut r, Shape::new(2, 2, 1, 2));
        for p in [1.0, 2.0] {
            for no_root in [false, true] {
                let near = p + 1e-9;
                let a = pdist_forward(&x, &xb, p, no_root).unwrap();
                let b = pdist_forward(&x, &xb, near, no_root).unwrap();
                assert!(rel_err(a.vec(), b.vec()) < 1e-7);
                let (ga, _) = pdist_backward(&x, &xb, p, no_root, &dy).unwrap();
                let (gb, _) = pdist_backward(&x, &xb, near, no_root, &dy).unwrap();
                assert!(rel_err(ga.vec(), gb.vec()) < 1e-7);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = Xoshiro256StarStar::seed_from_u64(2);
        let x = rand_tensor::<f64>(&mut r, Shape::new(2, 3, 4, 2));
        let xb = rand_tensor::<f64>(&mut r, x.shape());
        let dy = rand_tensor::<f64>(&mut r, Shape::new(2, 3, 1, 2));
        for p in [1.0, 2.0, 3.0] {
            for no_root in [false, true] {
                let (dx, dxb) = pdist_backward(&x, &xb, p, no_root, &dy).unwrap();
                let fdx = fd_projected(&x, &dy, |x| pdist_forward(x, &xb, p, no_root).unwrap());
                let fdb = fd_projected(&xb, &dy, |xb| pdist_forward(&x, xb, p, no_root).unwrap());
                assert!(
                    rel_err(dx.vec(), fdx.vec()) < 1e-5,
                    "p={p} no_root={no_root}"
                );
                assert!(rel_err(dxb.vec(), fdb.vec()) < 1e-5);
            }
        }
    }
}
