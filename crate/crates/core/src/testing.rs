use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Scalar, Shape, Tensor};

pub fn rand_tensor<T: Scalar>(rng: &mut impl Rng, shape: Shape) -> Tensor<T> {
    Tensor::from_fn(shape, |_, _, _, _| {
        T::of(rng.sample::<f64, _>(StandardNormal))
    })
}

/// Central-difference gradient of `<p, f(x)>` with respect to `x`.
pub fn fd_projected(
    x: &Tensor<f64>,
    p: &Tensor<f64>,
    f: impl Fn(&Tensor<f64>) -> Tensor<f64>,
) -> Tensor<f64> {
    let mut g = Tensor::zeros(x.shape());
    let mut xp = x.clone();
    for i in 0..x.numel() {
        let h = 1e-6 * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let up = p.inner(&f(&xp)).unwrap();
        xp[i] = x[i] - h;
        let down = p.inner(&f(&xp)).unwrap();
        xp[i] = x[i];
        g[i] = (up - down) / (2.0 * h);
    }
    g
}

/// `max |a - b| / max(max |b|, 1e-12)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}
