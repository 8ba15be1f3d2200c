//! Normalization blocks: local response normalization, batch
//! normalization, spatial normalization and softmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::{pool_backward, pool_forward, PoolGeom, PoolMode};
use crate::tensor::{Scalar, Shape, Tensor};

/// Default `ε` of batch normalization.
pub const BNORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrnParams {
    /// Number of channels `G` in each normalization window.
    pub group_size: usize,
    pub kappa: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        LrnParams {
            group_size: 5,
            kappa: 2.0,
            alpha: 1e-4,
            beta: 0.75,
        }
    }
}

impl LrnParams {
    fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::InvalidParam(
                "LRN group size must be positive".into(),
            ));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::InvalidParam(format!(
                "LRN kappa must be positive, got {}",
                self.kappa
            )));
        }
        Ok(())
    }

    /// Channels `[lo, hi)` in the window centred on channel `k` of `depth`.
    fn window(&self, k: usize, depth: usize) -> (usize, usize) {
        let before = (self.group_size - 1) / 2;
        let after = self.group_size - 1 - before;
        (k.saturating_sub(before), (k + after + 1).min(depth))
    }
}

/// Per-site channel sums `L_k = κ + α Σ_{t∈G(k)} x_t²`.
fn lrn_denominators<T: Scalar>(x: &Tensor<T>, p: &LrnParams) -> Tensor<T> {
    let depth = x.shape().c();
    let (kappa, alpha) = (T::of(p.kappa), T::of(p.alpha));
    Tensor::from_fn(x.shape(), |i, j, k, n| {
        let (lo, hi) = p.window(k, depth);
        let energy: T = (lo..hi).map(|t| x.at(i, j, t, n).powi(2)).sum();
        kappa + alpha * energy
    })
}

pub fn lrn_forward<T: Scalar>(x: &Tensor<T>, p: &LrnParams) -> Result<Tensor<T>> {
    p.validate()?;
    let beta = T::of(p.beta);
    lrn_denominators(x, p).zip_map(x, |l, v| v * l.powf(-beta))
}

/// `dz/dx_d = p_d L_d^{-β} - 2αβ x_d Σ_{k: d∈G(k)} p_k L_k^{-β-1} x_k`.
pub fn lrn_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &LrnParams,
    dzdy: &Tensor<T>,
) -> Result<Tensor<T>> {
    p.validate()?;
    dzdy.expect_shape(x.shape(), "LRN backward dz/dy")?;
    let l = lrn_denominators(x, p);
    let beta = T::of(p.beta);
    let coef = T::of(2.0 * p.alpha * p.beta);
    let depth = x.shape().c();
    let eta = Tensor::from_fn(x.shape(), |i, j, k, n| {
        dzdy.at(i, j, k, n) * l.at(i, j, k, n).powf(-beta - T::one()) * x.at(i, j, k, n)
    });
    Ok(Tensor::from_fn(x.shape(), |i, j, d, n| {
        let mut cross = T::zero();
        for k in 0..depth {
            let (lo, hi) = p.window(k, depth);
            if (lo..hi).contains(&d) {
                cross += eta.at(i, j, k, n);
            }
        }
        dzdy.at(i, j, d, n) * l.at(i, j, d, n).powf(-beta) - coef * x.at(i, j, d, n) * cross
    }))
}

/// Output of batch normalization together with the batch moments.
#[derive(Clone, Debug)]
pub struct BnormOutput<T: Scalar> {
    pub y: Tensor<T>,
    pub mu: Vec<T>,
    /// Biased variance, divisor `HWT`.
    pub sigma2: Vec<T>,
}

/// Gradients of batch normalization.
#[derive(Clone, Debug)]
pub struct BnormGrads<T: Scalar> {
    pub dx: Tensor<T>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

fn check_channel_vec<T>(v: &[T], k: usize, what: &str) -> Result<()> {
    if v.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "batch normalization {what} has length {}, expected {k} channels",
            v.len()
        )));
    }
    Ok(())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParam(format!(
            "epsilon must be positive, got {eps}"
        )));
    }
    Ok(())
}

/// Per-channel mean and biased variance over `H x W x T`.
pub fn channel_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let plane = s.h() * s.w();
    let m = T::of((plane * s.n()) as f64);
    let mut mu = vec![T::zero(); s.c()];
    let mut s2 = vec![T::zero(); s.c()];
    for n in 0..s.n() {
        for (k, chunk) in x.image(n).chunks(plane).enumerate() {
            mu[k] += chunk.iter().copied().sum::<T>();
        }
    }
    mu.iter_mut().for_each(|v| *v = *v / m);
    for n in 0..s.n() {
        for (k, chunk) in x.image(n).chunks(plane).enumerate() {
            s2[k] += chunk.iter().map(|&v| (v - mu[k]).powi(2)).sum::<T>();
        }
    }
    s2.iter_mut().for_each(|v| *v = *v / m);
    (mu, s2)
}

fn for_each_channel<T: Scalar>(x: &Tensor<T>, mut f: impl FnMut(usize, T) -> T) -> Tensor<T> {
    let s = x.shape();
    let plane = s.h() * s.w();
    let mut out = x.clone();
    for n in 0..s.n() {
        for (k, chunk) in out.image_mut(n).chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = f(k, *v));
        }
    }
    out
}

/// `y = w (x - μ) / sqrt(σ² + ε) + b` with moments from the batch.
pub fn bnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    b: Option<&[T]>,
    eps: f64,
) -> Result<BnormOutput<T>> {
    let (mu, sigma2) = channel_moments(x);
    let y = bnorm_inference(x, w, b, &mu, &sigma2, eps)?;
    Ok(BnormOutput { y, mu, sigma2 })
}

/// Batch normalization with fixed, externally supplied moments.
pub fn bnorm_inference<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    b: Option<&[T]>,
    mu: &[T],
    sigma2: &[T],
    eps: f64,
) -> Result<Tensor<T>> {
    check_eps(eps)?;
    let k = x.shape().c();
    check_channel_vec(w, k, "multiplier")?;
    check_channel_vec(mu, k, "mean")?;
    check_channel_vec(sigma2, k, "variance")?;
    if let Some(b) = b {
        check_channel_vec(b, k, "bias")?;
    }
    let eps = T::of(eps);
    let scale: Vec<T> = (0..k).map(|c| w[c] / (sigma2[c] + eps).sqrt()).collect();
    Ok(for_each_channel(x, |c, v| {
        scale[c] * (v - mu[c]) + b.map_or(T::zero(), |b| b[c])
    }))
}

/// Projections onto the moment outputs, when the graph consumes them.
#[derive(Clone, Copy, Debug, Default)]
pub struct MomentProjections<'a, T> {
    pub mu: Option<&'a [T]>,
    pub sigma2: Option<&'a [T]>,
}

/// Backward of [`bnorm_forward`].
///
/// Uses the compact form
/// `dz/dx = w / sqrt(σ² + ε) · (p - dz/db / M - x̂ · dz/dw / M)` with
/// `x̂ = (x - μ)/sqrt(σ² + ε)` and `M = HWT`, plus the direct contributions of
/// any projections on `μ` and `σ²`.
pub fn bnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    eps: f64,
    dzdy: &Tensor<T>,
    moments: MomentProjections<'_, T>,
) -> Result<BnormGrads<T>> {
    check_eps(eps)?;
    let s = x.shape();
    let k = s.c();
    check_channel_vec(w, k, "multiplier")?;
    dzdy.expect_shape(s, "batch normalization backward dz/dy")?;
    let (mu, sigma2) = channel_moments(x);
    let inv: Vec<T> = sigma2
        .iter()
        .map(|&v| (v + T::of(eps)).sqrt().recip())
        .collect();
    let plane = s.h() * s.w();
    let m = T::of((plane * s.n()) as f64);

    let mut dw = vec![T::zero(); k];
    let mut db = vec![T::zero(); k];
    for n in 0..s.n() {
        let (xi, pi) = (x.image(n), dzdy.image(n));
        for c in 0..k {
            for q in c * plane..(c + 1) * plane {
                db[c] += pi[q];
                dw[c] += pi[q] * (xi[q] - mu[c]) * inv[c];
            }
        }
    }
    if let Some(pm) = moments.mu {
        check_channel_vec(pm, k, "mean projection")?;
    }
    if let Some(ps) = moments.sigma2 {
        check_channel_vec(ps, k, "variance projection")?;
    }
    let two = T::of(2.0);
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n() {
        let (xi, pi) = (x.image(n), dzdy.image(n));
        let di = dx.image_mut(n);
        for c in 0..k {
            for q in c * plane..(c + 1) * plane {
                let centred = xi[q] - mu[c];
                let xhat = centred * inv[c];
                let mut g = w[c] * inv[c] * (pi[q] - db[c] / m - xhat * dw[c] / m);
                if let Some(pm) = moments.mu {
                    g += pm[c] / m;
                }
                if let Some(ps) = moments.sigma2 {
                    g += ps[c] * two * centred / m;
                }
                di[q] = g;
            }
        }
    }
    Ok(BnormGrads { dx, dw, db })
}

/// Backward of [`bnorm_inference`], where the moments are constants.
pub fn bnorm_inference_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    mu: &[T],
    sigma2: &[T],
    eps: f64,
    dzdy: &Tensor<T>,
) -> Result<BnormGrads<T>> {
    check_eps(eps)?;
    let s = x.shape();
    let k = s.c();
    check_channel_vec(w, k, "multiplier")?;
    check_channel_vec(mu, k, "mean")?;
    check_channel_vec(sigma2, k, "variance")?;
    dzdy.expect_shape(s, "batch normalization backward dz/dy")?;
    let inv: Vec<T> = sigma2
        .iter()
        .map(|&v| (v + T::of(eps)).sqrt().recip())
        .collect();
    let plane = s.h() * s.w();
    let mut dw = vec![T::zero(); k];
    let mut db = vec![T::zero(); k];
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n() {
        let (xi, pi) = (x.image(n), dzdy.image(n));
        let di = dx.image_mut(n);
        for c in 0..k {
            for q in c * plane..(c + 1) * plane {
                db[c] += pi[q];
                dw[c] += pi[q] * (xi[q] - mu[c]) * inv[c];
                di[q] = pi[q] * w[c] * inv[c];
            }
        }
    }
    Ok(BnormGrads { dx, dw, db })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpnormParams {
    pub window: [usize; 2],
    pub alpha: f64,
    pub beta: f64,
}

impl SpnormParams {
    /// Centred averaging window; the output of the pooling keeps the input size.
    fn pool(&self) -> Result<PoolGeom> {
        if self.window.contains(&0) {
            return Err(Error::InvalidParam(
                "spatial normalization window must be positive".into(),
            ));
        }
        let [h, w] = self.window;
        let (top, left) = ((h - 1) / 2, (w - 1) / 2);
        Ok(PoolGeom::new(
            self.window,
            [1, 1],
            [top, h - top - 1, left, w - left - 1],
            PoolMode::Avg,
        ))
    }
}

/// `y = x (1 + α n²)^{-β}`, with `n²` the local mean of `x²`.
pub fn spnorm_forward<T: Scalar>(x: &Tensor<T>, p: &SpnormParams) -> Result<Tensor<T>> {
    let n2 = pool_forward(&x.map(|v| v * v), &p.pool()?)?;
    let (alpha, beta) = (T::of(p.alpha), T::of(p.beta));
    x.zip_map(&n2, |v, e| v * (T::one() + alpha * e).powf(-beta))
}

/// `dz/dx = p (1 + α n²)^{-β} - 2αβ x · A^T η`, with
/// `η = p (1 + α n²)^{-β-1} x` and `A` the averaging operator.
pub fn spnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &SpnormParams,
    dzdy: &Tensor<T>,
) -> Result<Tensor<T>> {
    dzdy.expect_shape(x.shape(), "spatial normalization backward dz/dy")?;
    let geom = p.pool()?;
    let sq = x.map(|v| v * v);
    let n2 = pool_forward(&sq, &geom)?;
    let (alpha, beta) = (T::of(p.alpha), T::of(p.beta));
    let base = n2.map(|e| T::one() + alpha * e);
    let eta = Tensor::from_fn(x.shape(), |i, j, c, n| {
        dzdy.at(i, j, c, n) * base.at(i, j, c, n).powf(-beta - T::one()) * x.at(i, j, c, n)
    });
    let spread = pool_backward(&sq, &geom, &eta)?;
    let coef = T::of(2.0 * p.alpha * p.beta);
    Ok(Tensor::from_fn(x.shape(), |i, j, c, n| {
        dzdy.at(i, j, c, n) * base.at(i, j, c, n).powf(-beta)
            - coef * x.at(i, j, c, n) * spread.at(i, j, c, n)
    }))
}

/// `(offset of channel 0, channel stride)` for every spatial site.
fn sites(s: Shape) -> impl Iterator<Item = (usize, usize)> {
    let plane = s.h() * s.w();
    (0..s.n()).flat_map(move |n| (0..plane).map(move |q| (n * s.image_len() + q, plane)))
}

/// Softmax across channels at every spatial site, with the maximum
/// subtracted before exponentiation.
pub fn softmax_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let mut y = Tensor::zeros(s);
    let xs = x.vec();
    let ys = y.vec_mut();
    for (base, stride) in sites(s) {
        let idx = |k: usize| base + k * stride;
        let mx = (0..s.c())
            .map(|k| xs[idx(k)])
            .fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for k in 0..s.c() {
            let e = (xs[idx(k)] - mx).exp();
            ys[idx(k)] = e;
            total += e;
        }
        for k in 0..s.c() {
            ys[idx(k)] = ys[idx(k)] / total;
        }
    }
    y
}

/// `dz/dx = y ⊙ (p - Σ_k p_k y_k)` per site, from the forward output `y`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dzdy: &Tensor<T>) -> Result<Tensor<T>> {
    let s = y.shape();
    dzdy.expect_shape(s, "softmax backward dz/dy")?;
    let mut dx = Tensor::zeros(s);
    let (ys, ps) = (y.vec(), dzdy.vec());
    let ds = dx.vec_mut();
    for (base, stride) in sites(s) {
        let idx = |k: usize| base + k * stride;
        let dot: T = (0..s.c()).map(|k| ps[idx(k)] * ys[idx(k)]).sum();
        for k in 0..s.c() {
            ds[idx(k)] = ys[idx(k)] * (ps[idx(k)] - dot);
        }
    }
    Ok(dx)
}
