//! Classification and attribute losses.
//!
//! Every loss is a weighted sum over sites of a per-site term. Class labels
//! are an `H x W x 1 x N` tensor of values in `0..=C` (one-based classes), and
//! attribute labels match `x` in shape with values in `{-1, 0, +1}`. Label
//! `0` marks a site to ignore. Labels are stored as floats and rounded to the
//! nearest integer before use, so they carry no gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::act::sigmoid;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LossKind {
    ClassError,
    TopK {
        k: usize,
    },
    Log,
    SoftmaxLog,
    /// Multi-class hinge `max(0, 1 - x_c)`.
    MHinge,
    /// Structured multi-class hinge `max(0, 1 - x_c + max_{k≠c} x_k)`.
    MSHinge,
    BinaryError {
        #[serde(default)]
        threshold: f64,
    },
    BinaryLog,
    Logistic,
    Hinge,
}

impl LossKind {
    pub fn is_attribute(&self) -> bool {
        matches!(
            self,
            LossKind::BinaryError { .. }
                | LossKind::BinaryLog
                | LossKind::Logistic
                | LossKind::Hinge
        )
    }

    /// Error counts, whose derivative is zero almost everywhere.
    pub fn is_error_count(&self) -> bool {
        matches!(
            self,
            LossKind::ClassError | LossKind::TopK { .. } | LossKind::BinaryError { .. }
        )
    }

    /// Shape the label tensor must have for scores of shape `x`.
    pub fn label_shape(&self, x: Shape) -> Shape {
        if self.is_attribute() {
            x
        } else {
            Shape::new(x.h(), x.w(), 1, x.n())
        }
    }
}

fn round_label<T: Scalar>(v: T) -> Option<i64> {
    let r = v.to_f64_lossless().round();
    r.is_finite().then_some(r as i64)
}

/// Rounded labels after range checks.
fn labels<T: Scalar>(x: &Tensor<T>, c: &Tensor<T>, kind: &LossKind) -> Result<Vec<i64>> {
    c.expect_shape(kind.label_shape(x.shape()), "loss labels")?;
    let classes = x.shape().c() as i64;
    let (lo, hi) = if kind.is_attribute() {
        (-1, 1)
    } else {
        (0, classes)
    };
    c.vec()
        .iter()
        .map(|&v| match round_label(v) {
            Some(l) if (lo..=hi).contains(&l) => Ok(l),
            _ => Err(Error::LabelOutOfRange(format!(
                "label {v} outside {lo}..={hi}"
            ))),
        })
        .collect()
}

fn weights<T: Scalar>(w: Option<&Tensor<T>>, shape: Shape) -> Result<Option<&[T]>> {
    match w {
        Some(w) => {
            w.expect_shape(shape, "loss instance weights")?;
            Ok(Some(w.vec()))
        }
        None => Ok(None),
    }
}

fn validate<T: Scalar>(x: &Tensor<T>, kind: &LossKind) -> Result<()> {
    match kind {
        LossKind::TopK { k: 0 } => Err(Error::InvalidParam("top-K error needs K >= 1".into())),
        LossKind::MSHinge if x.shape().c() < 2 => Err(Error::InvalidParam(
            "structured hinge loss needs at least two classes".into(),
        )),
        LossKind::BinaryLog => {
            if x.vec().iter().all(|&v| v >= T::zero() && v <= T::one()) {
                Ok(())
            } else {
                Err(Error::Domain(
                    "binary log loss needs inputs in [0, 1]".into(),
                ))
            }
        }
        _ => Ok(()),
    }
}

/// Lowest index attaining the maximum, optionally excluding one index.
fn argmax<T: Scalar>(scores: impl Iterator<Item = T>, skip: Option<usize>) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (k, v) in scores.enumerate() {
        if Some(k) == skip {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map_or(0, |(k, _)| k)
}

/// Per-site loss and, when `grad` is given, `d loss / d x` on that site.
fn class_site<T: Scalar>(kind: &LossKind, x: &[T], c: usize, mut grad: Option<&mut [T]>) -> T {
    let xc = x[c];
    let one = T::one();
    let mut set = |k: usize, v: T| {
        if let Some(g) = grad.as_deref_mut() {
            g[k] += v;
        }
    };
    match *kind {
        LossKind::ClassError => T::of((argmax(x.iter().copied(), None) != c) as u8 as f64),
        LossKind::TopK { k } => {
            let rank = x.iter().filter(|&&v| v >= xc).count();
            T::of((rank > k) as u8 as f64)
        }
        LossKind::Log => {
            set(c, -one / xc);
            -xc.ln()
        }
        LossKind::SoftmaxLog => {
            let m = x.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = x.iter().map(|&v| (v - m).exp()).sum();
            for (k, &v) in x.iter().enumerate() {
                let sm = (v - m).exp() / total;
                set(k, if k == c { sm - one } else { sm });
            }
            m - xc + total.ln()
        }
        LossKind::MHinge => {
            if xc < one {
                set(c, -one);
            }
            (one - xc).max(T::zero())
        }
        LossKind::MSHinge => {
            let t = argmax(x.iter().copied(), Some(c));
            let margin = one - xc + x[t];
            if margin > T::zero() {
                set(c, -one);
                set(t, one);
            }
            margin.max(T::zero())
        }
        _ => unreachable!("attribute loss on class labels"),
    }
}

/// Per-element attribute loss and its derivative in `x`.
fn attribute_site<T: Scalar>(kind: &LossKind, x: T, c: T) -> (T, T) {
    let one = T::one();
    let half = T::of(0.5);
    match *kind {
        LossKind::BinaryError { threshold } => {
            let d = x - T::of(threshold);
            let sign = if d > T::zero() {
                one
            } else if d < T::zero() {
                -one
            } else {
                T::zero()
            };
            (T::of((sign != c) as u8 as f64), T::zero())
        }
        LossKind::BinaryLog => {
            let q = c * (x - half) + half;
            (-q.ln(), -c / q)
        }
        LossKind::Logistic => {
            // -log σ(cx) = softplus(-cx)
            let z = -c * x;
            let softplus = z.max(T::zero()) + (-z.abs()).exp().ln_1p();
            (softplus, -c * sigmoid(z))
        }
        LossKind::Hinge => {
            let m = c * x;
            (
                (one - m).max(T::zero()),
                if m < one { -c } else { T::zero() },
            )
        }
        _ => unreachable!("class loss on attribute labels"),
    }
}

/// Visits every non-ignored site: `(weight index, label, channel offsets)`.
fn class_sites(x: Shape, labels: &[i64], mut f: impl FnMut(usize, usize, &[usize])) {
    let plane = x.h() * x.w();
    let mut idx = vec![0; x.c()];
    for n in 0..x.n() {
        for q in 0..plane {
            let site = q + plane * n;
            let l = labels[site];
            if l == 0 {
                continue;
            }
            for (k, slot) in idx.iter_mut().enumerate() {
                *slot = n * x.image_len() + k * plane + q;
            }
            f(site, (l - 1) as usize, &idx);
        }
    }
}

/// Per-site losses, unweighted, laid out like the labels.
fn site_losses<T: Scalar>(x: &Tensor<T>, c: &Tensor<T>, kind: &LossKind) -> Result<Tensor<T>> {
    validate(x, kind)?;
    let lab = labels(x, c, kind)?;
    let mut out = Tensor::zeros(c.shape());
    if kind.is_attribute() {
        for (q, (&v, &l)) in x.vec().iter().zip(&lab).enumerate() {
            if l != 0 {
                out[q] = attribute_site(kind, v, T::of(l as f64)).0;
            }
        }
    } else {
        let mut scores = vec![T::zero(); x.shape().c()];
        let xs = x.vec();
        class_sites(x.shape(), &lab, |site, cls, idx| {
            idx.iter().zip(&mut scores).for_each(|(&i, s)| *s = xs[i]);
            out[site] = class_site(kind, &scores, cls, None);
        });
    }
    Ok(out)
}

/// `Σ w ℓ` over all non-ignored sites.
pub fn loss_forward<T: Scalar>(
    x: &Tensor<T>,
    c: &Tensor<T>,
    kind: &LossKind,
    w: Option<&Tensor<T>>,
) -> Result<T> {
    let per_site = site_losses(x, c, kind)?;
    Ok(match weights(w, c.shape())? {
        Some(w) => per_site.vec().iter().zip(w).map(|(&l, &w)| w * l).sum(),
        None => per_site.sum(),
    })
}

/// `d(p · loss)/dx`.
pub fn loss_backward<T: Scalar>(
    x: &Tensor<T>,
    c: &Tensor<T>,
    kind: &LossKind,
    w: Option<&Tensor<T>>,
    p: T,
) -> Result<Tensor<T>> {
    validate(x, kind)?;
    let lab = labels(x, c, kind)?;
    let w = weights(w, c.shape())?;
    let weight = |site: usize| p * w.map_or(T::one(), |w| w[site]);
    let mut dx = Tensor::zeros(x.shape());
    if kind.is_error_count() {
        return Ok(dx);
    }
    if kind.is_attribute() {
        for (q, (&v, &l)) in x.vec().iter().zip(&lab).enumerate() {
            if l != 0 {
                dx[q] = weight(q) * attribute_site(kind, v, T::of(l as f64)).1;
            }
        }
    } else {
        let classes = x.shape().c();
        let mut scores = vec![T::zero(); classes];
        let mut grad = vec![T::zero(); classes];
        let xs = x.vec();
        let ds = dx.vec_mut();
        class_sites(x.shape(), &lab, |site, cls, idx| {
            idx.iter().zip(&mut scores).for_each(|(&i, s)| *s = xs[i]);
            grad.iter_mut().for_each(|g| *g = T::zero());
            class_site(kind, &scores, cls, Some(&mut grad));
            let s = weight(site);
            for (&i, &g) in idx.iter().zip(&grad) {
                ds[i] = s * g;
            }
        });
    }
    Ok(dx)
}

/// `d(p · loss)/dw = p ℓ` per site; zero at ignored sites.
pub fn loss_weight_grad<T: Scalar>(
    x: &Tensor<T>,
    c: &Tensor<T>,
    kind: &LossKind,
    p: T,
) -> Result<Tensor<T>> {
    Ok(site_losses(x, c, kind)?.scale(p))
}

/// Classification error with ties for the top score broken uniformly at
/// random instead of by lowest index.
pub fn classerror_random_ties<T: Scalar>(
    x: &Tensor<T>,
    c: &Tensor<T>,
    w: Option<&Tensor<T>>,
    rng: &mut impl Rng,
) -> Result<T> {
    let kind = LossKind::ClassError;
    let lab = labels(x, c, &kind)?;
    let w = weights(w, c.shape())?;
    let xs = x.vec();
    let mut total = T::zero();
    let mut tied = Vec::new();
    class_sites(x.shape(), &lab, |site, cls, idx| {
        let m = idx.iter().map(|&i| xs[i]).fold(T::neg_infinity(), T::max);
        tied.clear();
        tied.extend((0..idx.len()).filter(|&k| xs[idx[k]] == m));
        let pick = tied[rng.random_range(0..tied.len())];
        if pick != cls {
            total += w.map_or(T::one(), |w| w[site]);
        }
    });
    Ok(total)
}
