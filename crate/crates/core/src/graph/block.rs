//! The block kinds a graph layer can hold, and their dispatch.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::act::{relu_backward, relu_forward, sigmoid_backward, sigmoid_forward};
use crate::conv::{
    conv_backward, conv_forward, convt_backward, convt_forward, ConvGeom, ConvTransposeGeom,
    FilterBank,
};
use crate::error::{Error, Result};
use crate::geometry::{rf_of_convt, rf_of_filter, FilterSpec, RfTransform};
use crate::loss::{loss_backward, loss_forward, loss_weight_grad, LossKind};
use crate::norm::{
    bnorm_backward, bnorm_forward, bnorm_inference, bnorm_inference_backward, lrn_backward,
    lrn_forward, softmax_backward, softmax_forward, spnorm_backward, spnorm_forward, LrnParams,
    MomentProjections, SpnormParams, BNORM_EPS,
};
use crate::pdist::{pdist_backward, pdist_forward};
use crate::pool::{pool_backward, pool_forward, PoolGeom};
use crate::resample::{bilinear_backward, bilinear_forward};
use crate::tensor::{Scalar, Shape, Tensor};

/// Whether batch normalization uses batch statistics or stored moments.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    #[default]
    Train,
    Test,
}

/// A user-supplied block evaluated in double precision.
///
/// `backward` gets one optional projection per output (absent ones are
/// zero) and returns one derivative per input.
pub trait CustomBlock: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Vec<Tensor<f64>>>;
    fn backward(
        &self,
        inputs: &[&Tensor<f64>],
        outputs: &[&Tensor<f64>],
        projections: &[Option<&Tensor<f64>>],
    ) -> Result<Vec<Tensor<f64>>>;
}

fn default_eps() -> f64 {
    BNORM_EPS
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnormConfig {
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// The last input is a `1 x 1 x K x 2` tensor of stored `(μ, σ²)` used
    /// in test mode.
    #[serde(default)]
    pub moments: bool,
}

impl Default for BnormConfig {
    fn default() -> Self {
        BnormConfig {
            eps: BNORM_EPS,
            moments: false,
        }
    }
}

/// Layer inputs are listed in a fixed order per kind:
///
/// | kind | inputs | outputs |
/// |---|---|---|
/// | `conv`, `convt` | `x, f[, b]` | `y` |
/// | `pool`, `relu`, `sigmoid`, `lrn`, `spnorm`, `softmax` | `x` | `y` |
/// | `bnorm` | `x, w[, b][, moments]` | `y[, μ[, σ²]]` |
/// | `bilinear` | `x, grid` | `y` |
/// | `loss` | `x, c[, instance weights]` | scalar |
/// | `pdist` | `x, x̄` | `y` |
/// | `sum`, `mul` | `x_1, …, x_n` | `y` |
/// | `derivative` | inputs of the block, then one projection per output | one derivative per input |
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerKind {
    Conv(ConvGeom),
    ConvT(ConvTransposeGeom),
    Pool(PoolGeom),
    Relu,
    Sigmoid,
    Lrn(LrnParams),
    Bnorm(BnormConfig),
    Spnorm(SpnormParams),
    Softmax,
    Bilinear,
    Loss {
        loss: LossKind,
    },
    Pdist {
        p: f64,
        #[serde(default)]
        no_root: bool,
    },
    Sum,
    Mul,
    /// Backward mode of `of`, as a forward block of the reversed graph.
    Derivative {
        of: Box<LayerKind>,
        inputs: usize,
        outputs: usize,
    },
    #[serde(skip)]
    Custom(Arc<dyn CustomBlock>),
}

impl LayerKind {
    pub fn type_name(&self) -> &str {
        match self {
            LayerKind::Conv(_) => "conv",
            LayerKind::ConvT(_) => "convt",
            LayerKind::Pool(_) => "pool",
            LayerKind::Relu => "relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Lrn(_) => "lrn",
            LayerKind::Bnorm(_) => "bnorm",
            LayerKind::Spnorm(_) => "spnorm",
            LayerKind::Softmax => "softmax",
            LayerKind::Bilinear => "bilinear",
            LayerKind::Loss { .. } => "loss",
            LayerKind::Pdist { .. } => "pdist",
            LayerKind::Sum => "sum",
            LayerKind::Mul => "mul",
            LayerKind::Derivative { .. } => "derivative",
            LayerKind::Custom(c) => c.name(),
        }
    }

    /// Checks input and output counts.
    pub fn check_arity(&self, inputs: usize, outputs: usize) -> Result<()> {
        let ok = match self {
            LayerKind::Conv(_) | LayerKind::ConvT(_) => (2..=3).contains(&inputs) && outputs == 1,
            LayerKind::Pool(_)
            | LayerKind::Relu
            | LayerKind::Sigmoid
            | LayerKind::Lrn(_)
            | LayerKind::Spnorm(_)
            | LayerKind::Softmax => inputs == 1 && outputs == 1,
            LayerKind::Bnorm(c) => {
                let base = 2 + c.moments as usize;
                (base..=base + 1).contains(&inputs) && (1..=3).contains(&outputs)
            }
            LayerKind::Bilinear | LayerKind::Pdist { .. } => inputs == 2 && outputs == 1,
            LayerKind::Loss { .. } => (2..=3).contains(&inputs) && outputs == 1,
            LayerKind::Sum | LayerKind::Mul => inputs >= 1 && outputs == 1,
            LayerKind::Derivative {
                of,
                inputs: i,
                outputs: o,
            } => {
                of.check_arity(*i, *o)?;
                inputs == i + o && outputs == *i
            }
            LayerKind::Custom(_) => inputs >= 1 && outputs >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Graph(format!(
                "a {} layer cannot take {inputs} input(s) and {outputs} output(s)",
                self.type_name()
            )))
        }
    }

    /// Input slots through which the output depends on input positions, as
    /// opposed to parameters or side inputs.
    pub fn spatial_inputs(&self, inputs: usize) -> Vec<usize> {
        match self {
            LayerKind::Pdist { .. } => vec![0, 1],
            LayerKind::Sum | LayerKind::Mul => (0..inputs).collect(),
            LayerKind::Bilinear | LayerKind::Derivative { .. } | LayerKind::Custom(_) => vec![],
            _ => vec![0],
        }
    }

    /// Receptive field per axis given the shape of the first input, when
    /// the block is filter-like.
    pub fn rf(&self, filter: Option<Shape>) -> Option<[RfTransform; 2]> {
        let spec = |size: usize, stride: usize, lo: usize, hi: usize| {
            FilterSpec::new(size, stride, (lo, hi))
                .ok()
                .map(rf_of_filter)
        };
        match self {
            LayerKind::Conv(g) => {
                let f = filter?;
                Some([
                    spec(f.h(), g.stride[0], g.pad[0], g.pad[1])?,
                    spec(f.w(), g.stride[1], g.pad[2], g.pad[3])?,
                ])
            }
            LayerKind::ConvT(g) => {
                let f = filter?;
                Some([
                    rf_of_convt(g.upsample[0], g.crop[0], f.h()).ok()?,
                    rf_of_convt(g.upsample[1], g.crop[2], f.w()).ok()?,
                ])
            }
            LayerKind::Pool(g) => Some([
                spec(g.window[0], g.stride[0], g.pad[0], g.pad[1])?,
                spec(g.window[1], g.stride[1], g.pad[2], g.pad[3])?,
            ]),
            LayerKind::Spnorm(p) => {
                let [h, w] = p.window;
                let (top, left) = ((h.max(1) - 1) / 2, (w.max(1) - 1) / 2);
                Some([
                    spec(h, 1, top, h.saturating_sub(top + 1))?,
                    spec(w, 1, left, w.saturating_sub(left + 1))?,
                ])
            }
            LayerKind::Relu
            | LayerKind::Sigmoid
            | LayerKind::Lrn(_)
            | LayerKind::Bnorm(_)
            | LayerKind::Softmax
            | LayerKind::Pdist { .. }
            | LayerKind::Sum
            | LayerKind::Mul => Some([RfTransform::identity(); 2]),
            LayerKind::Loss { .. }
            | LayerKind::Bilinear
            | LayerKind::Derivative { .. }
            | LayerKind::Custom(_) => None,
        }
    }

    /// Whether derivatives flow back to input slot `i`.
    pub fn differentiable_input(&self, i: usize, inputs: usize) -> bool {
        match self {
            LayerKind::Bnorm(c) => !(c.moments && i == inputs - 1),
            _ => true,
        }
    }
}

fn channel_vec<T: Scalar>(t: &Tensor<T>, k: usize, what: &str) -> Result<Vec<T>> {
    if t.numel() != k {
        return Err(Error::ShapeMismatch(format!(
            "{what} has {} elements, expected {k}",
            t.numel()
        )));
    }
    Ok(t.vec().to_vec())
}

fn channel_tensor<T: Scalar>(v: &[T], like: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(like.shape(), v.to_vec()).expect("channel vector length checked")
}

fn moments_of<T: Scalar>(m: &Tensor<T>, k: usize) -> Result<(Vec<T>, Vec<T>)> {
    if m.numel() != 2 * k {
        return Err(Error::ShapeMismatch(format!(
            "batch normalization moments have {} elements, expected {}",
            m.numel(),
            2 * k
        )));
    }
    Ok((m.vec()[..k].to_vec(), m.vec()[k..].to_vec()))
}

fn moment_shape(k: usize) -> Shape {
    Shape::new(1, 1, k, 1)
}

fn bank<T: Scalar>(inputs: &[&Tensor<T>], bias_len: usize, what: &str) -> Result<FilterBank<T>> {
    let filters = inputs[1].clone();
    Ok(match inputs.get(2) {
        Some(b) => FilterBank::with_bias(filters, channel_vec(b, bias_len, what)?),
        None => FilterBank::new(filters),
    })
}

struct BnormInputs<'a, T: Scalar> {
    x: &'a Tensor<T>,
    w: Vec<T>,
    b: Option<Vec<T>>,
    moments: Option<&'a Tensor<T>>,
}

fn bnorm_inputs<'a, T: Scalar>(
    c: &BnormConfig,
    inputs: &[&'a Tensor<T>],
) -> Result<BnormInputs<'a, T>> {
    let k = inputs[0].shape().c();
    let has_bias = inputs.len() == 3 + c.moments as usize;
    Ok(BnormInputs {
        x: inputs[0],
        w: channel_vec(inputs[1], k, "batch normalization multiplier")?,
        b: if has_bias {
            Some(channel_vec(inputs[2], k, "batch normalization bias")?)
        } else {
            None
        },
        moments: c.moments.then(|| inputs[inputs.len() - 1]),
    })
}

fn check_same_shapes<T: Scalar>(inputs: &[&Tensor<T>], what: &str) -> Result<Shape> {
    let s = inputs[0].shape();
    for t in &inputs[1..] {
        t.expect_shape(s, what)?;
    }
    Ok(s)
}

fn to_f64<T: Scalar>(inputs: &[&Tensor<T>]) -> Vec<Tensor<f64>> {
    inputs.iter().map(|t| t.cast()).collect()
}

/// Runs the forward mode of a block.
pub fn forward<T: Scalar>(
    kind: &LayerKind,
    inputs: &[&Tensor<T>],
    outputs: usize,
    mode: Mode,
) -> Result<Vec<Tensor<T>>> {
    Ok(match kind {
        LayerKind::Conv(g) => {
            let b = bank(inputs, inputs[1].shape().n(), "convolution bias")?;
            vec![conv_forward(inputs[0], &b, g)?]
        }
        LayerKind::ConvT(g) => {
            let b = bank(inputs, inputs[1].shape().c(), "convolution transpose bias")?;
            vec![convt_forward(inputs[0], &b, g)?]
        }
        LayerKind::Pool(g) => vec![pool_forward(inputs[0], g)?],
        LayerKind::Relu => vec![relu_forward(inputs[0])],
        LayerKind::Sigmoid => vec![sigmoid_forward(inputs[0])],
        LayerKind::Lrn(p) => vec![lrn_forward(inputs[0], p)?],
        LayerKind::Bnorm(c) => {
            let bi = bnorm_inputs(c, inputs)?;
            let k = bi.x.shape().c();
            let (y, mu, s2) = match (mode, bi.moments) {
                (Mode::Test, Some(m)) => {
                    let (mu, s2) = moments_of(m, k)?;
                    let y = bnorm_inference(bi.x, &bi.w, bi.b.as_deref(), &mu, &s2, c.eps)?;
                    (y, mu, s2)
                }
                _ => {
                    let out = bnorm_forward(bi.x, &bi.w, bi.b.as_deref(), c.eps)?;
                    (out.y, out.mu, out.sigma2)
                }
            };
            let mut outs = vec![y];
            if outputs >= 2 {
                outs.push(Tensor::from_vec(moment_shape(k), mu)?);
            }
            if outputs >= 3 {
                outs.push(Tensor::from_vec(moment_shape(k), s2)?);
            }
            outs
        }
        LayerKind::Spnorm(p) => vec![spnorm_forward(inputs[0], p)?],
        LayerKind::Softmax => vec![softmax_forward(inputs[0])],
        LayerKind::Bilinear => vec![bilinear_forward(inputs[0], inputs[1])?],
        LayerKind::Loss { loss } => {
            vec![Tensor::scalar(loss_forward(
                inputs[0],
                inputs[1],
                loss,
                inputs.get(2).copied(),
            )?)]
        }
        LayerKind::Pdist { p, no_root } => vec![pdist_forward(inputs[0], inputs[1], *p, *no_root)?],
        LayerKind::Sum => {
            check_same_shapes(inputs, "sum operand")?;
            let mut y = inputs[0].clone();
            for t in &inputs[1..] {
                y.add_assign(t)?;
            }
            vec![y]
        }
        LayerKind::Mul => {
            check_same_shapes(inputs, "product operand")?;
            let mut y = inputs[0].clone();
            for t in &inputs[1..] {
                y = y.zip_map(t, |a, b| a * b)?;
            }
            vec![y]
        }
        LayerKind::Derivative {
            of,
            inputs: n_in,
            outputs: n_out,
        } => {
            let (orig, proj) = inputs.split_at(*n_in);
            let outs = forward(of, orig, *n_out, mode)?;
            let outs_ref: Vec<&Tensor<T>> = outs.iter().collect();
            let proj: Vec<Option<&Tensor<T>>> = proj.iter().map(|&p| Some(p)).collect();
            backward(of, orig, &outs_ref, &proj, mode)?
                .into_iter()
                .zip(orig)
                .map(|(d, x)| d.unwrap_or_else(|| Tensor::zeros(x.shape())))
                .collect()
        }
        LayerKind::Custom(c) => {
            let xs = to_f64(inputs);
            let refs: Vec<&Tensor<f64>> = xs.iter().collect();
            let ys = c.forward(&refs)?;
            if ys.len() != outputs {
                return Err(Error::Graph(format!(
                    "custom block `{}` returned {} outputs, expected {outputs}",
                    c.name(),
                    ys.len()
                )));
            }
            ys.iter().map(|y| y.cast()).collect()
        }
    })
}

fn zeros_like<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    Tensor::zeros(t.shape())
}

/// Runs the backward mode of a block, returning one derivative per input
/// (`None` for inputs that take no derivative).
pub fn backward<T: Scalar>(
    kind: &LayerKind,
    inputs: &[&Tensor<T>],
    outputs: &[&Tensor<T>],
    proj: &[Option<&Tensor<T>>],
    mode: Mode,
) -> Result<Vec<Option<Tensor<T>>>> {
    let zero;
    // single-output blocks: an absent projection is zero
    let p0 = match proj.first().copied().flatten() {
        Some(p) => p,
        None => {
            zero = zeros_like(outputs[0]);
            &zero
        }
    };
    let some = |v: Vec<Tensor<T>>| v.into_iter().map(Some).collect::<Vec<_>>();
    Ok(match kind {
        LayerKind::Conv(g) => {
            let b = bank(inputs, inputs[1].shape().n(), "convolution bias")?;
            let gr = conv_backward(inputs[0], &b, g, p0)?;
            let mut v = vec![gr.dx, gr.df];
            if let Some(db) = gr.db {
                v.push(channel_tensor(&db, inputs[2]));
            }
            some(v)
        }
        LayerKind::ConvT(g) => {
            let b = bank(inputs, inputs[1].shape().c(), "convolution transpose bias")?;
            let gr = convt_backward(inputs[0], &b, g, p0)?;
            let mut v = vec![gr.dx, gr.df];
            if let Some(db) = gr.db {
                v.push(channel_tensor(&db, inputs[2]));
            }
            some(v)
        }
        LayerKind::Pool(g) => some(vec![pool_backward(inputs[0], g, p0)?]),
        LayerKind::Relu => some(vec![relu_backward(inputs[0], p0)?]),
        LayerKind::Sigmoid => some(vec![sigmoid_backward(outputs[0], p0)?]),
        LayerKind::Lrn(p) => some(vec![lrn_backward(inputs[0], p, p0)?]),
        LayerKind::Bnorm(c) => {
            let bi = bnorm_inputs(c, inputs)?;
            let k = bi.x.shape().c();
            let pmu = proj
                .get(1)
                .copied()
                .flatten()
                .map(|t| channel_vec(t, k, "mean projection"))
                .transpose()?;
            let ps2 = proj
                .get(2)
                .copied()
                .flatten()
                .map(|t| channel_vec(t, k, "variance projection"))
                .transpose()?;
            let gr = match (mode, bi.moments) {
                (Mode::Test, Some(m)) => {
                    let (mu, s2) = moments_of(m, k)?;
                    bnorm_inference_backward(bi.x, &bi.w, &mu, &s2, c.eps, p0)?
                }
                _ => bnorm_backward(
                    bi.x,
                    &bi.w,
                    c.eps,
                    p0,
                    MomentProjections {
                        mu: pmu.as_deref(),
                        sigma2: ps2.as_deref(),
                    },
                )?,
            };
            let mut v = vec![Some(gr.dx), Some(channel_tensor(&gr.dw, inputs[1]))];
            if bi.b.is_some() {
                v.push(Some(channel_tensor(&gr.db, inputs[2])));
            }
            if c.moments {
                v.push(None);
            }
            v
        }
        LayerKind::Spnorm(p) => some(vec![spnorm_backward(inputs[0], p, p0)?]),
        LayerKind::Softmax => some(vec![softmax_backward(outputs[0], p0)?]),
        LayerKind::Bilinear => {
            let (dx, dg) = bilinear_backward(inputs[0], inputs[1], p0)?;
            some(vec![dx, dg])
        }
        LayerKind::Loss { loss } => {
            let p = p0.vec()[0];
            let mut v = vec![
                loss_backward(inputs[0], inputs[1], loss, inputs.get(2).copied(), p)?,
                zeros_like(inputs[1]),
            ];
            if inputs.len() == 3 {
                v.push(loss_weight_grad(inputs[0], inputs[1], loss, p)?);
            }
            some(v)
        }
        LayerKind::Pdist { p, no_root } => {
            let (dx, dxb) = pdist_backward(inputs[0], inputs[1], *p, *no_root, p0)?;
            some(vec![dx, dxb])
        }
        LayerKind::Sum => some(inputs.iter().map(|_| p0.clone()).collect()),
        LayerKind::Mul => {
            let mut v = Vec::with_capacity(inputs.len());
            for i in 0..inputs.len() {
                let mut d = p0.clone();
                for (j, t) in inputs.iter().enumerate() {
                    if j != i {
                        d = d.zip_map(t, |a, b| a * b)?;
                    }
                }
                v.push(d);
            }
            some(v)
        }
        LayerKind::Derivative { .. } => return Err(Error::Graph(
            "derivative layers have no backward mode; higher-order derivatives are not supported"
                .into(),
        )),
        LayerKind::Custom(c) => {
            let xs = to_f64(inputs);
            let ys = to_f64(outputs);
            let ps: Vec<Option<Tensor<f64>>> = proj.iter().map(|p| p.map(|t| t.cast())).collect();
            let xr: Vec<&Tensor<f64>> = xs.iter().collect();
            let yr: Vec<&Tensor<f64>> = ys.iter().collect();
            let pr: Vec<Option<&Tensor<f64>>> = ps.iter().map(|p| p.as_ref()).collect();
            let ds = c.backward(&xr, &yr, &pr)?;
            if ds.len() != inputs.len() {
                return Err(Error::Graph(format!(
                    "custom block `{}` returned {} derivatives for {} inputs",
                    c.name(),
                    ds.len(),
                    inputs.len()
                )));
            }
            for (d, x) in ds.iter().zip(inputs) {
                d.expect_shape(x.shape(), "custom block derivative")?;
            }
            some(ds.iter().map(|d| d.cast()).collect())
        }
    })
}
