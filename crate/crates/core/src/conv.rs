//! Convolution and convolution transpose through the im2row formulation.
//!
//! For one image, `im2row` (`φ`) lays all filter-sized patches of the padded
//! input out as rows of a `(H''W'') x (H'W'D)` matrix, so that the output is
//! `vec y = vec(φ(x) F)` with `F` the filter bank viewed as a
//! `(H'W'D) x D''` matrix. The derivatives follow from the same matrices:
//!
//! ```text
//! dz/dF = φ(x)ᵀ dz/dY        dz/dX = φ*(dz/dY Fᵀ)
//! ```
//!
//! where `φ*` (`row2im`) is the adjoint of `φ`. Convolution transpose is the
//! adjoint of a strided, padded convolution, so it reuses the same pair with
//! the roles of the two operators swapped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar, Shape, Tensor};

/// Stride, padding and channel grouping of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvGeom {
    /// `(S_h, S_w)`.
    pub stride: [usize; 2],
    /// `(P_h^-, P_h^+, P_w^-, P_w^+)`: top, bottom, left, right.
    pub pad: [usize; 4],
    pub groups: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        ConvGeom {
            stride: [1, 1],
            pad: [0; 4],
            groups: 1,
        }
    }
}

impl ConvGeom {
    pub fn new(stride: [usize; 2], pad: [usize; 4]) -> Self {
        ConvGeom {
            stride,
            pad,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.stride.contains(&0) {
            return Err(Error::InvalidParam(format!(
                "strides must be positive, got {:?}",
                self.stride
            )));
        }
        if self.groups == 0 {
            return Err(Error::InvalidParam("groups must be positive".into()));
        }
        Ok(())
    }

    /// Output `(H'', W'')` for an `h x w` input and `fh x fw` filters.
    pub fn output_hw(&self, h: usize, w: usize, fh: usize, fw: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let oh = axis_output(h, fh, self.stride[0], self.pad[0], self.pad[1])?;
        let ow = axis_output(w, fw, self.stride[1], self.pad[2], self.pad[3])?;
        Ok((oh, ow))
    }
}

fn axis_output(len: usize, filter: usize, stride: usize, lo: usize, hi: usize) -> Result<usize> {
    let padded = len + lo + hi;
    if padded < filter {
        return Err(Error::InputTooSmall(format!(
            "padded input {padded} is smaller than filter {filter}"
        )));
    }
    Ok(1 + (padded - filter) / stride)
}

/// Upsampling and cropping of a convolution transpose.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvTransposeGeom {
    /// `(U_h, U_w)`.
    pub upsample: [usize; 2],
    /// `(C_h^-, C_h^+, C_w^-, C_w^+)`.
    pub crop: [usize; 4],
}

impl Default for ConvTransposeGeom {
    fn default() -> Self {
        ConvTransposeGeom {
            upsample: [1, 1],
            crop: [0; 4],
        }
    }
}

impl ConvTransposeGeom {
    pub fn new(upsample: [usize; 2], crop: [usize; 4]) -> Self {
        ConvTransposeGeom { upsample, crop }
    }

    /// The forward convolution this operator is the transpose of.
    pub fn as_conv(&self) -> ConvGeom {
        ConvGeom::new(self.upsample, self.crop)
    }

    /// `H'' = U (H - 1) + H' - C^- - C^+`, per axis.
    pub fn output_hw(&self, h: usize, w: usize, fh: usize, fw: usize) -> Result<(usize, usize)> {
        if self.upsample.contains(&0) {
            return Err(Error::InvalidParam(format!(
                "upsampling factors must be positive, got {:?}",
                self.upsample
            )));
        }
        let axis = |len: usize, f: usize, u: usize, lo: usize, hi: usize| -> Result<usize> {
            let full = u * (len - 1) + f;
            if full <= lo + hi {
                return Err(Error::InvalidParam(format!(
                    "crops {lo}+{hi} leave no output from {full} samples"
                )));
            }
            Ok(full - lo - hi)
        };
        Ok((
            axis(h, fh, self.upsample[0], self.crop[0], self.crop[1])?,
            axis(w, fw, self.upsample[1], self.crop[2], self.crop[3])?,
        ))
    }
}

/// Filters `H' x W' x D' x D''` plus an optional bias of length `D''`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank<T: Scalar = f32> {
    pub filters: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> FilterBank<T> {
    pub fn new(filters: Tensor<T>) -> Self {
        FilterBank {
            filters,
            bias: None,
        }
    }

    /// The bias length is checked by the operator that consumes the bank:
    /// `D''` filters for convolution, `D''` output channels for the transpose.
    pub fn with_bias(filters: Tensor<T>, bias: Vec<T>) -> Self {
        FilterBank {
            filters,
            bias: Some(bias),
        }
    }

    pub fn num_filters(&self) -> usize {
        self.filters.shape().n()
    }
}

/// Gradients of a convolution with respect to its input, filters and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads<T: Scalar> {
    pub dx: Tensor<T>,
    pub df: Tensor<T>,
    /// Present iff the filter bank has a bias.
    pub db: Option<Vec<T>>,
}

/// Geometry of one `im2row` application on a single image.
#[derive(Clone, Copy, Debug)]
struct PatchLayout {
    h: usize,
    w: usize,
    fh: usize,
    fw: usize,
    oh: usize,
    ow: usize,
    stride: [usize; 2],
    pad_top: usize,
    pad_left: usize,
}

impl PatchLayout {
    fn new(h: usize, w: usize, fh: usize, fw: usize, geom: &ConvGeom) -> Result<Self> {
        let (oh, ow) = geom.output_hw(h, w, fh, fw)?;
        Ok(PatchLayout {
            h,
            w,
            fh,
            fw,
            oh,
            ow,
            stride: geom.stride,
            pad_top: geom.pad[0],
            pad_left: geom.pad[2],
        })
    }

    fn rows(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate sampled by output `o` and filter tap `t` on one axis.
    #[inline]
    fn source(o: usize, t: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        (o * stride + t).checked_sub(pad).filter(|&v| v < len)
    }

    /// Writes φ(image)[:, channels] into `out` (column-major, `rows x fh*fw*channels`).
    fn extract<T: Scalar>(&self, image: &[T], c0: usize, channels: usize, out: &mut [T]) {
        let rows = self.rows();
        let plane = self.h * self.w;
        for d in 0..channels {
            let src = &image[(c0 + d) * plane..(c0 + d + 1) * plane];
            for jf in 0..self.fw {
                for iff in 0..self.fh {
                    let q = iff + self.fh * (jf + self.fw * d);
                    let col = &mut out[q * rows..(q + 1) * rows];
                    for jo in 0..self.ow {
                        let sj = Self::source(jo, jf, self.stride[1], self.pad_left, self.w);
                        let seg = &mut col[jo * self.oh..(jo + 1) * self.oh];
                        match sj {
                            None => seg.iter_mut().for_each(|v| *v = T::zero()),
                            Some(sj) => {
                                for (io, v) in seg.iter_mut().enumerate() {
                                    *v = match Self::source(
                                        io,
                                        iff,
                                        self.stride[0],
                                        self.pad_top,
                                        self.h,
                                    ) {
                                        Some(si) => src[si + self.h * sj],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adds φ*(m) into `image[channels]`; `m` has the layout written by `extract`.
    fn scatter_add<T: Scalar>(&self, m: &[T], c0: usize, channels: usize, image: &mut [T]) {
        let rows = self.rows();
        let plane = self.h * self.w;
        for d in 0..channels {
            let dst = &mut image[(c0 + d) * plane..(c0 + d + 1) * plane];
            for jf in 0..self.fw {
                for iff in 0..self.fh {
                    let q = iff + self.fh * (jf + self.fw * d);
                    let col = &m[q * rows..(q + 1) * rows];
                    for jo in 0..self.ow {
                        let Some(sj) = Self::source(jo, jf, self.stride[1], self.pad_left, self.w)
                        else {
                            continue;
                        };
                        for io in 0..self.oh {
                            if let Some(si) =
                                Self::source(io, iff, self.stride[0], self.pad_top, self.h)
                            {
                                dst[si + self.h * sj] += col[io + self.oh * jo];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// φ(x) for batch instance `n` of `x`, over all channels.
///
/// Row `p = i'' + H''(j'' - 1)` and column `q = i' + H'(j' - 1) + H'W'(d - 1)`
/// hold the input sample read by that output/tap pair, zero in the padding.
pub fn im2row<T: Scalar>(
    x: &Tensor<T>,
    n: usize,
    filter_hw: (usize, usize),
    geom: &ConvGeom,
) -> Result<Matrix<T>> {
    let s = x.shape();
    if n >= s.n() {
        return Err(Error::ShapeMismatch(format!("batch index {n} for {s}")));
    }
    let layout = PatchLayout::new(s.h(), s.w(), filter_hw.0, filter_hw.1, geom)?;
    let mut m = Matrix::zeros(layout.rows(), filter_hw.0 * filter_hw.1 * s.c());
    layout.extract(x.image(n), 0, s.c(), &mut m.data);
    Ok(m)
}

/// φ*(m): the adjoint of [`im2row`] for a single `target` image shape.
pub fn row2im<T: Scalar>(
    m: &Matrix<T>,
    target: Shape,
    filter_hw: (usize, usize),
    geom: &ConvGeom,
) -> Result<Tensor<T>> {
    if target.n() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "row2im targets one image, got {target}"
        )));
    }
    let layout = PatchLayout::new(target.h(), target.w(), filter_hw.0, filter_hw.1, geom)?;
    let cols = filter_hw.0 * filter_hw.1 * target.c();
    if m.rows != layout.rows() || m.cols != cols {
        return Err(Error::ShapeMismatch(format!(
            "row2im expects a {}x{cols} matrix, got {}x{}",
            layout.rows(),
            m.rows,
            m.cols
        )));
    }
    let mut out = Tensor::zeros(target);
    layout.scatter_add(&m.data, 0, target.c(), out.vec_mut());
    Ok(out)
}

struct ConvPlan {
    layout: PatchLayout,
    group_channels: usize,
    group_filters: usize,
    groups: usize,
    filters: usize,
    /// Rows of the per-group filter matrix, `H'W'D'`.
    patch: usize,
}

impl ConvPlan {
    fn new(xs: Shape, fs: Shape, geom: &ConvGeom) -> Result<Self> {
        geom.validate()?;
        let [fh, fw, dprime, filters] = fs.0;
        let g = geom.groups;
        if dprime * g != xs.c() {
            return Err(Error::ShapeMismatch(format!(
                "filters with depth {dprime} in {g} group(s) do not match {} input channels",
                xs.c()
            )));
        }
        if filters % g != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{filters} filters cannot be split into {g} groups"
            )));
        }
        let layout = PatchLayout::new(xs.h(), xs.w(), fh, fw, geom)?;
        Ok(ConvPlan {
            layout,
            group_channels: dprime,
            group_filters: filters / g,
            groups: g,
            filters,
            patch: fh * fw * dprime,
        })
    }

    fn out_shape(&self, n: usize) -> Shape {
        Shape::new(self.layout.oh, self.layout.ow, self.filters, n)
    }

    /// Fully-connected case: one output pixel whose patch is the whole,
    /// unpadded input.
    fn is_dense(&self, geom: &ConvGeom) -> bool {
        self.layout.oh == 1
            && self.layout.ow == 1
            && self.groups == 1
            && geom.pad == [0; 4]
            && self.layout.fh == self.layout.h
            && self.layout.fw == self.layout.w
    }
}

fn check_bias<T: Scalar>(f: &FilterBank<T>) -> Result<()> {
    if let Some(b) = &f.bias {
        if b.len() != f.num_filters() {
            return Err(Error::ShapeMismatch(format!(
                "bias of length {} for {} filters",
                b.len(),
                f.num_filters()
            )));
        }
    }
    Ok(())
}

fn add_bias<T: Scalar>(y: &mut Tensor<T>, bias: &[T]) {
    let s = y.shape();
    let plane = s.h() * s.w();
    for n in 0..s.n() {
        let img = y.image_mut(n);
        for (d, &b) in bias.iter().enumerate() {
            img[d * plane..(d + 1) * plane]
                .iter_mut()
                .for_each(|v| *v += b);
        }
    }
}

fn bias_grad<T: Scalar>(dzdy: &Tensor<T>) -> Vec<T> {
    let s = dzdy.shape();
    let plane = s.h() * s.w();
    let mut db = vec![T::zero(); s.c()];
    for n in 0..s.n() {
        let img = dzdy.image(n);
        for (d, acc) in db.iter_mut().enumerate() {
            *acc += img[d * plane..(d + 1) * plane].iter().copied().sum::<T>();
        }
    }
    db
}

/// `y = f * x + b` with the configured padding, stride and groups.
pub fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    f: &FilterBank<T>,
    geom: &ConvGeom,
) -> Result<Tensor<T>> {
    check_bias(f)?;
    let plan = ConvPlan::new(x.shape(), f.filters.shape(), geom)?;
    let n = x.shape().n();
    let mut y = Tensor::zeros(plan.out_shape(n));
    if plan.is_dense(geom) {
        // Y (D'' x N) = Fᵀ X with X the batch as an (HWD) x N matrix.
        let k = plan.patch;
        T::gemm(
            plan.filters,
            k,
            n,
            T::one(),
            f.filters.vec(),
            (k, 1),
            x.vec(),
            (1, k),
            T::zero(),
            y.vec_mut(),
            (1, plan.filters),
        );
    } else {
        conv_general_forward(&plan, x, &f.filters, &mut y);
    }
    if let Some(b) = &f.bias {
        add_bias(&mut y, b);
    }
    Ok(y)
}

/// The im2row route for any geometry, ignoring the dense shortcut.
fn conv_general_forward<T: Scalar>(
    plan: &ConvPlan,
    x: &Tensor<T>,
    filters: &Tensor<T>,
    y: &mut Tensor<T>,
) {
    let rows = plan.layout.rows();
    let mut phi = vec![T::zero(); rows * plan.patch];
    for n in 0..x.shape().n() {
        let image = x.image(n);
        let out = y.image_mut(n);
        for g in 0..plan.groups {
            plan.layout.extract(
                image,
                g * plan.group_channels,
                plan.group_channels,
                &mut phi,
            );
            let fg = &filters.vec()[g * plan.group_filters * plan.patch..];
            let yg = &mut out[g * plan.group_filters * rows..];
            T::gemm(
                rows,
                plan.patch,
                plan.group_filters,
                T::one(),
                &phi,
                (1, rows),
                fg,
                (1, plan.patch),
                T::zero(),
                yg,
                (1, rows),
            );
        }
    }
}

/// Convolution through the general im2row path even when the dense
/// shortcut would apply. Used to cross-check the two routes.
pub fn conv_forward_im2row<T: Scalar>(
    x: &Tensor<T>,
    f: &FilterBank<T>,
    geom: &ConvGeom,
) -> Result<Tensor<T>> {
    check_bias(f)?;
    let plan = ConvPlan::new(x.shape(), f.filters.shape(), geom)?;
    let mut y = Tensor::zeros(plan.out_shape(x.shape().n()));
    conv_general_forward(&plan, x, &f.filters, &mut y);
    if let Some(b) = &f.bias {
        add_bias(&mut y, b);
    }
    Ok(y)
}

/// Projected derivatives of [`conv_forward`] given `dz/dy`.
pub fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    f: &FilterBank<T>,
    geom: &ConvGeom,
    dzdy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    check_bias(f)?;
    let plan = ConvPlan::new(x.shape(), f.filters.shape(), geom)?;
    let n = x.shape().n();
    dzdy.expect_shape(plan.out_shape(n), "conv backward dz/dy")?;
    let mut dx = Tensor::zeros(x.shape());
    let mut df = Tensor::zeros(f.filters.shape());
    if plan.is_dense(geom) {
        let k = plan.patch;
        // dX (HWD x N) = F dY,  dF (HWD x D'') = X dYᵀ
        T::gemm(
            k,
            plan.filters,
            n,
            T::one(),
            f.filters.vec(),
            (1, k),
            dzdy.vec(),
            (1, plan.filters),
            T::zero(),
            dx.vec_mut(),
            (1, k),
        );
        T::gemm(
            k,
            n,
            plan.filters,
            T::one(),
            x.vec(),
            (1, k),
            dzdy.vec(),
            (plan.filters, 1),
            T::zero(),
            df.vec_mut(),
            (1, k),
        );
    } else {
        let rows = plan.layout.rows();
        let mut phi = vec![T::zero(); rows * plan.patch];
        let mut dphi = vec![T::zero(); rows * plan.patch];
        for img in 0..n {
            let image = x.image(img);
            let dy = dzdy.image(img);
            for g in 0..plan.groups {
                let c0 = g * plan.group_channels;
                let f_off = g * plan.group_filters * plan.patch;
                let dyg = &dy[g * plan.group_filters * rows..];
                plan.layout
                    .extract(image, c0, plan.group_channels, &mut phi);
                T::gemm(
                    plan.patch,
                    rows,
                    plan.group_filters,
                    T::one(),
                    &phi,
                    (rows, 1),
                    dyg,
                    (1, rows),
                    T::one(),
                    &mut df.vec_mut()[f_off..],
                    (1, plan.patch),
                );
                T::gemm(
                    rows,
                    plan.group_filters,
                    plan.patch,
                    T::one(),
                    dyg,
                    (1, rows),
                    &f.filters.vec()[f_off..],
                    (plan.patch, 1),
                    T::zero(),
                    &mut dphi,
                    (1, rows),
                );
                plan.layout
                    .scatter_add(&dphi, c0, plan.group_channels, dx.image_mut(img));
            }
        }
    }
    let db = f.bias.as_ref().map(|_| bias_grad(dzdy));
    Ok(ConvGrads { dx, df, db })
}

struct ConvtPlan {
    /// Layout of the underlying convolution, which reads the convt output.
    layout: PatchLayout,
    in_channels: usize,
    out_channels: usize,
    patch: usize,
}

impl ConvtPlan {
    fn new(xs: Shape, fs: Shape, geom: &ConvTransposeGeom) -> Result<Self> {
        let [fh, fw, out_channels, in_channels] = fs.0;
        if in_channels != xs.c() {
            return Err(Error::ShapeMismatch(format!(
                "convolution transpose filters {fs} need {in_channels} input channels, got {}",
                xs.c()
            )));
        }
        let (oh, ow) = geom.output_hw(xs.h(), xs.w(), fh, fw)?;
        let layout = PatchLayout::new(oh, ow, fh, fw, &geom.as_conv())?;
        debug_assert_eq!((layout.oh, layout.ow), (xs.h(), xs.w()));
        Ok(ConvtPlan {
            layout,
            in_channels,
            out_channels,
            patch: fh * fw * out_channels,
        })
    }

    fn out_shape(&self, n: usize) -> Shape {
        Shape::new(self.layout.h, self.layout.w, self.out_channels, n)
    }
}

/// Convolution transpose: `vec y = Mᵀ vec x`, where `M` is the convolution
/// with filters `f` (shape `H' x W' x D'' x D`), stride `U` and padding equal
/// to the crops.
pub fn convt_forward<T: Scalar>(
    x: &Tensor<T>,
    f: &FilterBank<T>,
    geom: &ConvTransposeGeom,
) -> Result<Tensor<T>> {
    let plan = ConvtPlan::new(x.shape(), f.filters.shape(), geom)?;
    if let Some(b) = &f.bias {
        if b.len() != plan.out_channels {
            return Err(Error::ShapeMismatch(format!(
                "bias of length {} for {} output channels",
                b.len(),
                plan.out_channels
            )));
        }
    }
    let n = x.shape().n();
    let rows = plan.layout.rows();
    let mut y = Tensor::zeros(plan.out_shape(n));
    let mut m = vec![T::zero(); rows * plan.patch];
    for img in 0..n {
        // φ*(X Fᵀ), X being the input image as an (HW) x D matrix
        T::gemm(
            rows,
            plan.in_channels,
            plan.patch,
            T::one(),
            x.image(img),
            (1, rows),
            f.filters.vec(),
            (plan.patch, 1),
            T::zero(),
            &mut m,
            (1, rows),
        );
        plan.layout
            .scatter_add(&m, 0, plan.out_channels, y.image_mut(img));
    }
    if let Some(b) = &f.bias {
        add_bias(&mut y, b);
    }
    Ok(y)
}

/// Projected derivatives of [`convt_forward`].
///
/// `dx` is the forward convolution of `dz/dy` with the same filters, stride
/// `U` and padding equal to the crops.
pub fn convt_backward<T: Scalar>(
    x: &Tensor<T>,
    f: &FilterBank<T>,
    geom: &ConvTransposeGeom,
    dzdy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let plan = ConvtPlan::new(x.shape(), f.filters.shape(), geom)?;
    let n = x.shape().n();
    dzdy.expect_shape(plan.out_shape(n), "convolution transpose backward dz/dy")?;
    let rows = plan.layout.rows();
    let mut dx = Tensor::zeros(x.shape());
    let mut df = Tensor::zeros(f.filters.shape());
    let mut phi = vec![T::zero(); rows * plan.patch];
    for img in 0..n {
        plan.layout
            .extract(dzdy.image(img), 0, plan.out_channels, &mut phi);
        T::gemm(
            rows,
            plan.patch,
            plan.in_channels,
            T::one(),
            &phi,
            (1, rows),
            f.filters.vec(),
            (1, plan.patch),
            T::zero(),
            dx.image_mut(img),
            (1, rows),
        );
        T::gemm(
            plan.patch,
            rows,
            plan.in_channels,
            T::one(),
            &phi,
            (rows, 1),
            x.image(img),
            (1, rows),
            T::one(),
            df.vec_mut(),
            (1, plan.patch),
        );
    }
    let db = f.bias.as_ref().map(|_| bias_grad(dzdy));
    Ok(ConvGrads { dx, df, db })
}

/// Taps contributing to convolution transpose output `k` (zero-based) along
/// one axis, as `(input index, filter index)` pairs, both zero-based.
///
/// Follows the closed-form index arithmetic with the refined summation
/// bounds: for one-based `k`, with `m = (k - 1 + C^-) mod U` and
/// `b = floor((k - 1 + C^-) / U)`, `q` runs over
/// `max(1, b + 2 - H) ..= 1 + min(floor((H' - 1 - m) / U), b)` and reads
/// input `b + 2 - q` with filter tap `m + U (q - 1) + 1`.
pub fn convt_taps(
    k: usize,
    input_len: usize,
    filter_len: usize,
    upsample: usize,
    crop: usize,
) -> Vec<(usize, usize)> {
    let base = (k + crop) / upsample;
    let m = (k + crop) % upsample;
    let lo = 1.max((base + 2).saturating_sub(input_len));
    let hi = 1 + ((filter_len - 1).saturating_sub(m) / upsample).min(base);
    if m > filter_len - 1 {
        return Vec::new();
    }
    (lo..=hi)
        .map(|q| (base + 1 - q, m + upsample * (q - 1)))
        .collect()
}

/// Convolution transpose evaluated directly from the index formula rather
/// than through row2im. Slower; provided as an independent route.
pub fn convt_forward_direct<T: Scalar>(
    x: &Tensor<T>,
    f: &FilterBank<T>,
    geom: &ConvTransposeGeom,
) -> Result<Tensor<T>> {
    let plan = ConvtPlan::new(x.shape(), f.filters.shape(), geom)?;
    let xs = x.shape();
    let [fh, fw, dout, din] = f.filters.shape().0;
    let out = plan.out_shape(xs.n());
    let taps_h: Vec<_> = (0..out.h())
        .map(|k| convt_taps(k, xs.h(), fh, geom.upsample[0], geom.crop[0]))
        .collect();
    let taps_w: Vec<_> = (0..out.w())
        .map(|k| convt_taps(k, xs.w(), fw, geom.upsample[1], geom.crop[2]))
        .collect();
    let bias = f.bias.clone();
    Ok(Tensor::from_fn(out, |i, j, dd, n| {
        let mut acc = bias.as_ref().map(|b| b[dd]).unwrap_or_else(T::zero);
        for d in 0..din {
            for &(xi, fi) in &taps_h[i] {
                for &(xj, fj) in &taps_w[j] {
                    acc += f.filters.at(fi, fj, dd, d) * x.at(xi, xj, d, n);
                }
            }
        }
        debug_assert!(dd < dout);
        acc
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{fd_projected, rand_tensor, rel_err};
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256StarStar;

    fn col(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(Shape::new(v.len(), 1, 1, 1), v).unwrap()
    }

    /// Brute-force convolution straight from the indexed sum.
    fn naive_conv(x: &Tensor<f64>, f: &FilterBank<f64>, g: &ConvGeom) -> Tensor<f64> {
        let [fh, fw, dp, dout] = f.filters.shape().0;
        let xs = x.shape();
        let (oh, ow) = g.output_hw(xs.h(), xs.w(), fh, fw).unwrap();
        let per = dout / g.groups;
        Tensor::from_fn(Shape::new(oh, ow, dout, xs.n()), |i, j, k, n| {
            let grp = k / per;
            let mut acc = f.bias.as_ref().map_or(0.0, |b| b[k]);
            for d in 0..dp {
                for jf in 0..fw {
                    for iff in 0..fh {
                        let si = (i * g.stride[0] + iff) as isize - g.pad[0] as isize;
                        let sj = (j * g.stride[1] + jf) as isize - g.pad[2] as isize;
                        if si >= 0 && sj >= 0 && (si as usize) < xs.h() && (sj as usize) < xs.w() {
                            acc += f.filters.at(iff, jf, d, k)
                                * x.at(si as usize, sj as usize, grp * dp + d, n);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn im2row_examples() {
        let x = col(&[1.0, 2.0, 3.0]);
        let m = im2row(&x, 0, (2, 1), &ConvGeom::default()).unwrap();
        assert_eq!((m.rows, m.cols), (2, 2));
        assert_eq!(
            [m.get(0, 0), m.get(0, 1), m.get(1, 0), m.get(1, 1)],
            [1.0, 2.0, 2.0, 3.0]
        );

        let m = im2row(&x, 0, (1, 1), &ConvGeom::default()).unwrap();
        assert_eq!(m.data, x.vec());

        let x = col(&[1.0, 2.0]);
        let m = im2row(&x, 0, (2, 1), &ConvGeom::new([1, 1], [1, 1, 0, 0])).unwrap();
        let rows: Vec<[f64; 2]> = (0..3).map(|p| [m.get(p, 0), m.get(p, 1)]).collect();
        assert_eq!(rows, vec![[0.0, 1.0], [1.0, 2.0], [2.0, 0.0]]);
    }

    #[test]
    fn im2row_rejects_small_input() {
        let x = col(&[1.0]);
        assert!(matches!(
            im2row(&x, 0, (3, 1), &ConvGeom::default()),
            Err(Error::InputTooSmall(_))
        ));
    }

    #[test]
    fn row2im_multiplicities_and_partition() {
        let target = Shape::new(3, 1, 1, 1);
        let ones = Matrix {
            rows: 2,
            cols: 2,
            data: vec![1.0f64; 4],
        };
        let r = row2im(&ones, target, (2, 1), &ConvGeom::default()).unwrap();
        assert_eq!(r.vec(), &[1.0, 2.0, 1.0]);

        let x = col(&[1.0, 2.0, 3.0, 4.0]);
        let g = ConvGeom::new([2, 1], [0; 4]);
        let m = im2row(&x, 0, (2, 1), &g).unwrap();
        assert_eq!(row2im(&m, x.shape(), (2, 1), &g).unwrap(), x);

        let bad = Matrix {
            rows: 3,
            cols: 2,
            data: vec![0.0f64; 6],
        };
        assert!(row2im(&bad, target, (2, 1), &ConvGeom::default()).is_err());
    }

    #[test]
    fn row2im_is_adjoint_of_im2row() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(3);
        for (shape, fhw, geom) in [
            (
                Shape::new(5, 4, 2, 1),
                (3, 2),
                ConvGeom::new([2, 1], [1, 0, 0, 1]),
            ),
            (
                Shape::new(3, 3, 1, 1),
                (2, 2),
                ConvGeom::new([1, 1], [1, 1, 1, 1]),
            ),
            (
                Shape::new(6, 2, 3, 1),
                (4, 1),
                ConvGeom::new([3, 2], [2, 2, 0, 0]),
            ),
        ] {
            let x = rand_tensor::<f64>(&mut rng, shape);
            let phi = im2row(&x, 0, fhw, &geom).unwrap();
            let mt = rand_tensor::<f64>(&mut rng, Shape::new(phi.rows * phi.cols, 1, 1, 1));
            let m = Matrix {
                rows: phi.rows,
                cols: phi.cols,
                data: mt.into_vec(),
            };
            let lhs = phi.inner(&m).unwrap();
            let rhs = x.inner(&row2im(&m, shape, fhw, &geom).unwrap()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn conv_forward_examples() {
        let x = col(&[1.0, 2.0, 3.0]);
        let f = FilterBank::new(col(&[1.0, 1.0]));
        let y = conv_forward(&x, &f, &ConvGeom::default()).unwrap();
        assert_eq!(y.vec(), &[3.0, 5.0]);

        // one-hot 1x1 filters reproduce the input
        let mut rng = Xoshiro256StarStar::seed_from_u64(1);
        let x = rand_tensor::<f64>(&mut rng, Shape::new(3, 4, 3, 2));
        let eye = Tensor::from_fn(
            Shape::new(1, 1, 3, 3),
            |_, _, d, k| if d == k { 1.0 } else { 0.0 },
        );
        assert_eq!(
            conv_forward(&x, &FilterBank::new(eye), &ConvGeom::default()).unwrap(),
            x
        );
    }

    #[test]
    fn fully_connected_case_is_matrix_product() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(11);
        let x = rand_tensor::<f64>(&mut rng, Shape::new(3, 3, 2, 4));
        let f = rand_tensor::<f64>(&mut rng, Shape::new(3, 3, 2, 5));
        let b: Vec<f64> = (0..5).map(|k| k as f64 * 0.5).collect();
        let bank = FilterBank::with_bias(f.clone(), b.clone());
        let y = conv_forward(&x, &bank, &ConvGeom::default()).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 5, 4));
        for n in 0..4 {
            for k in 0..5 {
                let expect: f64 = b[k]
                    + (0..18)
                        .map(|q| f.vec()[q + 18 * k] * x.image(n)[q])
                        .sum::<f64>();
                assert!((y.at(0, 0, k, n) - expect).abs() < 1e-12);
            }
        }
        let general = conv_forward_im2row(&x, &bank, &ConvGeom::default()).unwrap();
        assert!(rel_err(y.vec(), general.vec()) < 1e-6);

        // dense backward agrees with a finite-difference check as well
        let p = rand_tensor::<f64>(&mut rng, y.shape());
        let g = conv_backward(&x, &bank, &ConvGeom::default(), &p).unwrap();
        let fdx = fd_projected(&x, &p, |x| {
            conv_forward(x, &bank, &ConvGeom::default()).unwrap()
        });
        assert!(rel_err(g.dx.vec(), fdx.vec()) < 1e-6);
    }

    #[test]
    fn general_path_matches_naive_loops() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(5);
        for (xs, fs, geom) in [
            (
                Shape::new(5, 5, 2, 2),
                Shape::new(3, 3, 2, 3),
                ConvGeom::new([2, 2], [0, 1, 0, 1]),
            ),
            (
                Shape::new(4, 6, 4, 1),
                Shape::new(2, 3, 2, 4),
                ConvGeom::new([1, 2], [1, 0, 2, 1]).with_groups(2),
            ),
            (
                Shape::new(3, 3, 1, 1),
                Shape::new(3, 3, 1, 1),
                ConvGeom::new([1, 1], [1, 1, 1, 1]),
            ),
        ] {
            let x = rand_tensor::<f64>(&mut rng, xs);
            let f = rand_tensor::<f64>(&mut rng, fs);
            let bias: Vec<f64> = (0..fs.n()).map(|k| 0.1 * k as f64).collect();
            let bank = FilterBank::with_bias(f, bias);
            let y = conv_forward(&x, &bank, &geom).unwrap();
            let oracle = naive_conv(&x, &bank, &geom);
            assert_eq!(y.shape(), oracle.shape());
            assert!(rel_err(y.vec(), oracle.vec()) < 1e-12);
        }
    }

    #[test]
    fn conv_backward_simple_cases() {
        let x = Tensor::<f64>::scalar(3.0);
        let bank = FilterBank::new(Tensor::scalar(-2.0));
        let p = Tensor::scalar(0.5);
        let g = conv_backward(&x, &bank, &ConvGeom::default(), &p).unwrap();
        assert_eq!(g.dx.vec(), &[-1.0]);
        assert_eq!(g.df.vec(), &[1.5]);
        assert!(g.db.is_none());

        let mut rng = Xoshiro256StarStar::seed_from_u64(2);
        let x = rand_tensor::<f64>(&mut rng, Shape::new(4, 4, 2, 1));
        let bank =
            FilterBank::with_bias(rand_tensor(&mut rng, Shape::new(2, 2, 2, 3)), vec![1.0; 3]);
        let geom = ConvGeom::new([1, 1], [1, 0, 0, 1]);
        let y = conv_forward(&x, &bank, &geom).unwrap();
        let g = conv_backward(&x, &bank, &geom, &Tensor::zeros(y.shape())).unwrap();
        assert_eq!(g.dx.max_abs(), 0.0);
        assert_eq!(g.df.max_abs(), 0.0);
        assert_eq!(g.db.unwrap(), vec![0.0; 3]);
        assert!(conv_backward(&x, &bank, &geom, &Tensor::zeros(Shape::new(1, 1, 1, 1))).is_err());
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(7);
        let x = rand_tensor::<f64>(&mut rng, Shape::new(5, 5, 2, 1));
        let f = rand_tensor::<f64>(&mut rng, Shape::new(3, 3, 2, 3));
        let geom = ConvGeom::new([2, 2], [0, 1, 0, 1]);
        let bank = FilterBank::new(f.clone());
        let y = conv_forward(&x, &bank, &geom).unwrap();
        let p = rand_tensor::<f64>(&mut rng, y.shape());
        let g = conv_backward(&x, &bank, &geom, &p).unwrap();
        let fdx = fd_projected(&x, &p, |x| conv_forward(x, &bank, &geom).unwrap());
        let fdf = fd_projected(&f, &p, |f| {
            conv_forward(&x, &FilterBank::new(f.clone()), &geom).unwrap()
        });
        assert!(rel_err(g.dx.vec(), fdx.vec()) < 1e-6);
        assert!(rel_err(g.df.vec(), fdf.vec()) < 1e-6);
    }

    #[test]
    fn shape_and_group_errors() {
        let x = Tensor::<f32>::zeros(Shape::new(4, 4, 3, 1));
        let f = FilterBank::new(Tensor::zeros(Shape::new(2, 2, 2, 4)));
        assert!(matches!(
            conv_forward(&x, &f, &ConvGeom::default()),
            Err(Error::ShapeMismatch(_))
        ));
        let x = Tensor::<f32>::zeros(Shape::new(4, 4, 4, 1));
        let f = FilterBank::new(Tensor::zeros(Shape::new(2, 2, 2, 3)));
        assert!(conv_forward(&x, &f, &ConvGeom::default().with_groups(2)).is_err());
        let f = FilterBank::new(Tensor::zeros(Shape::new(5, 2, 4, 3)));
        assert!(matches!(
            conv_forward(&x, &f, &ConvGeom::default()),
            Err(Error::InputTooSmall(_))
        ));
        let f = FilterBank {
            filters: Tensor::zeros(Shape::new(2, 2, 4, 3)),
            bias: Some(vec![0.0; 2]),
        };
        assert!(conv_forward(&x, &f, &ConvGeom::default()).is_err());
    }

    #[test]
    fn groups_are_block_diagonal() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(9);
        let mut x = rand_tensor::<f64>(&mut rng, Shape::new(4, 4, 4, 1));
        // keep only group 0's channels
        for d in 2..4 {
            for j in 0..4 {
                for i in 0..4 {
                    *x.at_mut(i, j, d, 0) = 0.0;
                }
            }
        }
        let bank = FilterBank::new(rand_tensor(&mut rng, Shape::new(3, 3, 2, 4)));
        let y = conv_forward(&x, &bank, &ConvGeom::default().with_groups(2)).unwrap();
        for k in 2..4 {
            for j in 0..2 {
                for i in 0..2 {
                    assert_eq!(y.at(i, j, k, 0), 0.0);
                }
            }
        }
        assert!(y.at(0, 0, 0, 0) != 0.0);
    }

    #[test]
    fn convt_examples() {
        let geom = ConvTransposeGeom::default();
        let x = col(&[1.0, -2.0, 4.0]);
        let y = convt_forward(&x, &FilterBank::new(Tensor::scalar(3.0)), &geom).unwrap();
        assert_eq!(y.vec(), &[3.0, -6.0, 12.0]);

        let x = col(&[1.0, 1.0]);
        let f = FilterBank::new(col(&[1.0, 2.0, 3.0]));
        let geom = ConvTransposeGeom::new([2, 1], [0; 4]);
        let y = convt_forward(&x, &f, &geom).unwrap();
        assert_eq!(y.vec(), &[1.0, 2.0, 4.0, 2.0, 3.0]);
        assert_eq!(convt_forward_direct(&x, &f, &geom).unwrap().vec(), y.vec());
    }

    #[test]
    fn convt_rejects_empty_output() {
        let x = col(&[1.0]);
        let f = FilterBank::new(col(&[1.0, 1.0]));
        assert!(convt_forward(&x, &f, &ConvTransposeGeom::new([1, 1], [1, 1, 0, 0])).is_err());
    }

    #[test]
    fn convt_interpolates_with_strided_taps() {
        // impulse at x_2 with U = 3: outputs 3..=7 (one-based) read taps in order
        let x = col(&[0.0, 1.0, 0.0]);
        let taps: Vec<f64> = (1..=5).map(|v| v as f64).collect();
        let f = FilterBank::new(col(&taps));
        let geom = ConvTransposeGeom::new([3, 1], [0; 4]);
        let y = convt_forward(&x, &f, &geom).unwrap();
        assert_eq!(y.shape().h(), 3 * 2 + 5);
        assert_eq!(
            y.vec(),
            &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 0.0, 0.0, 0.0]
        );
        // samples with U | (i'' - 1) use taps f_1, f_4, ... of the overlapping inputs
        let x = col(&[1.0, 10.0, 100.0]);
        let y = convt_forward(&x, &f, &geom).unwrap();
        assert_eq!(y.at(3, 0, 0, 0), 10.0 * 1.0 + 1.0 * 4.0);
        assert_eq!(y.at(6, 0, 0, 0), 100.0 * 1.0 + 10.0 * 4.0);
    }

    #[test]
    fn convt_backward_matches_finite_differences() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(17);
        let x = rand_tensor::<f64>(&mut rng, Shape::new(3, 4, 2, 2));
        let f = rand_tensor::<f64>(&mut rng, Shape::new(3, 2, 3, 2));
        let geom = ConvTransposeGeom::new([2, 3], [1, 0, 0, 2]);
        let bank = FilterBank::with_bias(f.clone(), vec![0.3, -0.2, 0.1]);
        let y = convt_forward(&x, &bank, &geom).unwrap();
        assert!(
            rel_err(
                y.vec(),
                convt_forward_direct(&x, &bank, &geom).unwrap().vec()
            ) < 1e-12
        );
        let p = rand_tensor::<f64>(&mut rng, y.shape());
        let g = convt_backward(&x, &bank, &geom, &p).unwrap();
        let fdx = fd_projected(&x, &p, |x| convt_forward(x, &bank, &geom).unwrap());
        let fdf = fd_projected(&f, &p, |f| {
            convt_forward(
                &x,
                &FilterBank::with_bias(f.clone(), vec![0.3, -0.2, 0.1]),
                &geom,
            )
            .unwrap()
        });
        assert!(rel_err(g.dx.vec(), fdx.vec()) < 1e-6);
        assert!(rel_err(g.df.vec(), fdf.vec()) < 1e-6);
        let sums: Vec<f64> = (0..3)
            .map(|k| {
                (0..2)
                    .map(|n| {
                        let plane = y.shape().h() * y.shape().w();
                        p.image(n)[k * plane..(k + 1) * plane].iter().sum::<f64>()
                    })
                    .sum()
            })
            .collect();
        assert!(rel_err(&g.db.unwrap(), &sums) < 1e-12);

        // dx is the forward convolution of dz/dy
        let conv = conv_forward(&p, &FilterBank::new(f.clone()), &geom.as_conv()).unwrap();
        assert!(rel_err(g.dx.vec(), conv.vec()) < 1e-12);

        let zero = convt_backward(&x, &bank, &geom, &Tensor::zeros(y.shape())).unwrap();
        assert_eq!(zero.dx.max_abs() + zero.df.max_abs(), 0.0);
    }
}
