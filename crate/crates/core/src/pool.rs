//! Max and average spatial pooling.
//!
//! Windows straddling the border are cropped to the unpadded input: max
//! pooling only looks at in-bounds samples, and average pooling divides by
//! the number of in-bounds samples rather than the window area.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeom {
    /// `(H', W')`.
    pub window: [usize; 2],
    #[serde(default = "unit_stride")]
    pub stride: [usize; 2],
    /// Top, bottom, left, right; each at most `window - 1`.
    #[serde(default)]
    pub pad: [usize; 4],
    pub mode: PoolMode,
}

fn unit_stride() -> [usize; 2] {
    [1, 1]
}

impl PoolGeom {
    pub fn new(window: [usize; 2], stride: [usize; 2], pad: [usize; 4], mode: PoolMode) -> Self {
        PoolGeom {
            window,
            stride,
            pad,
            mode,
        }
    }

    pub fn max(window: [usize; 2], stride: [usize; 2]) -> Self {
        Self::new(window, stride, [0; 4], PoolMode::Max)
    }

    pub fn avg(window: [usize; 2], stride: [usize; 2]) -> Self {
        Self::new(window, stride, [0; 4], PoolMode::Avg)
    }

    pub fn with_pad(mut self, pad: [usize; 4]) -> Self {
        self.pad = pad;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.window.contains(&0) || self.stride.contains(&0) {
            return Err(Error::InvalidParam(format!(
                "pooling window {:?} and stride {:?} must be positive",
                self.window, self.stride
            )));
        }
        let [ph, pw] = [self.window[0] - 1, self.window[1] - 1];
        if self.pad[0] > ph || self.pad[1] > ph || self.pad[2] > pw || self.pad[3] > pw {
            return Err(Error::InvalidParam(format!(
                "pooling pads {:?} exceed window {:?} minus one",
                self.pad, self.window
            )));
        }
        Ok(())
    }

    /// Output `(H'', W'')` for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let axis = |len: usize, win: usize, s: usize, lo: usize, hi: usize| {
            let padded = len + lo + hi;
            if padded < win {
                Err(Error::InputTooSmall(format!(
                    "padded input {padded} is smaller than pooling window {win}"
                )))
            } else {
                Ok(1 + (padded - win) / s)
            }
        };
        Ok((
            axis(h, self.window[0], self.stride[0], self.pad[0], self.pad[1])?,
            axis(w, self.window[1], self.stride[1], self.pad[2], self.pad[3])?,
        ))
    }

    /// In-bounds input range `[start, end)` of output `o` along one axis.
    fn span(o: usize, stride: usize, pad: usize, win: usize, len: usize) -> (usize, usize) {
        let start = (o * stride) as isize - pad as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + win as isize).max(0) as usize).min(len);
        (lo, hi)
    }

    fn windows(&self, h: usize, w: usize) -> Result<Windows> {
        let (oh, ow) = self.output_hw(h, w)?;
        Ok(Windows {
            rows: (0..oh)
                .map(|o| Self::span(o, self.stride[0], self.pad[0], self.window[0], h))
                .collect(),
            cols: (0..ow)
                .map(|o| Self::span(o, self.stride[1], self.pad[2], self.window[1], w))
                .collect(),
        })
    }
}

struct Windows {
    rows: Vec<(usize, usize)>,
    cols: Vec<(usize, usize)>,
}

impl Windows {
    fn out_shape(&self, s: Shape) -> Shape {
        Shape::new(self.rows.len(), self.cols.len(), s.c(), s.n())
    }
}

/// Location of the maximum in a window, first in height-fastest scan order.
fn argmax<T: Scalar>(
    plane: &[T],
    h: usize,
    (r0, r1): (usize, usize),
    (c0, c1): (usize, usize),
) -> usize {
    let mut best = r0 + h * c0;
    for j in c0..c1 {
        for i in r0..r1 {
            let k = i + h * j;
            if plane[k] > plane[best] {
                best = k;
            }
        }
    }
    best
}

pub fn pool_forward<T: Scalar>(x: &Tensor<T>, geom: &PoolGeom) -> Result<Tensor<T>> {
    let s = x.shape();
    let win = geom.windows(s.h(), s.w())?;
    let out = win.out_shape(s);
    let mut y = Tensor::zeros(out);
    let (h, plane) = (s.h(), s.h() * s.w());
    let oplane = out.h() * out.w();
    for (src, dst) in x.vec().chunks(plane).zip(y.vec_mut().chunks_mut(oplane)) {
        for (oj, &cols) in win.cols.iter().enumerate() {
            for (oi, &rows) in win.rows.iter().enumerate() {
                dst[oi + out.h() * oj] = match geom.mode {
                    PoolMode::Max => src[argmax(src, h, rows, cols)],
                    PoolMode::Avg => {
                        let mut acc = T::zero();
                        for j in cols.0..cols.1 {
                            for i in rows.0..rows.1 {
                                acc += src[i + h * j];
                            }
                        }
                        acc / T::of(((rows.1 - rows.0) * (cols.1 - cols.0)) as f64)
                    }
                };
            }
        }
    }
    Ok(y)
}

pub fn pool_backward<T: Scalar>(
    x: &Tensor<T>,
    geom: &PoolGeom,
    dzdy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = x.shape();
    let win = geom.windows(s.h(), s.w())?;
    let out = win.out_shape(s);
    dzdy.expect_shape(out, "pooling backward dz/dy")?;
    let mut dx = Tensor::zeros(s);
    let (h, plane) = (s.h(), s.h() * s.w());
    let oplane = out.h() * out.w();
    for ((src, dsrc), dy) in x
        .vec()
        .chunks(plane)
        .zip(dx.vec_mut().chunks_mut(plane))
        .zip(dzdy.vec().chunks(oplane))
    {
        for (oj, &cols) in win.cols.iter().enumerate() {
            for (oi, &rows) in win.rows.iter().enumerate() {
                let p = dy[oi + out.h() * oj];
                match geom.mode {
                    PoolMode::Max => dsrc[argmax(src, h, rows, cols)] += p,
                    PoolMode::Avg => {
                        let share = p / T::of(((rows.1 - rows.0) * (cols.1 - cols.0)) as f64);
                        for j in cols.0..cols.1 {
                            for i in rows.0..rows.1 {
                                dsrc[i + h * j] += share;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{fd_projected, rand_tensor, rel_err};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256StarStar;

    fn col(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(Shape::new(v.len(), 1, 1, 1), v).unwrap()
    }

    /// Counts window placements `t` with start `S t - P^-` whose window stays
    /// inside the padded input.
    fn placements(h: usize, win: usize, s: usize, lo: usize, hi: usize) -> usize {
        (0..).take_while(|t| s * t + win <= h + lo + hi).count()
    }

    #[test]
    fn max_and_avg_examples() {
        let y = pool_forward(&col(&[1.0, 3.0, 2.0]), &PoolGeom::max([2, 1], [1, 1])).unwrap();
        assert_eq!(y.vec(), &[3.0, 3.0]);

        let g = PoolGeom::avg([2, 1], [1, 1]).with_pad([0, 1, 0, 0]);
        let y = pool_forward(&col(&[4.0]), &g).unwrap();
        assert_eq!(y.vec(), &[4.0]);

        let x = Tensor::<f64>::filled(Shape::new(5, 4, 2, 1), 2.5);
        let g = PoolGeom::avg([3, 2], [2, 3]).with_pad([2, 1, 1, 1]);
        assert!(pool_forward(&x, &g)
            .unwrap()
            .vec()
            .iter()
            .all(|&v| v == 2.5));
    }

    #[test]
    fn geometry_errors() {
        let x = Tensor::<f32>::zeros(Shape::new(2, 2, 1, 1));
        assert!(matches!(
            pool_forward(&x, &PoolGeom::max([3, 1], [1, 1])),
            Err(Error::InputTooSmall(_))
        ));
        assert!(matches!(
            pool_forward(&x, &PoolGeom::max([2, 2], [1, 1]).with_pad([2, 0, 0, 0])),
            Err(Error::InvalidParam(_))
        ));
        let y = pool_forward(&x, &PoolGeom::max([1, 1], [1, 1])).unwrap();
        assert!(pool_backward(
            &x,
            &PoolGeom::max([1, 1], [1, 1]),
            &y.reshaped(Shape::new(4, 1, 1, 1)).unwrap()
        )
        .is_err());
    }

    #[test]
    fn max_backward_routes_to_argmax() {
        let x = col(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let g = PoolGeom::max([2, 1], [1, 1]);
        let dy = col(&[1.0, 10.0, 100.0, 1000.0]);
        let dx = pool_backward(&x, &g, &dy).unwrap();
        assert_eq!(dx.vec(), &[0.0, 1.0, 10.0, 100.0, 1000.0]);

        // ties go to the first sample in scan order
        let x = col(&[2.0, 2.0]);
        let dx = pool_backward(&x, &PoolGeom::max([2, 1], [1, 1]), &col(&[1.0])).unwrap();
        assert_eq!(dx.vec(), &[1.0, 0.0]);
    }

    #[test]
    fn avg_backward_spreads_uniformly() {
        let x = col(&[0.0; 4]);
        let g = PoolGeom::avg([2, 1], [2, 1]);
        let dx = pool_backward(&x, &g, &col(&[2.0, 6.0])).unwrap();
        assert_eq!(dx.vec(), &[1.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(4);
        let x = rand_tensor::<f64>(&mut rng, Shape::new(6, 5, 2, 2));
        for g in [
            PoolGeom::avg([3, 2], [2, 1]).with_pad([1, 2, 1, 0]),
            PoolGeom::max([3, 2], [2, 1]).with_pad([1, 2, 1, 0]),
        ] {
            let y = pool_forward(&x, &g).unwrap();
            let p = rand_tensor::<f64>(&mut rng, y.shape());
            let dx = pool_backward(&x, &g, &p).unwrap();
            let fd = fd_projected(&x, &p, |x| pool_forward(x, &g).unwrap());
            assert!(rel_err(dx.vec(), fd.vec()) < 1e-6, "{g:?}");
        }
    }

    #[test]
    fn output_size_matches_placement_count() {
        for h in 1..=8 {
            for win in 1..=4 {
                for s in 1..=3 {
                    for lo in 0..win {
                        for hi in 0..win {
                            let g = PoolGeom::max([win, 1], [s, 1]).with_pad([lo, hi, 0, 0]);
                            let x = Tensor::<f32>::zeros(Shape::new(h, 1, 1, 1));
                            match pool_forward(&x, &g) {
                                Ok(y) => assert_eq!(y.shape().h(), placements(h, win, s, lo, hi)),
                                Err(_) => assert!(h + lo + hi < win),
                            }
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn max_pool_commutes_with_shift(seed in 0u64..1000, c in -5.0f64..5.0, win in 1usize..4, s in 1usize..3) {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            let x = rand_tensor::<f64>(&mut rng, Shape::new(5, 4, 2, 1));
            let g = PoolGeom::max([win, win], [s, s]).with_pad([win - 1, 0, 0, win - 1]);
            let shifted = pool_forward(&x.map(|v| v + c), &g).unwrap();
            let expect = pool_forward(&x, &g).unwrap().map(|v| v + c);
            prop_assert_eq!(shifted, expect);
        }

        #[test]
        fn avg_pool_of_ones_is_ones(h in 1usize..7, w in 1usize..7, win in 1usize..4, s in 1usize..3, lo in 0usize..3, hi in 0usize..3) {
            let (lo, hi) = (lo.min(win - 1), hi.min(win - 1));
            let g = PoolGeom::avg([win, win], [s, s]).with_pad([lo, hi, hi, lo]);
            let x = Tensor::<f64>::ones(Shape::new(h, w, 1, 1));
            if let Ok(y) = pool_forward(&x, &g) {
                prop_assert!(y.vec().iter().all(|&v| v == 1.0));
            }
        }

        #[test]
        fn max_backward_conserves_mass(seed in 0u64..1000) {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            let x = rand_tensor::<f64>(&mut rng, Shape::new(6, 6, 1, 1));
            let g = PoolGeom::max([3, 2], [2, 2]).with_pad([1, 1, 0, 1]);
            let y = pool_forward(&x, &g).unwrap();
            let p = rand_tensor::<f64>(&mut rng, y.shape());
            let dx = pool_backward(&x, &g, &p).unwrap();
            prop_assert!((dx.sum() - p.sum()).abs() < 1e-12);
        }
    }
}
