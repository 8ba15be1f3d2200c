//! Shared test graphs.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

use super::{Bindings, BnormConfig, Graph, LayerKind};
use crate::conv::ConvGeom;
use crate::tensor::{Shape, Tensor};
use crate::testing::rand_tensor;

/// Two convolutions of `x0` multiplied by the shared `w4`, which is also
/// the multiplier of a batch normalization of `x4`; the product is the
/// bias of a final convolution. Sinks are `x6` (the batch mean) and `x7`.
pub fn fig_dag(seed: u64) -> (Graph, Bindings<'static, f64>) {
    let g = Graph::builder()
        .input("x0")
        .input("x4")
        .param("w1", Shape::new(3, 3, 2, 1))
        .param("w2", Shape::new(3, 3, 2, 1))
        .param("w4", Shape::new(1, 1, 1, 1))
        .param("w5", Shape::new(3, 3, 1, 1))
        .layer(
            "f1",
            LayerKind::Conv(ConvGeom::default()),
            &["x0", "w1"],
            &["x1"],
        )
        .layer(
            "f2",
            LayerKind::Conv(ConvGeom::default()),
            &["x0", "w2"],
            &["x2"],
        )
        .layer("f3", LayerKind::Mul, &["x1", "x2", "w4"], &["x3"])
        .layer(
            "f4",
            LayerKind::Bnorm(BnormConfig::default()),
            &["x4", "w4"],
            &["x5", "x6"],
        )
        .layer(
            "f5",
            LayerKind::Conv(ConvGeom::default()),
            &["x5", "w5", "x3"],
            &["x7"],
        )
        .build()
        .expect("fixture graph is valid");
    let mut r = Xoshiro256StarStar::seed_from_u64(seed);
    let mut b = Bindings::new();
    for (name, shape) in [
        ("x0", Shape::new(3, 3, 2, 1)),
        ("x4", Shape::new(4, 4, 1, 3)),
        ("w1", Shape::new(3, 3, 2, 1)),
        ("w2", Shape::new(3, 3, 2, 1)),
        ("w4", Shape::new(1, 1, 1, 1)),
        ("w5", Shape::new(3, 3, 1, 1)),
    ] {
        b.bind_owned(name, rand_tensor(&mut r, shape));
    }
    (g, b)
}

pub fn fig_seeds(seed: u64) -> Vec<(&'static str, Tensor<f64>)> {
    let mut r = Xoshiro256StarStar::seed_from_u64(seed ^ 0x5eed);
    vec![
        ("x6", rand_tensor(&mut r, Shape::new(1, 1, 1, 1))),
        ("x7", rand_tensor(&mut r, Shape::new(2, 2, 1, 3))),
    ]
}
