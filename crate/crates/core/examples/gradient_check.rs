//! Checks backpropagated derivatives against finite differences.

use convkit::graph::{grad_check, Bindings, GradCheckOptions, Graph, LayerKind};
use convkit::norm::LrnParams;
use convkit::{ConvGeom, LossKind, PoolGeom, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

fn main() -> convkit::Result<()> {
    let graph = Graph::builder()
        .input("x")
        .label("c")
        .param("f", Shape::new(3, 3, 2, 4))
        .param("b", Shape::new(1, 1, 4, 1))
        .param("g", Shape::new(2, 2, 4, 3))
        .layer(
            "conv",
            LayerKind::Conv(ConvGeom::new([1, 1], [1, 1, 1, 1])),
            &["x", "f", "b"],
            &["a"],
        )
        .layer("sigmoid", LayerKind::Sigmoid, &["a"], &["s"])
        .layer(
            "lrn",
            LayerKind::Lrn(LrnParams {
                group_size: 3,
                ..Default::default()
            }),
            &["s"],
            &["n"],
        )
        .layer(
            "pool",
            LayerKind::Pool(PoolGeom::avg([2, 2], [2, 2])),
            &["n"],
            &["p"],
        )
        .layer(
            "fc",
            LayerKind::Conv(ConvGeom::default()),
            &["p", "g"],
            &["scores"],
        )
        .layer(
            "loss",
            LayerKind::Loss {
                loss: LossKind::SoftmaxLog,
            },
            &["scores", "c"],
            &["z"],
        )
        .build()?;

    let mut rng = Xoshiro256StarStar::seed_from_u64(5);
    let mut random = |s: Shape| Tensor::<f64>::from_fn(s, |_, _, _, _| rng.random_range(-1.0..1.0));
    let mut b = Bindings::new();
    b.bind_owned("x", random(Shape::new(4, 4, 2, 2)));
    b.bind_owned("f", random(Shape::new(3, 3, 2, 4)));
    b.bind_owned("b", random(Shape::new(1, 1, 4, 1)));
    b.bind_owned("g", random(Shape::new(2, 2, 4, 3)));
    b.bind_owned("c", Tensor::from_f64(Shape::new(1, 1, 1, 2), &[1.0, 3.0])?);

    let report = grad_check(&graph, &b, &GradCheckOptions::default())?;
    for v in &report.variables {
        println!(
            "{:<2} {:>3} elements, max relative error {:.2e}",
            v.name, v.checked, v.max_rel_err
        );
    }
    println!("worst {:.2e}", report.worst());
    Ok(())
}
