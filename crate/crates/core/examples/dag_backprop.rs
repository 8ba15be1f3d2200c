//! A small DAG with a shared parameter and a fan-out variable, evaluated by
//! backpropagation and by the explicit reversed graph.

use convkit::graph::{Bindings, ForwardOptions, Graph, LayerKind};
use convkit::{ConvGeom, Shape, Tensor};

fn main() -> convkit::Result<()> {
    let graph = Graph::builder()
        .input("x")
        .param("w", Shape::new(2, 2, 1, 1))
        .param("s", Shape::new(1, 1, 1, 1))
        .layer(
            "conv_a",
            LayerKind::Conv(ConvGeom::default()),
            &["x", "w"],
            &["a"],
        )
        .layer("relu", LayerKind::Relu, &["a"], &["r"])
        .layer(
            "conv_b",
            LayerKind::Conv(ConvGeom::default()),
            &["r", "w"],
            &["b"],
        )
        .layer("scale", LayerKind::Mul, &["b", "s"], &["c"])
        .layer("skip", LayerKind::Sum, &["c", "s"], &["y"])
        .build()?;

    println!("layer order {:?}", graph.schedule());
    println!("variable order {:?}", graph.toposort_variables());

    let mut b = Bindings::new();
    b.bind_owned(
        "x",
        Tensor::<f64>::from_fn(Shape::new(3, 3, 1, 1), |i, j, _, _| {
            i as f64 - j as f64 + 0.5
        }),
    );
    b.bind_owned(
        "w",
        Tensor::from_f64(Shape::new(2, 2, 1, 1), &[0.5, -0.25, 1.0, 0.75])?,
    );
    b.bind_owned("s", Tensor::scalar(2.0));

    let mut tape = graph.forward(&b, ForwardOptions::train())?;
    println!("y = {:?}", tape.value("y").unwrap().vec());
    graph.backward(&mut tape, &[("y", Tensor::ones(Shape::new(1, 1, 1, 1)))])?;
    println!(
        "dy/dw = {:?} (sum over both uses)",
        tape.deriv("w").unwrap().vec()
    );
    println!("dy/ds = {:?}", tape.deriv("s").unwrap().vec());

    let rev = graph.reverse_graph()?;
    println!("reversed graph layers:");
    for l in rev.graph.layers() {
        println!("  {:<12} {:?} -> {:?}", l.name, l.inputs, l.outputs);
    }
    let dtape = rev.evaluate(
        &graph,
        &tape,
        &[("y", Tensor::ones(Shape::new(1, 1, 1, 1)))],
    )?;
    let dw = dtape.value(&rev.derivatives["w"]).unwrap();
    println!(
        "reversed graph agrees on dy/dw: {}",
        dw == tape.deriv("w").unwrap()
    );
    Ok(())
}
