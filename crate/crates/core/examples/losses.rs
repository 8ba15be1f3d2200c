//! Classification and attribute losses with their derivatives.

use convkit::loss::{loss_backward, loss_forward};
use convkit::{LossKind, Shape, Tensor};

fn main() -> convkit::Result<()> {
    // Three images, four classes; label 0 is ignored.
    let x = Tensor::<f64>::from_f64(
        Shape::new(1, 1, 4, 3),
        &[
            2.0, 0.5, -1.0, 0.0, 0.1, 0.2, 3.0, 0.3, 1000.0, -1000.0, 0.0, 0.0,
        ],
    )?;
    let c = Tensor::from_f64(Shape::new(1, 1, 1, 3), &[1.0, 2.0, 1.0])?;
    for kind in [
        LossKind::SoftmaxLog,
        LossKind::ClassError,
        LossKind::TopK { k: 2 },
        LossKind::MHinge,
        LossKind::MSHinge,
    ] {
        let z = loss_forward(&x, &c, &kind, None)?;
        let dx = loss_backward(&x, &c, &kind, None, 1.0)?;
        println!("{kind:?}: {z:.6}  dx[..4] {:?}", &dx.vec()[..4]);
    }

    let p = Tensor::<f64>::from_f64(
        Shape::new(1, 1, 4, 3),
        &[
            0.7, 0.1, 0.1, 0.1, 0.2, 0.2, 0.5, 0.1, 0.25, 0.25, 0.25, 0.25,
        ],
    )?;
    println!(
        "Log on probabilities: {:.6}",
        loss_forward(&p, &c, &LossKind::Log, None)?
    );

    // Attribute losses take one ±1 label per score; 0 skips the score.
    let a = Tensor::<f64>::from_f64(Shape::new(1, 1, 2, 1), &[0.8, -2.0])?;
    let ca = Tensor::from_f64(Shape::new(1, 1, 2, 1), &[1.0, 1.0])?;
    for kind in [
        LossKind::Logistic,
        LossKind::Hinge,
        LossKind::BinaryError { threshold: 0.0 },
    ] {
        println!("{kind:?}: {:.6}", loss_forward(&a, &ca, &kind, None)?);
    }
    Ok(())
}
