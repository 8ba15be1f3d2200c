//! Max and average pooling with their backward modes.

use convkit::pool::{pool_backward, pool_forward};
use convkit::{PoolGeom, Shape, Tensor};

fn main() -> convkit::Result<()> {
    let x = Tensor::<f64>::from_f64(
        Shape::new(4, 4, 1, 1),
        &[
            1., 5., 2., 0., 3., 4., 8., 1., 0., 2., 6., 7., 9., 1., 3., 2.,
        ],
    )?;
    for geom in [
        PoolGeom::max([2, 2], [2, 2]),
        PoolGeom::avg([2, 2], [2, 2]),
        PoolGeom::max([3, 3], [1, 1]).with_pad([1, 1, 1, 1]),
    ] {
        let y = pool_forward(&x, &geom)?;
        let dx = pool_backward(&x, &geom, &Tensor::ones(y.shape()))?;
        println!(
            "{:?} window {:?} stride {:?} pad {:?}",
            geom.mode, geom.window, geom.stride, geom.pad
        );
        println!("  y  {} {:?}", y.shape(), y.vec());
        println!("  dx {:?}", dx.vec());
    }
    Ok(())
}
