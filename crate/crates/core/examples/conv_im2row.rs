//! Convolution as a matrix product of the patch matrix with the filters.

use convkit::conv::{conv_backward, conv_forward, conv_forward_im2row, im2row};
use convkit::{ConvGeom, FilterBank, Shape, Tensor};

fn main() -> convkit::Result<()> {
    let x = Tensor::<f64>::from_fn(Shape::new(4, 4, 1, 1), |i, j, _, _| (i + 4 * j) as f64);
    let geom = ConvGeom::new([1, 1], [0; 4]);

    let phi = im2row(&x, 0, (2, 2), &geom)?;
    println!("patch matrix is {} x {}", phi.rows, phi.cols);
    for r in 0..3 {
        let row: Vec<f64> = (0..phi.cols).map(|c| phi.get(r, c)).collect();
        println!("  row {r}: {row:?}");
    }

    let f = FilterBank::with_bias(
        Tensor::from_f64(
            Shape::new(2, 2, 1, 2),
            &[1.0, 0.0, 0.0, -1.0, 0.25, 0.25, 0.25, 0.25],
        )?,
        vec![0.0, 1.0],
    );
    let strided = ConvGeom::new([2, 2], [1, 0, 1, 0]);
    let y = conv_forward(&x, &f, &strided)?;
    let y2 = conv_forward_im2row(&x, &f, &strided)?;
    println!(
        "output {} ; direct and im2row agree: {}",
        y.shape(),
        y == y2
    );
    println!("diagonal difference channel: {:?}", &y.vec()[..4]);

    let g = conv_backward(&x, &f, &strided, &Tensor::ones(y.shape()))?;
    println!("dz/dbias with a ones projection: {:?}", g.db.unwrap());
    println!("dz/dfilters: {:?}", g.df.vec());
    Ok(())
}
