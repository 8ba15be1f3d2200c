//! Upsampling with the convolution transpose and its duality with convolution.

use convkit::conv::{conv_forward, convt_forward};
use convkit::{ConvGeom, ConvTransposeGeom, FilterBank, Shape, Tensor};

fn main() -> convkit::Result<()> {
    // A bilinear 4 x 4 kernel doubles the resolution.
    let k = [0.25, 0.75, 0.75, 0.25];
    let f = Tensor::<f64>::from_fn(Shape::new(4, 4, 1, 1), |i, j, _, _| k[i] * k[j]);
    let bank = FilterBank::new(f);
    let geom = ConvTransposeGeom::new([2, 2], [1, 1, 1, 1]);

    let x = Tensor::from_fn(Shape::new(3, 3, 1, 1), |i, j, _, _| (i + j) as f64);
    let y = convt_forward(&x, &bank, &geom)?;
    println!("{} upsampled to {}", x.shape(), y.shape());
    for i in 0..y.shape().h() {
        let row: Vec<String> = (0..y.shape().w())
            .map(|j| format!("{:5.2}", y.at(i, j, 0, 0)))
            .collect();
        println!("  {}", row.join(" "));
    }

    // <y, conv(u)> = <convt(y), u> for any u of the right size.
    let u = Tensor::from_fn(y.shape(), |i, j, _, _| ((3 * i + 5 * j) % 7) as f64 - 3.0);
    let conv_u = conv_forward(&u, &bank, &ConvGeom::new([2, 2], [1, 1, 1, 1]))?;
    println!("<x, conv(u)> = {:.12}", x.inner(&conv_u)?);
    println!("<convt(x), u> = {:.12}", y.inner(&u)?);
    Ok(())
}
