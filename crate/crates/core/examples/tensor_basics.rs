//! Tensor layout, element access and the binary blob format.

use convkit::tensor::{decode_blob, encode_blob};
use convkit::{Shape, Tensor};

fn main() -> convkit::Result<()> {
    // 2 x 3 spatial, 2 channels, batch of 1; height varies fastest.
    let x = Tensor::<f32>::from_fn(Shape::new(2, 3, 2, 1), |i, j, c, _| {
        (100 * c + 10 * j + i) as f32
    });
    println!("shape {}", x.shape());
    println!("vec order {:?}", x.vec());
    println!("x(1, 2, 1, 0) = {}", x.at(1, 2, 1, 0));

    let y = x.map(|v| v * 0.5);
    println!("<x, y> = {}", x.inner(&y)?);

    let bytes = encode_blob(&x);
    let back: Tensor<f32> = decode_blob(&bytes)?;
    println!("blob of {} bytes round trips: {}", bytes.len(), back == x);

    let flat = x.reshaped(Shape::new(1, 1, 12, 1))?;
    println!(
        "reshaped to {} keeps the data: {}",
        flat.shape(),
        flat.vec() == x.vec()
    );
    Ok(())
}
