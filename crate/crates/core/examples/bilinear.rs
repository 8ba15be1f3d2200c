//! Bilinear resampling with a sampling grid, and its derivatives.

use convkit::resample::{bilinear_backward, bilinear_forward, identity_grid};
use convkit::{Shape, Tensor};

fn main() -> convkit::Result<()> {
    let x = Tensor::<f64>::from_fn(Shape::new(3, 3, 1, 1), |i, j, _, _| (10 * i + j) as f64);

    let same = bilinear_forward(&x, &identity_grid(3, 3, 1))?;
    println!("identity grid reproduces the input: {}", same == x);

    let up = bilinear_forward(&x, &identity_grid(5, 5, 1))?;
    println!("resized to {}:", up.shape());
    for i in 0..5 {
        let row: Vec<String> = (0..5)
            .map(|j| format!("{:5.1}", up.at(i, j, 0, 0)))
            .collect();
        println!("  {}", row.join(" "));
    }

    // Shift every sample half a pixel down: grid rows are offset by 0.5 of
    // the [-1, 1] pixel pitch.
    let mut g = identity_grid::<f64>(3, 3, 1);
    for j in 0..3 {
        for i in 0..3 {
            *g.at_mut(0, i, j, 0) += 0.5;
        }
    }
    let y = bilinear_forward(&x, &g)?;
    println!("shifted: {:?}", y.vec());
    let (dx, dg) = bilinear_backward(&x, &g, &Tensor::ones(y.shape()))?;
    println!("dz/dx {:?}", dx.vec());
    println!("dz/dgrid {:?}", dg.vec());
    Ok(())
}
