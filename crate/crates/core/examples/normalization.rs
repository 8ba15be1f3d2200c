//! Batch normalization, local response normalization, spatial
//! normalization and softmax.

use convkit::norm::channel_moments;
use convkit::norm::{
    bnorm_forward, bnorm_inference, lrn_forward, softmax_forward, spnorm_forward, LrnParams,
    SpnormParams, BNORM_EPS,
};
use convkit::{Shape, Tensor};

fn main() -> convkit::Result<()> {
    let x = Tensor::<f64>::from_fn(Shape::new(2, 2, 2, 3), |i, j, c, n| {
        (i + 2 * j) as f64 * (c + 1) as f64 + n as f64
    });

    let out = bnorm_forward(&x, &[1.0, 2.0], Some(&[0.0, -1.0]), BNORM_EPS)?;
    let (mu, s2) = channel_moments(&out.y);
    println!("batch moments {:?} {:?}", out.mu, out.sigma2);
    println!("normalized moments {mu:?} {s2:?}");
    let fixed = bnorm_inference(
        &x,
        &[1.0, 2.0],
        Some(&[0.0, -1.0]),
        &out.mu,
        &out.sigma2,
        BNORM_EPS,
    )?;
    println!(
        "inference with the batch moments matches: {}",
        fixed == out.y
    );

    let lrn = lrn_forward(&x, &LrnParams::default())?;
    println!("lrn first image {:?}", &lrn.vec()[..8]);

    let sp = spnorm_forward(
        &x,
        &SpnormParams {
            window: [3, 3],
            alpha: 1.0,
            beta: 0.5,
        },
    )?;
    println!("spnorm first image {:?}", &sp.vec()[..8]);

    let s = softmax_forward(&Tensor::<f64>::from_f64(
        Shape::new(1, 1, 4, 1),
        &[1000.0, 999.0, -1000.0, 0.0],
    )?);
    println!("softmax {:?} sums to {}", s.vec(), s.sum());
    Ok(())
}
