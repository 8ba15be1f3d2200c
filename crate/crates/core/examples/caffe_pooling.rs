//! Caffe's pooling size rule expressed as explicit asymmetric padding.

use convkit::geometry::{caffe_pool_equiv, output_size_filter, FilterSpec};

fn main() -> convkit::Result<()> {
    println!(
        "{:>3} {:>4} {:>6} {:>4} | {:>8} {:>6} {:>6}",
        "H", "size", "stride", "pad", "pads", "caffe", "floor"
    );
    for (h, size, stride, pad) in [
        (7, 3, 2, 0),
        (6, 3, 2, 1),
        (5, 2, 2, 0),
        (6, 3, 1, 0),
        (13, 3, 2, 1),
    ] {
        let c = caffe_pool_equiv(h, size, stride, pad)?;
        let floor = output_size_filter(h, FilterSpec::new(size, stride, c.pad)?)?;
        println!(
            "{h:>3} {size:>4} {stride:>6} {pad:>4} | {:>8} {:>6} {:>6}",
            format!("{:?}", c.pad),
            c.output,
            floor
        );
    }
    Ok(())
}
