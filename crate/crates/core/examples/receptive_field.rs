//! Receptive field arithmetic for chains of filters.

use convkit::geometry::{rf_compose, rf_of_convt, rf_of_filter, rf_transpose, FilterSpec};

fn main() -> convkit::Result<()> {
    let conv = rf_of_filter(FilterSpec::new(5, 1, (2, 2))?);
    let pool = rf_of_filter(FilterSpec::new(2, 2, (0, 0))?);
    let conv2 = rf_of_filter(FilterSpec::new(3, 1, (1, 1))?);
    println!("conv 5x5 pad 2: {conv}");
    println!("pool 2 stride 2: {pool}");

    let chain = rf_compose(rf_compose(conv, pool), conv2);
    println!("conv, pool, conv: {chain}");
    for out in 1..=3 {
        let (lo, hi) = chain.interval(out);
        println!("  output {out} sees input samples [{lo}, {hi}]");
    }

    let up = rf_of_convt(2, 1, 4)?;
    println!("convt upsample 2 crop 1 size 4: {up}");
    println!(
        "transpose of the matching conv: {}",
        rf_transpose(rf_of_filter(FilterSpec::new(4, 2, (1, 1))?))
    );
    Ok(())
}
