//! Trains the LeNet-style digit networks, with and without batch
//! normalization, on the bundled synthetic 8x8 digits.
//!
//! `cargo run --release --example train_synthetic_digits [train] [val] [epochs]`

use std::path::Path;

use convkit::data::synthetic_splits;
use convkit::model::{ArchSpec, Model};
use convkit::train::{SgdConfig, Trainer};

fn main() -> convkit::Result<()> {
    let arg = |i: usize, d: usize| {
        std::env::args()
            .nth(i)
            .and_then(|a| a.parse().ok())
            .unwrap_or(d)
    };
    let (n_train, n_val, epochs) = (arg(1, 4000), arg(2, 1000), arg(3, 5));
    let data = synthetic_splits(n_train, n_val, 7);
    let archs = Path::new(env!("CARGO_MANIFEST_DIR")).join("archs");
    for name in ["lenet-digits", "lenet-digits-bnorm"] {
        let arch = ArchSpec::load(&archs.join(format!("{name}.toml")))?;
        let model = Model::from_arch(&arch, 1)?;
        let cfg = SgdConfig {
            learning_rate: vec![0.05],
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 50,
            epochs,
            seed: 1,
        };
        let mut trainer = Trainer::new(model, cfg)?;
        println!("{name}");
        trainer.train(&data, None, |r| println!("  {r}"))?;
        match trainer.report.first_epoch_below(0.05) {
            Some(e) => println!("  below 5% validation error after epoch {e}"),
            None => println!("  never below 5% validation error"),
        }
    }
    Ok(())
}
