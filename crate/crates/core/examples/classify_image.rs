//! Trains a digit network briefly, writes a test digit as a PGM file and
//! classifies it from disk.

use std::path::Path;

use convkit::data::{read_image, synthetic_digits, synthetic_splits, write_image};
use convkit::model::{ArchSpec, Model};
use convkit::train::{SgdConfig, Trainer};

fn main() -> convkit::Result<()> {
    let arch =
        ArchSpec::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("archs/lenet-digits.toml"))?;
    let cfg = SgdConfig {
        learning_rate: vec![0.05],
        batch_size: 50,
        epochs: 2,
        ..SgdConfig::default()
    };
    let mut trainer = Trainer::new(Model::from_arch(&arch, 0)?, cfg)?;
    trainer.train(&synthetic_splits(3000, 500, 9), None, |_| {})?;
    let model = trainer.model;

    let digits = synthetic_digits(10, 123);
    let path = std::env::temp_dir().join("convkit-digit.pgm");
    for k in 0..3 {
        let (x, c) = digits.batch(&[k])?;
        write_image(&path, &x)?;
        let ranked = model.classify(&read_image(&path)?)?;
        let top: Vec<String> = ranked
            .iter()
            .take(3)
            .map(|r| format!("{}:{:.3}", r.class, r.score))
            .collect();
        println!("digit {} -> {}", c.vec()[0] as usize - 1, top.join(" "));
    }
    Ok(())
}
