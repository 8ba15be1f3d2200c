//! Saves a model to a directory and loads it back.

use std::path::Path;

use convkit::data::synthetic_splits;
use convkit::model::{ArchSpec, Model};

fn main() -> convkit::Result<()> {
    let arch =
        ArchSpec::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("archs/lenet-digits.toml"))?;
    let data = synthetic_splits(200, 100, 3);
    let mut model = Model::from_arch(&arch, 42)?;
    model.fit_normalization(&data.train);

    let dir = std::env::temp_dir().join("convkit-roundtrip");
    model.save(&dir)?;
    let back = Model::load(&dir)?;
    let files: Vec<String> = std::fs::read_dir(dir.join("params"))?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<std::io::Result<_>>()?;
    println!(
        "saved to {} with {} parameter blobs",
        dir.display(),
        files.len()
    );
    println!("parameters identical: {}", back.params == model.params);
    println!(
        "average image identical: {}",
        back.average_image == model.average_image
    );

    let before = model.evaluate(&data.val, 50)?.means();
    let after = back.evaluate(&data.val, 50)?.means();
    println!("untrained validation (loss, top1, top5) {before:?}, after reload {after:?}");
    Ok(())
}
