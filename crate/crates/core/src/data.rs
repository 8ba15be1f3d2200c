//! Datasets: IDX files, the bundled synthetic digits and portable image
//! formats.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256StarStar;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Images `H x W x C x N` with class labels `1 x 1 x 1 x N` in `1..=classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Tensor<f32>,
    pub classes: usize,
}

/// Training and validation parts of a dataset.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Tensor<f32>, classes: usize) -> Result<Dataset> {
        let n = images.shape().n();
        labels.expect_shape(Shape::new(1, 1, 1, n), "dataset labels")?;
        for (i, &l) in labels.vec().iter().enumerate() {
            if l.fract() != 0.0 || l < 1.0 || l as usize > classes {
                return Err(Error::LabelOutOfRange(format!(
                    "image {i} has label {l}, expected 1..={classes}"
                )));
            }
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape().n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(H, W, C)` of one image.
    pub fn image_size(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s.h(), s.w(), s.c()]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        Ok((
            self.images.gather_batch(indices)?,
            self.labels.gather_batch(indices)?,
        ))
    }

    /// The first `count` images, or all of them.
    pub fn take(&self, count: usize) -> Result<Dataset> {
        let count = count.min(self.len());
        Ok(Dataset {
            images: self.images.batch_slice(0, count)?,
            labels: self.labels.batch_slice(0, count)?,
            classes: self.classes,
        })
    }

    /// Mean over all images, `H x W x C x 1`.
    pub fn average_image(&self) -> Tensor<f32> {
        let s = self.images.shape();
        let len = s.image_len();
        let mut acc = vec![0f64; len];
        for n in 0..s.n() {
            for (a, &v) in acc.iter_mut().zip(self.images.image(n)) {
                *a += v as f64;
            }
        }
        let count = s.n().max(1) as f64;
        let data = acc.into_iter().map(|a| (a / count) as f32).collect();
        Tensor::from_vec(Shape::new(s.h(), s.w(), s.c(), 1), data).expect("length matches")
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Decodes an IDX image file into `H x W x 1 x N` singles in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    let magic = be_u32(bytes, 0, "IDX images")?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!(
            "IDX images: bad magic {magic:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "IDX images")? as usize;
    let rows = be_u32(bytes, 8, "IDX images")? as usize;
    let cols = be_u32(bytes, 12, "IDX images")? as usize;
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() < need {
        return Err(Error::Format(format!(
            "IDX images: truncated, {} of {need} pixel bytes",
            body.len()
        )));
    }
    // rows are stored contiguously; the tensor is height-fastest
    Ok(Tensor::from_fn(
        Shape::new(rows, cols, 1, n),
        |i, j, _, k| body[k * rows * cols + i * cols + j] as f32 / 255.0,
    ))
}

/// Decodes an IDX label file, returning the raw labels.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "IDX labels")?;
    if magic != IDX_LABELS {
        return Err(Error::Format(format!(
            "IDX labels: bad magic {magic:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "IDX labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Format(format!(
            "IDX labels: truncated, {} of {n} labels",
            body.len()
        )));
    }
    Ok(body[..n].to_vec())
}

/// Loads an image file and a label file. Raw label `r` becomes class
/// `r + 1`; the class count is one more than the largest raw label.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::Format(format!("{}: {e}", p.display())));
    let x = parse_idx_images(&read(images)?)?;
    let raw = parse_idx_labels(&read(labels)?)?;
    if raw.len() != x.shape().n() {
        return Err(Error::ShapeMismatch(format!(
            "{} images but {} labels",
            x.shape().n(),
            raw.len()
        )));
    }
    let classes = raw.iter().copied().max().map_or(0, |m| m as usize + 1);
    let labels = Tensor::from_vec(
        Shape::new(1, 1, 1, raw.len()),
        raw.iter().map(|&r| r as f32 + 1.0).collect(),
    )?;
    Dataset::new(x, labels, classes)
}

/// Encodes `H x W x 1 x N` images in `[0, 1]` as an IDX image file.
pub fn encode_idx_images(x: &Tensor<f32>) -> Vec<u8> {
    let s = x.shape();
    let mut out = Vec::with_capacity(16 + s.numel());
    for v in [IDX_IMAGES, s.n() as u32, s.h() as u32, s.w() as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for k in 0..s.n() {
        for i in 0..s.h() {
            for j in 0..s.w() {
                out.push((x.at(i, j, 0, k).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn encode_idx_labels(raw: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + raw.len());
    out.extend_from_slice(&IDX_LABELS.to_be_bytes());
    out.extend_from_slice(&(raw.len() as u32).to_be_bytes());
    out.extend_from_slice(raw);
    out
}

/// MNIST from a directory holding the four uncompressed IDX files.
pub fn load_mnist(dir: &Path) -> Result<Splits> {
    let find = |stem: &str| -> Result<std::path::PathBuf> {
        for name in [stem.to_string(), stem.replacen("-idx", ".idx", 1)] {
            let p = dir.join(&name);
            if p.exists() {
                return Ok(p);
            }
        }
        Err(Error::Format(format!("{}: missing {stem}", dir.display())))
    };
    Ok(Splits {
        train: load_idx(
            &find("train-images-idx3-ubyte")?,
            &find("train-labels-idx1-ubyte")?,
        )?,
        val: load_idx(
            &find("t10k-images-idx3-ubyte")?,
            &find("t10k-labels-idx1-ubyte")?,
        )?,
    })
}

/// 5 x 7 glyphs of the digits 0-9, one string per row.
const GLYPHS: [[&str; 7]; 10] = [
    [
        ".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###.",
    ],
    [
        "..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###.",
    ],
    [
        ".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####",
    ],
    [
        "#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###.",
    ],
    [
        "...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#.",
    ],
    [
        "#####", "#....", "####.", "....#", "....#", "#...#", ".###.",
    ],
    [
        "..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###.",
    ],
    [
        "#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#...",
    ],
    [
        ".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###.",
    ],
    [
        ".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##..",
    ],
];

/// Side of the synthetic digit images.
pub const DIGIT_SIZE: usize = 8;

/// `n` noisy 8 x 8 digits: a glyph at a random offset with random stroke
/// intensity, Gaussian noise and a few flipped pixels. Classes are the
/// digit plus one, balanced and shuffled.
pub fn synthetic_digits(n: usize, seed: u64) -> Dataset {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.15).expect("valid deviation");
    let mut digits: Vec<usize> = (0..n).map(|k| k % 10).collect();
    digits.shuffle(&mut rng);
    let mut images = Tensor::zeros(Shape::new(DIGIT_SIZE, DIGIT_SIZE, 1, n));
    for (k, &d) in digits.iter().enumerate() {
        let (di, dj) = (rng.random_range(0..=1usize), rng.random_range(0..=3usize));
        let ink = rng.random_range(0.6f32..1.0);
        let img = images.image_mut(k);
        for (r, row) in GLYPHS[d].iter().enumerate() {
            for (c, ch) in row.bytes().enumerate() {
                if ch == b'#' {
                    img[(c + dj) * DIGIT_SIZE + r + di] = ink;
                }
            }
        }
        for v in img.iter_mut() {
            if rng.random_bool(0.03) {
                *v = 1.0 - *v;
            }
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    let labels = Tensor::from_vec(
        Shape::new(1, 1, 1, n),
        digits.iter().map(|&d| d as f32 + 1.0).collect(),
    )
    .expect("length matches");
    Dataset {
        images,
        labels,
        classes: 10,
    }
}

/// Disjoint training and validation sets of synthetic digits.
pub fn synthetic_splits(train: usize, val: usize, seed: u64) -> Splits {
    Splits {
        train: synthetic_digits(train, seed),
        val: synthetic_digits(val, seed ^ 0x9e37_79b9_7f4a_7c15),
    }
}

/// Reads a PGM or PPM file as `H x W x C x 1` with values in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb32f();
        Ok(Tensor::from_fn(Shape::new(h, w, 3, 1), |i, j, c, _| {
            rgb.get_pixel(j as u32, i as u32)[c]
        }))
    } else {
        let gray = img.to_luma32f();
        Ok(Tensor::from_fn(Shape::new(h, w, 1, 1), |i, j, _, _| {
            gray.get_pixel(j as u32, i as u32)[0]
        }))
    }
}

/// Writes a one- or three-channel image in `[0, 1]` as binary PGM or PPM.
pub fn write_image(path: &Path, x: &Tensor<f32>) -> Result<()> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::{ExtendedColorType, ImageEncoder};

    let s = x.shape();
    let (subtype, color) = match s.c() {
        1 => (
            PnmSubtype::Graymap(SampleEncoding::Binary),
            ExtendedColorType::L8,
        ),
        3 => (
            PnmSubtype::Pixmap(SampleEncoding::Binary),
            ExtendedColorType::Rgb8,
        ),
        c => {
            return Err(Error::ShapeMismatch(format!(
                "cannot write a {c}-channel image"
            )))
        }
    };
    let mut bytes = Vec::with_capacity(s.numel());
    for i in 0..s.h() {
        for j in 0..s.w() {
            for c in 0..s.c() {
                bytes.push((x.at(i, j, c, 0).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let file = fs::File::create(path)?;
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(subtype)
        .write_image(&bytes, s.w() as u32, s.h() as u32, color)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(n: usize) -> (Vec<u8>, Vec<u8>) {
        let x = Tensor::from_fn(Shape::new(28, 28, 1, n), |i, j, _, k| {
            ((i + 2 * j + 3 * k) % 256) as f32 / 255.0
        });
        let raw: Vec<u8> = (0..n as u8).collect();
        (encode_idx_images(&x), encode_idx_labels(&raw))
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (xi, li) = fixture(4);
        fs::write(dir.path().join("x"), &xi).unwrap();
        fs::write(dir.path().join("l"), &li).unwrap();
        let d = load_idx(&dir.path().join("x"), &dir.path().join("l")).unwrap();
        assert_eq!(d.images.shape(), Shape::new(28, 28, 1, 4));
        assert_eq!(d.labels.vec(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(d.classes, 4);
        assert_eq!(d.images.at(3, 5, 0, 2), ((3 + 10 + 6) % 256) as f32 / 255.0);
        assert_eq!(encode_idx_images(&d.images), xi);
    }

    #[test]
    fn idx_scaling_and_row_order() {
        let mut bytes = Vec::new();
        for v in [IDX_IMAGES, 1, 2, 3] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 51]);
        let x = parse_idx_images(&bytes).unwrap();
        assert_eq!(x.shape(), Shape::new(2, 3, 1, 1));
        assert_eq!(x.at(0, 0, 0, 0), 1.0);
        assert_eq!(x.at(1, 2, 0, 0), 0.2);
    }

    #[test]
    fn idx_errors() {
        let (xi, li) = fixture(2);
        assert!(parse_idx_images(&li)
            .unwrap_err()
            .to_string()
            .contains("magic"));
        assert!(parse_idx_labels(&xi)
            .unwrap_err()
            .to_string()
            .contains("magic"));
        assert!(parse_idx_images(&xi[..xi.len() - 1])
            .unwrap_err()
            .to_string()
            .contains("truncated"));
        assert!(parse_idx_labels(&li[..9])
            .unwrap_err()
            .to_string()
            .contains("truncated"));
        assert!(parse_idx_images(&xi[..10]).is_err());
    }

    #[test]
    fn synthetic_digits_are_deterministic_and_balanced() {
        let a = synthetic_digits(200, 5);
        assert_eq!(a, synthetic_digits(200, 5));
        assert_ne!(a.images, synthetic_digits(200, 6).images);
        for c in 1..=10 {
            assert_eq!(
                a.labels.vec().iter().filter(|&&l| l == c as f32).count(),
                20
            );
        }
        assert!(a.images.vec().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(Dataset::new(a.images.clone(), a.labels.clone(), 10).is_ok());
    }

    #[test]
    fn rejects_bad_labels() {
        let x = Tensor::zeros(Shape::new(1, 1, 1, 2));
        assert!(Dataset::new(
            x.clone(),
            Tensor::from_f64(Shape::new(1, 1, 1, 2), &[1.0, 3.0]).unwrap(),
            2
        )
        .is_err());
        assert!(Dataset::new(
            x.clone(),
            Tensor::from_f64(Shape::new(1, 1, 1, 2), &[0.0, 1.0]).unwrap(),
            2
        )
        .is_err());
        assert!(Dataset::new(x, Tensor::zeros(Shape::new(1, 1, 1, 3)), 2).is_err());
    }

    #[test]
    fn pnm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for c in [1, 3] {
            let x = Tensor::from_fn(Shape::new(3, 5, c, 1), |i, j, c, _| {
                ((i * 5 + j + c * 7) % 25 * 10) as f32 / 255.0
            });
            let p = dir.path().join(format!("im{c}.pnm"));
            write_image(&p, &x).unwrap();
            let y = read_image(&p).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(x.zip_map(&y, |a, b| (a - b).abs()).unwrap().max_abs() < 1e-6);
        }
        assert!(read_image(&dir.path().join("missing.pgm")).is_err());
    }
}
