//! Architectures, trained models and their on-disk format.
//!
//! A model directory holds `manifest.toml` (graph, metadata and a blob list),
//! one `params/<name>.bin` blob per parameter or state variable and, when
//! the model normalizes its input, `average_image.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Bindings, ForwardOptions, Graph, GraphSpec, LayerKind, Role};
use crate::resample::{bilinear_forward, identity_grid};
use crate::tensor::{decode_blob, encode_blob, Shape, Tensor};

pub const FORMAT_VERSION: u32 = 1;

/// Which graph variables play which part in training and classification.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub input: String,
    pub label: String,
    /// Scalar training loss, summed over the batch.
    pub objective: String,
    /// Class scores, `1 x 1 x C x N`.
    pub scores: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top5: Option<String>,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalization {
    /// `(H, W, C)` expected by the network.
    pub input_size: [usize; 3],
    /// Subtract the training set's average image from every input.
    #[serde(default)]
    pub subtract_average: bool,
}

fn default_filter_std() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    /// Deviation of the Gaussian used for convolution filters.
    #[serde(default = "default_filter_std")]
    pub filter_std: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec {
            filter_std: default_filter_std(),
        }
    }
}

/// An untrained network description, as found in `archs/*.toml`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArchSpec {
    pub format_version: u32,
    pub meta: ModelMeta,
    pub normalization: Normalization,
    #[serde(default)]
    pub init: InitSpec,
    pub graph: GraphSpec,
}

impl ArchSpec {
    pub fn from_toml(text: &str) -> Result<ArchSpec> {
        let a: ArchSpec =
            toml::from_str(text).map_err(|e| Error::Format(format!("architecture: {e}")))?;
        check_version(a.format_version)?;
        Ok(a)
    }

    pub fn load(path: &Path) -> Result<ArchSpec> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

fn check_version(v: u32) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "format version {v} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BlobRef {
    variable: String,
    file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    meta: ModelMeta,
    normalization: Normalization,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    average_image: Option<String>,
    graph: GraphSpec,
    #[serde(default)]
    blobs: Vec<BlobRef>,
}

/// One class and its score, classes numbered from zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ranked {
    pub class: usize,
    pub score: f32,
}

/// Summed metrics over a dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub images: usize,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
}

impl Metrics {
    pub fn add(&mut self, other: &Metrics) {
        self.images += other.images;
        self.loss += other.loss;
        self.top1 += other.top1;
        self.top5 += other.top5;
    }

    /// Per-image averages `(loss, top1, top5)`.
    pub fn means(&self) -> (f64, f64, f64) {
        let n = self.images.max(1) as f64;
        (self.loss / n, self.top1 / n, self.top5 / n)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub graph: Graph,
    pub meta: ModelMeta,
    pub normalization: Normalization,
    /// Values of every parameter and state variable.
    pub params: BTreeMap<String, Tensor<f32>>,
    pub average_image: Option<Tensor<f32>>,
}

fn check_blob_name(name: &str) -> Result<()> {
    if name.is_empty() || name.starts_with('.') || name.contains(['/', '\\']) {
        return Err(Error::Format(format!(
            "`{name}` cannot be used as a blob file name"
        )));
    }
    Ok(())
}

impl Model {
    /// Builds the graph and initializes parameters: convolution filters
    /// Gaussian, batch normalization multipliers one, moments `(0, 1)`,
    /// everything else zero.
    pub fn from_arch(arch: &ArchSpec, seed: u64) -> Result<Model> {
        let graph = arch.graph.build()?;
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let gauss = Normal::new(0.0, arch.init.filter_std)
            .map_err(|e| Error::InvalidParam(format!("filter deviation: {e}")))?;
        let mut params = BTreeMap::new();
        for var in graph.variables() {
            if !matches!(var.role, Role::Param | Role::State) {
                continue;
            }
            let shape = var.shape.ok_or_else(|| {
                Error::Graph(format!("parameter `{}` needs a declared shape", var.name))
            })?;
            let slot = graph.consumers_of(&var.name).into_iter().find_map(|l| {
                let i = l.inputs.iter().position(|n| n == &var.name)?;
                Some((l.kind.clone(), i, l.inputs.len()))
            });
            let t = match slot {
                Some((LayerKind::Conv(_) | LayerKind::ConvT(_), 1, _)) => {
                    let data = (0..shape.numel())
                        .map(|_| gauss.sample(&mut rng) as f32)
                        .collect();
                    Tensor::from_vec(shape, data)?
                }
                Some((LayerKind::Bnorm(c), i, n)) if c.moments && i == n - 1 => {
                    let k = shape.numel() / 2;
                    Tensor::from_vec(
                        shape,
                        (0..2 * k).map(|q| if q < k { 0.0 } else { 1.0 }).collect(),
                    )?
                }
                Some((LayerKind::Bnorm(_), 1, _)) => Tensor::ones(shape),
                _ => Tensor::zeros(shape),
            };
            params.insert(var.name.clone(), t);
        }
        let model = Model {
            graph,
            meta: arch.meta.clone(),
            normalization: arch.normalization.clone(),
            params,
            average_image: None,
        };
        model.check_meta()?;
        Ok(model)
    }

    fn check_meta(&self) -> Result<()> {
        let m = &self.meta;
        for (what, name) in [
            ("input", &m.input),
            ("label", &m.label),
            ("objective", &m.objective),
            ("scores", &m.scores),
        ]
        .into_iter()
        .chain(m.top1.iter().map(|n| ("top1", n)))
        .chain(m.top5.iter().map(|n| ("top5", n)))
        {
            if self.graph.variable(name).is_none() {
                return Err(Error::Graph(format!(
                    "{what} variable `{name}` is not in the graph"
                )));
            }
        }
        Ok(())
    }

    /// Sets the average image from a training set.
    pub fn fit_normalization(&mut self, data: &Dataset) {
        if self.normalization.subtract_average {
            self.average_image = Some(data.average_image());
        }
    }

    /// Subtracts the average image from each image of a batch.
    pub fn preprocess(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let [h, w, c] = self.normalization.input_size;
        let s = images.shape();
        if (s.h(), s.w(), s.c()) != (h, w, c) {
            return Err(Error::ShapeMismatch(format!(
                "images are {}x{}x{}, the model expects {h}x{w}x{c}",
                s.h(),
                s.w(),
                s.c()
            )));
        }
        let mut x = images.clone();
        if let Some(avg) = &self.average_image {
            for n in 0..s.n() {
                for (v, &a) in x.image_mut(n).iter_mut().zip(avg.vec()) {
                    *v -= a;
                }
            }
        }
        Ok(x)
    }

    /// Parameter bindings plus the given input and labels.
    pub fn bindings<'a>(&'a self, x: Tensor<f32>, labels: Tensor<f32>) -> Bindings<'a, f32> {
        let mut b = Bindings::new();
        for (name, t) in &self.params {
            b.bind(name, t);
        }
        b.bind_owned(&self.meta.input, x);
        b.bind_owned(&self.meta.label, labels);
        b
    }

    fn scalar(t: Option<&Tensor<f32>>) -> f64 {
        t.map_or(0.0, |t| t.vec().iter().map(|&v| v as f64).sum())
    }

    /// Loss and error counts over a dataset, in test mode.
    pub fn evaluate(&self, data: &Dataset, batch: usize) -> Result<Metrics> {
        let mut total = Metrics::default();
        let n = data.len();
        let batch = batch.max(1);
        for start in (0..n).step_by(batch) {
            let count = batch.min(n - start);
            let x = self.preprocess(&data.images.batch_slice(start, count)?)?;
            let c = data.labels.batch_slice(start, count)?;
            let tape = self
                .graph
                .forward(&self.bindings(x, c), ForwardOptions::inference())?;
            total.add(&Metrics {
                images: count,
                loss: Self::scalar(tape.value(&self.meta.objective)),
                top1: Self::scalar(self.meta.top1.as_ref().and_then(|v| tape.value(v))),
                top5: Self::scalar(self.meta.top5.as_ref().and_then(|v| tape.value(v))),
            });
        }
        Ok(total)
    }

    /// Class scores for one image, best first; ties go to the lower class.
    ///
    /// The image is resized to the model's input size with the bilinear
    /// sampler when needed, then normalized.
    pub fn classify(&self, image: &Tensor<f32>) -> Result<Vec<Ranked>> {
        let [h, w, c] = self.normalization.input_size;
        let s = image.shape();
        if s.c() != c {
            return Err(Error::ShapeMismatch(format!(
                "the image has {} channels, the model expects {c}",
                s.c()
            )));
        }
        if s.n() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "classify takes one image, got {}",
                s.n()
            )));
        }
        let resized = if (s.h(), s.w()) == (h, w) {
            image.clone()
        } else {
            bilinear_forward(image, &identity_grid(h, w, 1))?
        };
        let x = self.preprocess(&resized)?;
        let tape = self.graph.forward(
            &self.bindings(x, Tensor::zeros(Shape::new(1, 1, 1, 1))),
            ForwardOptions::inference(),
        )?;
        let scores = tape
            .value(&self.meta.scores)
            .ok_or_else(|| Error::Graph(format!("no value for scores `{}`", self.meta.scores)))?;
        let k = scores.shape().c();
        if scores.numel() != k {
            return Err(Error::ShapeMismatch(format!(
                "scores `{}` are {}, expected 1x1xCx1",
                self.meta.scores,
                scores.shape()
            )));
        }
        let mut ranked: Vec<Ranked> = scores
            .vec()
            .iter()
            .enumerate()
            .map(|(class, &score)| Ranked { class, score })
            .collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(ranked)
    }

    fn manifest(&self) -> Result<Manifest> {
        let mut blobs = Vec::with_capacity(self.params.len());
        for name in self.params.keys() {
            check_blob_name(name)?;
            blobs.push(BlobRef {
                variable: name.clone(),
                file: format!("params/{name}.bin"),
            });
        }
        Ok(Manifest {
            format_version: FORMAT_VERSION,
            meta: self.meta.clone(),
            normalization: self.normalization.clone(),
            average_image: self
                .average_image
                .as_ref()
                .map(|_| "average_image.bin".to_string()),
            graph: self.graph.to_spec(),
            blobs,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = self.manifest()?;
        let text = toml::to_string(&manifest)
            .map_err(|e| Error::Format(format!("model manifest: {e}")))?;
        fs::create_dir_all(dir.join("params"))?;
        for (b, t) in manifest.blobs.iter().zip(self.params.values()) {
            fs::write(dir.join(&b.file), encode_blob(t))?;
        }
        if let (Some(f), Some(avg)) = (&manifest.average_image, &self.average_image) {
            fs::write(dir.join(f), encode_blob(avg))?;
        }
        fs::write(dir.join("manifest.toml"), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Model> {
        let path = dir.join("manifest.toml");
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let m: Manifest =
            toml::from_str(&text).map_err(|e| Error::Format(format!("model manifest: {e}")))?;
        check_version(m.format_version)?;
        let graph = m.graph.build()?;
        let read = |file: &str| -> Result<Tensor<f32>> {
            let bytes = fs::read(dir.join(file))
                .map_err(|e| Error::Format(format!("blob `{file}`: {e}")))?;
            decode_blob(&bytes).map_err(|e| Error::Format(format!("blob `{file}`: {e}")))
        };
        let mut params = BTreeMap::new();
        for b in &m.blobs {
            let var = graph.variable(&b.variable).ok_or_else(|| {
                Error::Format(format!(
                    "blob `{}` is for unknown variable `{}`",
                    b.file, b.variable
                ))
            })?;
            let t = read(&b.file)?;
            if let Some(s) = var.shape {
                t.expect_shape(s, &format!("blob `{}`", b.file))?;
            }
            params.insert(b.variable.clone(), t);
        }
        for var in graph.variables() {
            if matches!(var.role, Role::Param | Role::State) && !params.contains_key(&var.name) {
                return Err(Error::Format(format!(
                    "no blob for parameter `{}`",
                    var.name
                )));
            }
        }
        let average_image = m.average_image.as_deref().map(read).transpose()?;
        let model = Model {
            graph,
            meta: m.meta,
            normalization: m.normalization,
            params,
            average_image,
        };
        model.check_meta()?;
        Ok(model)
    }
}
