//! Stochastic gradient descent with momentum, checkpoints and epoch logs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::graph::{ForwardOptions, LayerKind, Role};
use crate::model::{Metrics, Model, FORMAT_VERSION};
use crate::norm::channel_moments;
use crate::tensor::{decode_blob, encode_blob, Tensor};

/// Decay of the running batch normalization moments.
pub const MOMENT_DECAY: f32 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    /// One rate per epoch; the last one repeats.
    pub learning_rate: Vec<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: vec![0.05],
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 100,
            epochs: 5,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.learning_rate.is_empty()
            || self
                .learning_rate
                .iter()
                .any(|&r| !(r >= 0.0) || !r.is_finite())
        {
            return bad(format!(
                "learning rates must be a non-empty list of finite values ≥ 0, got {:?}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "weight decay must be ≥ 0, got {}",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epoch count must be positive".into());
        }
        Ok(())
    }

    /// Rate of the zero-based `epoch`.
    pub fn rate(&self, epoch: usize) -> f64 {
        self.learning_rate[epoch.min(self.learning_rate.len() - 1)]
    }
}

/// `v ← m v - lr (g + wd w)`, then `w ← w + v`.
pub fn sgd_update(
    w: &mut Tensor<f32>,
    v: &mut Tensor<f32>,
    g: &Tensor<f32>,
    lr: f32,
    m: f32,
    wd: f32,
) -> Result<()> {
    v.expect_shape(w.shape(), "momentum buffer")?;
    g.expect_shape(w.shape(), "parameter derivative")?;
    for ((w, v), &g) in w.vec_mut().iter_mut().zip(v.vec_mut()).zip(g.vec()) {
        *v = m * *v - lr * (g + wd * *w);
        *w += *v;
    }
    Ok(())
}

/// Momentum buffers per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    pub velocity: BTreeMap<String, Tensor<f32>>,
}

/// Applies [`sgd_update`] to every parameter that has a derivative.
pub fn sgd_step(
    params: &mut BTreeMap<String, Tensor<f32>>,
    derivs: &BTreeMap<String, Tensor<f32>>,
    state: &mut SgdState,
    lr: f64,
    cfg: &SgdConfig,
) -> Result<()> {
    for (name, g) in derivs {
        let w = params
            .get_mut(name)
            .ok_or_else(|| Error::Graph(format!("derivative for unknown parameter `{name}`")))?;
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(w.shape()));
        sgd_update(
            w,
            v,
            g,
            lr as f32,
            cfg.momentum as f32,
            cfg.weight_decay as f32,
        )?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// Per-image averages over one pass of a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub top1: f64,
    /// Zero, and flagged, when there are fewer than five classes.
    pub top5: f64,
    pub top5_degenerate: bool,
    pub seconds: f64,
    pub images_per_sec: f64,
}

impl EpochRecord {
    /// Equality of everything except timings.
    pub fn same_metrics(&self, other: &EpochRecord) -> bool {
        (self.epoch, self.split, self.top5_degenerate)
            == (other.epoch, other.split, other.top5_degenerate)
            && self.loss.to_bits() == other.loss.to_bits()
            && self.top1.to_bits() == other.top1.to_bits()
            && self.top5.to_bits() == other.top5.to_bits()
    }
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} split={} loss={:.6} top1={:.6} top5={:.6}{} sec={:.3} images/sec={:.1}",
            self.epoch,
            self.split,
            self.loss,
            self.top1,
            self.top5,
            if self.top5_degenerate {
                " top5_degenerate=true"
            } else {
                ""
            },
            self.seconds,
            self.images_per_sec
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn last(&self, split: Split) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.split == split)
    }

    /// The first epoch whose validation top-1 error is below `threshold`.
    pub fn first_epoch_below(&self, threshold: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.split == Split::Val && r.top1 < threshold)
            .map(|r| r.epoch)
    }

    pub fn same_metrics(&self, other: &TrainReport) -> bool {
        self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| a.same_metrics(b))
    }
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    format_version: u32,
    epochs_done: usize,
    config: SgdConfig,
    report: TrainReport,
}

/// A model under training together with its optimizer state.
///
/// Each epoch shuffles with a generator seeded from `(seed, epoch)`, so the
/// state needed to resume is the epoch count alone.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub config: SgdConfig,
    pub state: SgdState,
    pub epochs_done: usize,
    pub report: TrainReport,
}

fn epoch_rng(seed: u64, epoch: usize) -> Xoshiro256StarStar {
    Xoshiro256StarStar::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

impl Trainer {
    pub fn new(model: Model, config: SgdConfig) -> Result<Trainer> {
        config.validate()?;
        let obj = model.graph.variable(&model.meta.objective).map(|v| v.role);
        if obj != Some(Role::Derived) {
            return Err(Error::Graph(format!(
                "objective `{}` must be computed by the graph",
                model.meta.objective
            )));
        }
        Ok(Trainer {
            model,
            config,
            state: SgdState::default(),
            epochs_done: 0,
            report: TrainReport::default(),
        })
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.image_size() != self.model.normalization.input_size {
            return Err(Error::ShapeMismatch(format!(
                "dataset images are {:?}, the model expects {:?}",
                data.image_size(),
                self.model.normalization.input_size
            )));
        }
        if data.classes > self.model.meta.classes {
            return Err(Error::LabelOutOfRange(format!(
                "dataset has {} classes, the model {}",
                data.classes, self.model.meta.classes
            )));
        }
        Ok(())
    }

    /// `(layer, input)` of every batch normalization with stored moments.
    fn moment_layers(&self) -> Vec<(String, String)> {
        self.model
            .graph
            .layers()
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Bnorm(c) if c.moments))
            .map(|l| (l.inputs[0].clone(), l.inputs[l.inputs.len() - 1].clone()))
            .collect()
    }

    /// One SGD step on a batch; returns the summed metrics of the batch.
    fn step(&mut self, x: Tensor<f32>, c: Tensor<f32>, lr: f64) -> Result<Metrics> {
        let count = x.shape().n();
        let meta = self.model.meta.clone();
        let x = self.model.preprocess(&x)?;
        let moment_layers = self.moment_layers();
        let bindings = self.model.bindings(x, c);
        let mut tape = self
            .model
            .graph
            .forward(&bindings, ForwardOptions::train())?;
        let total = |name: &Option<String>| {
            name.as_ref()
                .and_then(|n| tape.value(n))
                .map_or(0.0, |t| t.vec().iter().map(|&v| v as f64).sum())
        };
        let metrics = Metrics {
            images: count,
            loss: total(&Some(meta.objective.clone())),
            top1: total(&meta.top1),
            top5: total(&meta.top5),
        };
        if !metrics.loss.is_finite() {
            let layer = self
                .model
                .graph
                .schedule()
                .into_iter()
                .find(|l| {
                    let layer = self.model.graph.layer(l).expect("scheduled layers exist");
                    layer
                        .outputs
                        .iter()
                        .any(|o| tape.value(o).is_some_and(|t| !t.all_finite()))
                })
                .unwrap_or("?");
            return Err(Error::NonFinite(format!(
                "loss is {} at epoch {}; first non-finite output in layer `{layer}`",
                metrics.loss,
                self.epochs_done + 1
            )));
        }
        let seed = Tensor::filled(
            tape.value(&meta.objective).expect("checked").shape(),
            1.0 / count as f32,
        );
        self.model
            .graph
            .backward(&mut tape, &[(meta.objective.as_str(), seed)])?;

        let mut derivs = BTreeMap::new();
        for var in self.model.graph.with_role(Role::Param) {
            let d = tape.deriv(&var.name).expect("parameters get derivatives");
            if !d.all_finite() {
                let layer = self
                    .model
                    .graph
                    .consumers_of(&var.name)
                    .first()
                    .map_or("?", |l| l.name.as_str());
                return Err(Error::NonFinite(format!(
                    "derivative of `{}` (read by layer `{layer}`) is not finite",
                    var.name
                )));
            }
            derivs.insert(var.name.clone(), d.clone());
        }
        let moments: Vec<(String, Vec<f32>, Vec<f32>)> = moment_layers
            .iter()
            .map(|(input, state)| {
                let (mu, s2) =
                    channel_moments(tape.value(input).expect("training tapes keep values"));
                (state.clone(), mu, s2)
            })
            .collect();
        drop(tape);
        drop(bindings);

        sgd_step(
            &mut self.model.params,
            &derivs,
            &mut self.state,
            lr,
            &self.config,
        )?;
        for (state, mu, s2) in moments {
            let m = self
                .model
                .params
                .get_mut(&state)
                .expect("state variables are bound");
            let k = mu.len();
            for (q, v) in m.vec_mut().iter_mut().enumerate() {
                let batch = if q < k { mu[q] } else { s2[q - k] };
                *v = MOMENT_DECAY * *v + (1.0 - MOMENT_DECAY) * batch;
            }
        }
        Ok(metrics)
    }

    fn record(&self, epoch: usize, split: Split, m: &Metrics, seconds: f64) -> EpochRecord {
        let (loss, top1, top5) = m.means();
        let degenerate = self.model.meta.classes < 5;
        EpochRecord {
            epoch,
            split,
            loss,
            top1,
            top5: if degenerate { 0.0 } else { top5 },
            top5_degenerate: degenerate,
            seconds,
            images_per_sec: m.images as f64 / seconds.max(1e-9),
        }
    }

    /// Trains one epoch and evaluates on the validation split.
    pub fn run_epoch(&mut self, data: &Splits) -> Result<(EpochRecord, EpochRecord)> {
        self.check_data(&data.train)?;
        self.check_data(&data.val)?;
        let epoch = self.epochs_done;
        let lr = self.config.rate(epoch);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut epoch_rng(self.config.seed, epoch));

        let start = Instant::now();
        let mut train = Metrics::default();
        for batch in order.chunks(self.config.batch_size) {
            let (x, c) = data.train.batch(batch)?;
            train.add(&self.step(x, c, lr)?);
        }
        let train_rec = self.record(
            epoch + 1,
            Split::Train,
            &train,
            start.elapsed().as_secs_f64(),
        );

        let start = Instant::now();
        let val = self.model.evaluate(&data.val, self.config.batch_size)?;
        if !val.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "validation loss is {} at epoch {}",
                val.loss,
                epoch + 1
            )));
        }
        let val_rec = self.record(epoch + 1, Split::Val, &val, start.elapsed().as_secs_f64());

        self.epochs_done += 1;
        self.report.records.push(train_rec.clone());
        self.report.records.push(val_rec.clone());
        Ok((train_rec, val_rec))
    }

    /// Runs the remaining epochs. After each one the records are passed to
    /// `log` and, with `checkpoint`, the trainer is saved there.
    pub fn train(
        &mut self,
        data: &Splits,
        checkpoint: Option<&Path>,
        mut log: impl FnMut(&EpochRecord),
    ) -> Result<()> {
        if self.epochs_done == 0 && self.model.average_image.is_none() {
            self.model.fit_normalization(&data.train);
        }
        while self.epochs_done < self.config.epochs {
            let (t, v) = self.run_epoch(data)?;
            log(&t);
            log(&v);
            if let Some(dir) = checkpoint {
                self.save(dir)?;
            }
        }
        Ok(())
    }

    /// Saves the model plus `trainer.toml` and the momentum buffers.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        let vdir = dir.join("velocity");
        fs::create_dir_all(&vdir)?;
        for (name, v) in &self.state.velocity {
            fs::write(vdir.join(format!("{name}.bin")), encode_blob(v))?;
        }
        let state = TrainerState {
            format_version: FORMAT_VERSION,
            epochs_done: self.epochs_done,
            config: self.config.clone(),
            report: self.report.clone(),
        };
        let text =
            toml::to_string(&state).map_err(|e| Error::Format(format!("trainer state: {e}")))?;
        fs::write(dir.join("trainer.toml"), text)?;
        Ok(())
    }

    pub fn resume(dir: &Path) -> Result<Trainer> {
        let model = Model::load(dir)?;
        let path = dir.join("trainer.toml");
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let st: TrainerState =
            toml::from_str(&text).map_err(|e| Error::Format(format!("trainer state: {e}")))?;
        if st.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "trainer state version {} is not supported",
                st.format_version
            )));
        }
        let mut state = SgdState::default();
        for var in model.graph.with_role(Role::Param) {
            let p = dir.join("velocity").join(format!("{}.bin", var.name));
            if p.exists() {
                let v = decode_blob(&fs::read(&p)?)
                    .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
                state.velocity.insert(var.name.clone(), v);
            }
        }
        let mut t = Trainer::new(model, st.config)?;
        t.state = state;
        t.epochs_done = st.epochs_done;
        t.report = st.report;
        Ok(t)
    }
}
