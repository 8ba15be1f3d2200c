use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256StarStar;

use convkit::data::{load_mnist, read_image, synthetic_splits, Splits};
use convkit::graph::{grad_check, Bindings, ForwardOptions, GradCheckOptions};
use convkit::model::{ArchSpec, Model};
use convkit::train::{SgdConfig, Trainer};
use convkit::{Error, Scalar, Shape, Tensor};

#[derive(Parser)]
#[command(
    name = "convkit",
    version,
    about = "Train, evaluate and inspect small convolutional networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network with momentum SGD, checkpointing after every epoch.
    Train {
        /// `synthetic[:TRAIN[:VAL]]` or a directory with MNIST IDX files.
        #[arg(long, default_value = "synthetic")]
        data: String,
        /// Architecture manifest; not needed with --resume.
        #[arg(long, required_unless_present = "resume")]
        arch: Option<PathBuf>,
        /// Learning rate, or a comma separated per-epoch schedule.
        #[arg(long, value_delimiter = ',')]
        lr: Option<Vec<f64>>,
        #[arg(long)]
        momentum: Option<f64>,
        #[arg(long)]
        wd: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint and log directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report loss and errors of a saved model on the validation split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "synthetic")]
        data: String,
    },
    /// Rank the classes of a PGM or PPM image.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 5)]
        topk: usize,
    },
    /// Print output shapes and receptive fields of every layer.
    Geometry {
        #[arg(long)]
        arch: PathBuf,
    },
    /// Compare backpropagation against finite differences on random inputs.
    Gradcheck {
        #[arg(long)]
        arch: PathBuf,
        /// Relative step; defaults to 1e-6 in double and 1e-3 in single precision.
        #[arg(long)]
        step: Option<f64>,
        #[arg(long, value_enum, default_value_t = Precision::Double)]
        precision: Precision,
        /// Elements checked per variable.
        #[arg(long, default_value_t = 20)]
        samples: usize,
        /// Largest accepted relative error; defaults to 1e-4 in double and 1
        /// in single precision, where roundoff and kinks dominate.
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    Single,
    Double,
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train {
            data,
            arch,
            lr,
            momentum,
            wd,
            batch,
            epochs,
            seed,
            out,
            resume,
        } => {
            let overrides = SgdOverrides {
                lr,
                momentum,
                wd,
                batch,
                epochs,
                seed,
            };
            train(&data, arch.as_deref(), overrides, &out, resume.as_deref())
        }
        Command::Eval { model, data } => eval(&model, &data),
        Command::Classify { model, image, topk } => classify(&model, &image, topk),
        Command::Geometry { arch } => geometry(&arch),
        Command::Gradcheck {
            arch,
            step,
            precision,
            samples,
            tolerance,
            seed,
        } => match precision {
            Precision::Double => gradcheck::<f64>(
                &arch,
                step.unwrap_or(1e-6),
                samples,
                tolerance.unwrap_or(1e-4),
                seed,
            ),
            Precision::Single => gradcheck::<f32>(
                &arch,
                step.unwrap_or(1e-3),
                samples,
                tolerance.unwrap_or(1.0),
                seed,
            ),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.root() {
                Error::NonFinite(_) => 3,
                Error::InvalidParam(_) => 1,
                _ => 2,
            })
        }
    }
}

fn load_data(spec: &str) -> std::result::Result<Splits, Failure> {
    if let Some(rest) = spec.strip_prefix("synthetic") {
        let counts: Vec<&str> = rest.split(':').skip(1).collect();
        let parse = |i: usize, d: usize| -> std::result::Result<usize, Failure> {
            counts.get(i).map_or(Ok(d), |s| {
                s.parse()
                    .map_err(|_| Failure::Usage(format!("bad count `{s}` in --data {spec}")))
            })
        };
        if !(rest.is_empty() || rest.starts_with(':')) || counts.len() > 2 {
            return Err(Failure::Usage(format!(
                "--data expects synthetic[:TRAIN[:VAL]], got `{spec}`"
            )));
        }
        let train = parse(0, 4000)?;
        let val = parse(1, train / 4)?;
        return Ok(synthetic_splits(train, val.max(1), 7));
    }
    Ok(load_mnist(Path::new(spec))?)
}

struct SgdOverrides {
    lr: Option<Vec<f64>>,
    momentum: Option<f64>,
    wd: Option<f64>,
    batch: Option<usize>,
    epochs: Option<usize>,
    seed: Option<u64>,
}

impl SgdOverrides {
    fn apply(self, mut c: SgdConfig) -> SgdConfig {
        if let Some(v) = self.lr {
            c.learning_rate = v;
        }
        c.momentum = self.momentum.unwrap_or(c.momentum);
        c.weight_decay = self.wd.unwrap_or(c.weight_decay);
        c.batch_size = self.batch.unwrap_or(c.batch_size);
        c.epochs = self.epochs.unwrap_or(c.epochs);
        c.seed = self.seed.unwrap_or(c.seed);
        c
    }
}

fn train(
    data: &str,
    arch: Option<&Path>,
    o: SgdOverrides,
    out: &Path,
    resume: Option<&Path>,
) -> Outcome {
    let splits = load_data(data)?;
    let mut trainer = match (resume, arch) {
        (Some(dir), _) => {
            let mut t = Trainer::resume(dir)?;
            t.config = o.apply(t.config.clone());
            t.config.validate()?;
            t
        }
        (None, Some(arch)) => {
            let cfg = o.apply(SgdConfig {
                batch_size: 50,
                ..SgdConfig::default()
            });
            let model = Model::from_arch(&ArchSpec::load(arch)?, cfg.seed)?;
            Trainer::new(model, cfg)?
        }
        (None, None) => return Err(Failure::Usage("train needs --arch or --resume".into())),
    };
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("train.log"))
        .map_err(Error::from)?;
    let mut write_err = None;
    trainer.train(&splits, Some(out), |r| {
        println!("{r}");
        if let Err(e) = writeln!(log, "{r}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::from(e).into());
    }
    println!("saved model to {}", out.display());
    Ok(())
}

fn eval(model: &Path, data: &str) -> Outcome {
    let model = Model::load(model)?;
    let splits = load_data(data)?;
    let m = model.evaluate(&splits.val, 100)?;
    let (loss, top1, top5) = m.means();
    println!(
        "split=val images={} loss={loss:.6} top1={top1:.6} top5={top5:.6}",
        m.images
    );
    Ok(())
}

fn classify(model: &Path, image: &Path, topk: usize) -> Outcome {
    let model = Model::load(model)?;
    let ranked = model.classify(&read_image(image)?)?;
    for (rank, r) in ranked.iter().take(topk).enumerate() {
        println!("{} class={} score={:.6}", rank + 1, r.class, r.score);
    }
    Ok(())
}

fn geometry(arch: &Path) -> Outcome {
    let model = Model::from_arch(&ArchSpec::load(arch)?, 0)?;
    let [h, w, c] = model.normalization.input_size;
    let x = Tensor::zeros(Shape::new(h, w, c, 1));
    let labels = Tensor::zeros(Shape::new(1, 1, 1, 1));
    let bindings = model.bindings(x, labels);
    let tape = model.graph.forward(&bindings, ForwardOptions::test())?;
    println!(
        "{:<10} {:<9} {:<16} {:<36} total (rows; cols)",
        "layer", "type", "output", "local"
    );
    let show = |t: &Option<[convkit::geometry::RfTransform; 2]>| match t {
        Some([a, b]) if a == b => a.to_string(),
        Some([a, b]) => format!("{a}; {b}"),
        None => "-".into(),
    };
    for row in model.graph.geometry_table(&tape, &model.meta.input)? {
        println!(
            "{:<10} {:<9} {:<16} {:<36} {}",
            row.layer,
            row.kind,
            row.shape.to_string(),
            show(&row.local),
            show(&row.total)
        );
    }
    Ok(())
}

fn gradcheck<T: Scalar>(
    arch: &Path,
    step: f64,
    samples: usize,
    tolerance: f64,
    seed: u64,
) -> Outcome {
    let model = Model::from_arch(&ArchSpec::load(arch)?, seed)?;
    let [h, w, c] = model.normalization.input_size;
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let n = 2;
    let x: Vec<f64> = (0..h * w * c * n)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let labels: Vec<f64> = (0..n)
        .map(|_| rng.random_range(1..=model.meta.classes) as f64)
        .collect();
    let mut b = Bindings::<T>::new();
    b.bind_owned(
        &model.meta.input,
        Tensor::from_f64(Shape::new(h, w, c, n), &x)?,
    );
    b.bind_owned(
        &model.meta.label,
        Tensor::from_f64(Shape::new(1, 1, 1, n), &labels)?,
    );
    for (name, p) in &model.params {
        b.bind_owned(name, p.cast());
    }
    let opts = GradCheckOptions {
        step,
        max_per_variable: Some(samples),
        seed,
        objective: Some(model.meta.objective.clone()),
        ..Default::default()
    };
    let report = grad_check(&model.graph, &b, &opts)?;
    for v in &report.variables {
        println!(
            "{:<10} checked={:<4} max_rel_err={:.3e} at={}",
            v.name, v.checked, v.max_rel_err, v.worst_index
        );
    }
    let worst = report.worst();
    if worst < tolerance {
        println!("ok: worst relative error {worst:.3e} < {tolerance:e}");
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "worst relative error {worst:.3e} exceeds {tolerance:e}"
        ))
        .into())
    }
}
