use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use convkit::data::{encode_idx_images, encode_idx_labels, synthetic_digits, write_image};
use convkit::{Shape, Tensor};

fn convkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convkit")).args(args).output().expect("binary runs")
}

fn arch(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("archs").join(name).display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_resume_eval_classify() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.display().to_string();
    let base = ["--data", "synthetic:600:200", "--batch", "50", "--seed", "3"];
    let mut args = vec!["train", "--arch"];
    let a = arch("lenet-digits.toml");
    args.push(&a);
    args.extend(base);
    args.extend(["--epochs", "1", "--out", &out_s]);
    let o = convkit(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = stdout(&o);
    assert!(log.contains("epoch=1 split=train loss="), "{log}");
    assert!(log.contains("top5=") && log.contains("images/sec="), "{log}");

    let mut resume = vec!["train", "--resume", &out_s, "--epochs", "2", "--out", &out_s];
    resume.extend(["--data", "synthetic:600:200"]);
    let o = convkit(&resume);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("epoch=2 split=val"));
    let logged = std::fs::read_to_string(out.join("train.log")).unwrap();
    assert_eq!(logged.lines().count(), 4);

    let o = convkit(&["eval", "--model", &out_s, "--data", "synthetic:600:200"]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("split=val images=200 "), "{}", stdout(&o));

    let img = dir.path().join("digit.pgm");
    let (x, _) = synthetic_digits(1, 0).batch(&[0]).unwrap();
    write_image(&img, &x).unwrap();
    let o = convkit(&["classify", "--model", &out_s, "--image", &img.display().to_string(), "--topk", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("1 class="));
}

#[test]
fn geometry_table() {
    let o = convkit(&["geometry", "--arch", &arch("lenet-mnist.toml")]);
    assert!(o.status.success());
    let text = stdout(&o);
    let pool2 = text.lines().find(|l| l.starts_with("pool2")).unwrap();
    assert!(pool2.contains("4x4x50x1"), "{pool2}");
    assert!(pool2.contains("(α=4, β=17/2, Δ=16)"), "{pool2}");
}

#[test]
fn gradcheck_in_double_precision() {
    let o = convkit(&["gradcheck", "--arch", &arch("lenet-digits-bnorm.toml"), "--samples", "5"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("ok: worst relative error"));
}

#[test]
fn exit_codes() {
    assert_eq!(convkit(&[]).status.code(), Some(1));
    assert_eq!(convkit(&["train", "--epochs", "1"]).status.code(), Some(1));
    assert_eq!(convkit(&["--help"]).status.code(), Some(0));
    let a = arch("lenet-digits.toml");
    assert_eq!(convkit(&["train", "--arch", &a, "--data", "synthetic:x"]).status.code(), Some(1));
    assert_eq!(convkit(&["train", "--arch", &a, "--momentum", "1.5"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().display().to_string();
    assert_eq!(convkit(&["eval", "--model", &d]).status.code(), Some(2));
    assert_eq!(convkit(&["train", "--arch", &a, "--data", &d, "--out", &d]).status.code(), Some(2));
    // wrong image size for the network
    let mnist = write_mnist(dir.path(), 4);
    let out = dir.path().join("o").display().to_string();
    assert_eq!(convkit(&["train", "--arch", &a, "--data", &mnist, "--out", &out]).status.code(), Some(2));
}

#[test]
fn nan_learning_rate_schedule_exits_with_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let a = arch("lenet-digits.toml");
    let o = convkit(&["train", "--arch", &a, "--data", "synthetic:100:20", "--lr", "1e30", "--epochs", "2", "--out", &out]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("layer"));
}

#[test]
fn trains_on_idx_files() {
    let dir = tempfile::tempdir().unwrap();
    let mnist = write_mnist(dir.path(), 28);
    let out = dir.path().join("o").display().to_string();
    let a = arch("lenet-mnist.toml");
    let o = convkit(&["train", "--arch", &a, "--data", &mnist, "--epochs", "1", "--batch", "4", "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("split=val"));
}

/// Tiny MNIST-layout directory with `size x size` images.
fn write_mnist(dir: &Path, size: usize) -> String {
    let root: PathBuf = dir.join("mnist");
    std::fs::create_dir_all(&root).unwrap();
    for (prefix, n) in [("train", 12), ("t10k", 6)] {
        let x = Tensor::from_fn(Shape::new(size, size, 1, n), |i, j, _, k| ((i * 7 + j * 3 + k) % 256) as f32 / 255.0);
        let labels: Vec<u8> = (0..n).map(|k| (k % 10) as u8).collect();
        std::fs::write(root.join(format!("{prefix}-images-idx3-ubyte")), encode_idx_images(&x)).unwrap();
        std::fs::write(root.join(format!("{prefix}-labels-idx1-ubyte")), encode_idx_labels(&labels)).unwrap();
    }
    root.display().to_string()
}
