//! End-to-end command runs against synthetic dataset files: artifact
//! shapes, exit codes and byte-identical replay.

use std::fs;
use std::path::Path;
use std::process::Command;

fn binlow() -> Command {
    Command::new(env!("CARGO_BIN_EXE_binlow"))
}

/// Writes a small MNIST-format dataset: structured 4x4 "digits" of two
/// classes so training has signal.
fn write_synthetic_mnist(dir: &Path, n_train: usize, n_test: usize) {
    fs::create_dir_all(dir).unwrap();
    let make = |n: usize, stem: &str| {
        let mut images = Vec::new();
        images.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        images.extend_from_slice(&(n as u32).to_be_bytes());
        images.extend_from_slice(&4u32.to_be_bytes());
        images.extend_from_slice(&4u32.to_be_bytes());
        let mut labels = Vec::new();
        labels.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        labels.extend_from_slice(&(n as u32).to_be_bytes());
        for i in 0..n {
            let class = i % 2;
            for p in 0..16 {
                // class 0 lights the left half, class 1 the right
                let lit = if class == 0 { p % 4 < 2 } else { p % 4 >= 2 };
                let noise = ((i * 31 + p * 7) % 64) as u8;
                images.push(if lit { 200 + noise / 4 } else { noise / 2 });
            }
            labels.push(class as u8);
        }
        fs::write(dir.join(format!("{stem}-images-idx3-ubyte")), &images).unwrap();
        fs::write(dir.join(format!("{stem}-labels-idx1-ubyte")), &labels).unwrap();
    };
    make(n_train, "train");
    make(n_test, "t10k");
}

fn config_text(data_dir: &Path, out_dir: &Path, epochs: usize) -> String {
    format!(
        r#"
[model]
input = {{ features = 16 }}
layers = [
  {{ kind = "dense", out = 16 }},
  {{ kind = "dense", out = 2 }},
]

[scheme]
preset = "proposed"

[schedule]
kind = "constant"

[run]
batch_size = 10
epochs = {epochs}
seed = 5
dataset = "mnist"
data_dir = "{}"
out_dir = "{}"
density_layer = 1
"#,
        data_dir.display(),
        out_dir.display()
    )
}

#[test]
fn train_writes_artifacts_and_replays_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    write_synthetic_mnist(&data, 100, 40);
    let out1 = tmp.path().join("run1");
    let out2 = tmp.path().join("run2");
    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, config_text(&data, &out1, 3)).unwrap();

    let status = binlow().args(["train", "--config"]).arg(&cfg).status().unwrap();
    assert!(status.success());

    let metrics = fs::read_to_string(out1.join("metrics.csv")).unwrap();
    let data_rows = metrics.lines().filter(|l| !l.starts_with('#') && !l.starts_with("epoch")).count();
    assert_eq!(data_rows, 4, "epochs + 1 rows:\n{metrics}");
    assert!(metrics.starts_with("# config "));
    assert!(out1.join("checkpoint.bin").exists());
    assert!(out1.join("trace.csv").exists());
    assert!(out1.join("config.expanded.toml").exists());
    assert!(out1.join("gradsnap.csv").exists());

    // replay into a second directory: byte-identical outputs
    let status = binlow()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&out2)
        .status()
        .unwrap();
    assert!(status.success());
    for f in ["metrics.csv", "trace.csv", "gradsnap.csv", "checkpoint.bin"] {
        let a = fs::read(out1.join(f)).unwrap();
        let b = fs::read(out2.join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }

    // density over the run directory
    let status = binlow().args(["density", "--run"]).arg(&out1).status().unwrap();
    assert!(status.success());
    let density = fs::read_to_string(out1.join("density.csv")).unwrap();
    assert!(density.contains("gradient_density"));
}

#[test]
fn missing_dataset_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    fs::write(
        &cfg,
        config_text(&tmp.path().join("nonexistent"), &tmp.path().join("out"), 1),
    )
    .unwrap();
    let status = binlow().args(["train", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn bad_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, "[model]\nbogus = 1\n").unwrap();
    let status = binlow().args(["analyze", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn analyze_and_energy_report_reference_model() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = tmp.path().join("exp.toml");
    fs::write(
        &cfg,
        format!(
            r#"
[model]
topology = "binarynet"

[scheme]
preset = "proposed"

[run]
batch_size = 100
epochs = 1
seed = 1
dataset = "cifar10"
out_dir = "{}"
"#,
            out.display()
        ),
    )
    .unwrap();

    let output = binlow().args(["analyze", "--config"]).arg(&cfg).output().unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("saving vs standard 3.60x"), "{stdout}");
    let mem = fs::read_to_string(out.join("memory.csv")).unwrap();
    assert!(mem.contains("X,persistent,bool"));
    assert!(mem.contains("dY,transient,po2_5"));

    let output = binlow().args(["energy", "--config"]).arg(&cfg).output().unwrap();
    assert!(output.status.success());
    let energy = fs::read_to_string(out.join("energy.csv")).unwrap();
    assert!(energy.contains("saving,"));

    // preset override flips the report to the standard scheme
    let output = binlow()
        .args(["analyze", "--config"])
        .arg(&cfg)
        .args(["--preset", "standard"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("saving vs standard 1.00x"), "{stdout}");
}

#[test]
fn seed_override_changes_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    write_synthetic_mnist(&data, 60, 20);
    let out1 = tmp.path().join("a");
    let out2 = tmp.path().join("b");
    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, config_text(&data, &out1, 1)).unwrap();
    assert!(binlow().args(["train", "--config"]).arg(&cfg).status().unwrap().success());
    assert!(binlow()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&out2)
        .args(["--seed", "99"])
        .status()
        .unwrap()
        .success());
    let a = fs::read_to_string(out1.join("metrics.csv")).unwrap();
    let b = fs::read_to_string(out2.join("metrics.csv")).unwrap();
    assert_ne!(a, b, "different seeds should diverge");
}
