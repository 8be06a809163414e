//! The four experiment commands and their artifact writers.
//!
//! Every artifact embeds the expanded config digest in its first line, and
//! all files are written atomically (temp file + rename), so a rerun with
//! the same config and seed reproduces them byte for byte.

use crate::config::Experiment;
use crate::data;
use anyhow::{bail, Context, Result};
use binlow_core::analysis::{
    density_trace, energy_estimate, memory_footprint, CostModel, MemoryReport, MIB,
};
use binlow_core::engine::{
    build_model, save_checkpoint, train, train_step, Dataset, TrainHistory, TrainOptions,
};
use binlow_core::layers::Scheme;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Writes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().unwrap_or_default().to_string_lossy()
    ));
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn load_dataset(exp: &Experiment) -> Result<(Dataset, Dataset)> {
    let dir = exp.data_dir()?;
    let (train, test) = match exp.raw.run.dataset.as_str() {
        "mnist" => data::load_mnist(&dir)?,
        "cifar10" => data::load_cifar10(&dir)?,
        other => bail!("unknown dataset {other}"),
    };
    Ok((
        data::truncate(train, exp.raw.run.train_subset),
        data::truncate(test, exp.raw.run.test_subset),
    ))
}

fn metrics_csv(exp: &Experiment, hist: &TrainHistory) -> String {
    let mut s = format!("# config {}\n", exp.digest());
    s.push_str("epoch,train_acc,dev_acc,test_acc,loss,eta\n");
    for r in &hist.records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch, r.train_acc, r.dev_acc, r.test_acc, r.loss, r.eta
        );
    }
    s
}

fn trace_csv(exp: &Experiment) -> Result<String> {
    // One traced step on a throwaway model built from the same seed; the
    // trained run is left untouched.
    let (mut probe, _) = build_model(exp.model_config())?;
    let b = exp.raw.run.batch_size;
    let features = exp.topology.input.features();
    // synthetic +-1-scaled probe batch; the accounting depends on shapes only
    let vals: Vec<f32> = (0..b * features)
        .map(|i| if i % 2 == 0 { 0.5 } else { -0.5 })
        .collect();
    let inputs = binlow_core::tensor::Tensor::matrix(b, features, vals)?;
    let labels: Vec<u8> = (0..b).map(|i| (i % exp.topology.classes()) as u8).collect();
    let trace = train_step(&mut probe, &inputs, &labels, exp.eta0, true)?;
    let mut s = format!("# config {}\n", exp.digest());
    s.push_str("variable,lifetime,dtype,bytes\n");
    for r in &trace.rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.name,
            r.lifetime.label(),
            r.dtype.name(),
            r.bytes
        );
    }
    let _ = writeln!(s, "total,,,{}", trace.total_bytes);
    Ok(s)
}

pub struct TrainOutcome {
    pub best_test: f32,
    pub history: TrainHistory,
}

/// Runs the configured training experiment and writes metrics.csv,
/// trace.csv, checkpoint.bin, the expanded config and (when configured)
/// the raw gradient snapshots.
pub fn cmd_train(exp: &Experiment) -> Result<TrainOutcome> {
    let out = &exp.raw.run.out_dir;
    let (train_set, test_set) = load_dataset(exp)?;
    let (mut model, mut rng) = build_model(exp.model_config())?;
    let opts = TrainOptions {
        epochs: exp.raw.run.epochs,
        schedule: exp.schedule.clone(),
        dev_fraction: 0.1,
        density_layer: exp.raw.run.density_layer,
    };
    let history = train(&mut model, &mut rng, &train_set, &test_set, &opts)?;

    let expanded = format!("# config {}\n{}", exp.digest(), exp.expanded_toml());
    write_atomic(&out.join("config.expanded.toml"), expanded.as_bytes())?;
    write_atomic(&out.join("metrics.csv"), metrics_csv(exp, &history).as_bytes())?;
    write_atomic(&out.join("trace.csv"), trace_csv(exp)?.as_bytes())?;
    let eta = history.records.last().map(|r| r.eta).unwrap_or(exp.eta0);
    let ckpt = save_checkpoint(&model, &rng, eta, &exp.digest_bytes());
    write_atomic(&out.join("checkpoint.bin"), &ckpt)?;

    if exp.raw.run.density_layer.is_some() {
        let mut s = format!("# config {}\n", exp.digest());
        s.push_str("epoch,grad_mean,grad_sd\n");
        for (i, (m, sd)) in history.density.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", i + 1, m, sd);
        }
        write_atomic(&out.join("gradsnap.csv"), s.as_bytes())?;
    }

    let best = history.best_test;
    println!("best test accuracy: {:.4}", best);
    Ok(TrainOutcome {
        best_test: best,
        history,
    })
}

fn report_csv(exp: &Experiment, report: &MemoryReport) -> String {
    let mut s = format!("# config {}\n", exp.digest());
    s.push_str("variable,lifetime,dtype,bytes\n");
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.name,
            r.lifetime.label(),
            r.dtype.name(),
            r.bytes
        );
    }
    let _ = writeln!(s, "total,,,{}", report.total_bytes);
    s
}

/// Memory-footprint report for the configured scheme, with the standard
/// scheme as the saving baseline.
pub fn cmd_analyze(exp: &Experiment) -> Result<MemoryReport> {
    let b = exp.raw.run.batch_size;
    let report = memory_footprint(&exp.topology, &exp.scheme, &exp.optimizer, b)?;
    let baseline = memory_footprint(&exp.topology, &Scheme::standard(), &exp.optimizer, b)?;

    println!(
        "memory footprint of {} at batch {b} ({})",
        exp.topology.name,
        if exp.scheme == Scheme::standard() {
            "standard scheme"
        } else {
            "configured scheme"
        }
    );
    println!("{:<12} {:<10} {:>9} {:>12} {:>10}", "variable", "lifetime", "dtype", "bytes", "MiB");
    for r in &report.rows {
        println!(
            "{:<12} {:<10} {:>9} {:>12} {:>10.2}",
            r.name,
            r.lifetime.label(),
            r.dtype.name(),
            r.bytes,
            r.bytes as f64 / MIB
        );
    }
    println!(
        "total {:.2} MiB; saving vs standard {:.2}x",
        report.total_mib(),
        report.saving_over(&baseline)
    );

    write_atomic(
        &exp.raw.run.out_dir.join("memory.csv"),
        report_csv(exp, &report).as_bytes(),
    )?;
    Ok(report)
}

fn cost_model_of(exp: &Experiment) -> Result<CostModel> {
    let mut cost = CostModel::default();
    if let Some(p) = &exp.raw.run.cost_model {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        cost.parse_overrides(&text)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
    }
    Ok(cost)
}

/// Per-batch energy estimate for the configured scheme, with the standard
/// scheme as the saving baseline.
pub fn cmd_energy(exp: &Experiment) -> Result<(f64, f64)> {
    let b = exp.raw.run.batch_size;
    let cost = cost_model_of(exp)?;
    let include = exp.raw.run.include_optimizer_energy;
    let report = energy_estimate(
        &exp.topology,
        &exp.scheme,
        &exp.optimizer,
        b,
        exp.binarize,
        &cost,
        include,
    )?;
    let baseline = energy_estimate(
        &exp.topology,
        &Scheme::standard(),
        &exp.optimizer,
        b,
        true,
        &cost,
        include,
    )?;
    let saving = report.saving_over(&baseline);

    println!(
        "energy per batch of {} at batch {b}: {:.3} mJ (ops {:.3}, memory {:.3}); saving vs standard {:.2}x",
        exp.topology.name,
        report.total_mj(),
        report.ops_j * 1e3,
        report.mem_j * 1e3,
        saving
    );

    let mut s = format!("# config {}\n", exp.digest());
    s.push_str("component,joules\n");
    let _ = writeln!(s, "ops,{}", report.ops_j);
    let _ = writeln!(s, "memory,{}", report.mem_j);
    let _ = writeln!(s, "total,{}", report.total_j());
    let _ = writeln!(s, "baseline_total,{}", baseline.total_j());
    let _ = writeln!(s, "saving,{}", saving);
    write_atomic(&exp.raw.run.out_dir.join("energy.csv"), s.as_bytes())?;
    Ok((report.total_j(), saving))
}

/// Turns a run directory's raw gradient snapshots into the density series.
pub fn cmd_density(run_dir: &Path) -> Result<()> {
    let snap_path = run_dir.join("gradsnap.csv");
    let text = fs::read_to_string(&snap_path)
        .with_context(|| format!("reading {}", snap_path.display()))?;
    let mut digest_line = String::new();
    let mut snaps = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') {
            digest_line = line.to_string();
            continue;
        }
        if line.starts_with("epoch") || line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let _epoch = parts.next();
        let m: f32 = parts
            .next()
            .context("gradsnap.csv: missing mean")?
            .parse()?;
        let sd: f32 = parts.next().context("gradsnap.csv: missing sd")?.parse()?;
        snaps.push((m, sd));
    }
    let points = density_trace(&snaps).map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut s = String::new();
    if !digest_line.is_empty() {
        s.push_str(&digest_line);
        s.push('\n');
    }
    s.push_str("epoch,gradient_density,noise_density,flagged\n");
    for p in &points {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            p.epoch, p.gradient_density, p.noise_density, p.flagged
        );
    }
    write_atomic(&run_dir.join("density.csv"), s.as_bytes())?;
    let flagged = points.iter().filter(|p| p.flagged).count();
    println!(
        "density series over {} epochs; {flagged} epoch(s) outside one order of magnitude",
        points.len()
    );
    Ok(())
}
