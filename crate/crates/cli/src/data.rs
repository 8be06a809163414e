//! Dataset ingestion: MNIST IDX files (optionally gzip-compressed) and
//! CIFAR-10 binary batches. Pixels map affinely to [-1, 1]; sample order is
//! the files' own, before any seeded shuffling by the trainer.

use anyhow::{anyhow, bail, Context, Result};
use binlow_core::engine::Dataset;
use flate2::read::GzDecoder;
use std::fs::File;
use std::io::Read;
use std::path::Path;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn open_maybe_gz(dir: &Path, stem: &str) -> Result<Box<dyn Read>> {
    let plain = dir.join(stem);
    if plain.exists() {
        return Ok(Box::new(
            File::open(&plain).with_context(|| format!("opening {}", plain.display()))?,
        ));
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        let f = File::open(&gz).with_context(|| format!("opening {}", gz.display()))?;
        return Ok(Box::new(GzDecoder::new(f)));
    }
    bail!(
        "dataset file not found: {} (or .gz)",
        dir.join(stem).display()
    )
}

fn read_u32_be(r: &mut dyn Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

fn scale(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

fn read_idx_images(mut r: Box<dyn Read>, what: &str) -> Result<(Vec<f32>, usize, usize)> {
    let magic = read_u32_be(r.as_mut())?;
    if magic != IDX_IMAGES_MAGIC {
        bail!("{what}: bad IDX image magic {magic:#010x}, expected 0x00000803");
    }
    let n = read_u32_be(r.as_mut())? as usize;
    let rows = read_u32_be(r.as_mut())? as usize;
    let cols = read_u32_be(r.as_mut())? as usize;
    let mut raw = vec![0u8; n * rows * cols];
    r.read_exact(&mut raw)
        .with_context(|| format!("{what}: truncated image payload"))?;
    let mut trailer = [0u8; 1];
    if r.read(&mut trailer)? != 0 {
        bail!("{what}: trailing bytes after image payload");
    }
    Ok((raw.iter().map(|&p| scale(p)).collect(), n, rows * cols))
}

fn read_idx_labels(mut r: Box<dyn Read>, what: &str) -> Result<Vec<u8>> {
    let magic = read_u32_be(r.as_mut())?;
    if magic != IDX_LABELS_MAGIC {
        bail!("{what}: bad IDX label magic {magic:#010x}, expected 0x00000801");
    }
    let n = read_u32_be(r.as_mut())? as usize;
    let mut raw = vec![0u8; n];
    r.read_exact(&mut raw)
        .with_context(|| format!("{what}: truncated label payload"))?;
    Ok(raw)
}

/// Loads the MNIST IDX pair for one split ("train" or "t10k").
pub fn load_mnist_split(dir: &Path, split: &str) -> Result<Dataset> {
    let images = read_idx_images(
        open_maybe_gz(dir, &format!("{split}-images-idx3-ubyte"))?,
        split,
    )?;
    let labels = read_idx_labels(
        open_maybe_gz(dir, &format!("{split}-labels-idx1-ubyte"))?,
        split,
    )?;
    let (images, n, features) = images;
    if labels.len() != n {
        bail!(
            "{split}: {n} images but {} labels",
            labels.len()
        );
    }
    if labels.iter().any(|&l| l > 9) {
        bail!("{split}: label out of range");
    }
    Ok(Dataset {
        features,
        classes: 10,
        images,
        labels,
    })
}

pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((
        load_mnist_split(dir, "train")?,
        load_mnist_split(dir, "t10k")?,
    ))
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_HW: usize = 32 * 32;

/// Parses one CIFAR-10 binary batch file: 3073-byte records of one label
/// byte plus three 1024-byte channel planes, converted to channel-last rows.
pub fn load_cifar_batch(path: &Path) -> Result<Dataset> {
    let raw = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if raw.is_empty() || raw.len() % CIFAR_RECORD != 0 {
        bail!(
            "{}: length {} is not a multiple of the 3073-byte record",
            path.display(),
            raw.len()
        );
    }
    let n = raw.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * 3 * CIFAR_HW);
    let mut labels = Vec::with_capacity(n);
    for rec in raw.chunks_exact(CIFAR_RECORD) {
        let label = rec[0];
        if label > 9 {
            bail!("{}: label {label} out of range", path.display());
        }
        labels.push(label);
        let planes = &rec[1..];
        // planes are channel-major; the engine wants (h, w, c)
        for hw in 0..CIFAR_HW {
            for c in 0..3 {
                images.push(scale(planes[c * CIFAR_HW + hw]));
            }
        }
    }
    Ok(Dataset {
        features: 3 * CIFAR_HW,
        classes: 10,
        images,
        labels,
    })
}

fn concat(mut sets: Vec<Dataset>) -> Result<Dataset> {
    let first = sets
        .first()
        .ok_or_else(|| anyhow!("no CIFAR-10 batch files found"))?;
    let features = first.features;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for s in sets.drain(..) {
        images.extend(s.images);
        labels.extend(s.labels);
    }
    Ok(Dataset {
        features,
        classes: 10,
        images,
        labels,
    })
}

/// Loads the five CIFAR-10 training batches plus the test batch.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train = Vec::new();
    for i in 1..=5 {
        let p = dir.join(format!("data_batch_{i}.bin"));
        if !p.exists() {
            bail!("dataset file not found: {}", p.display());
        }
        train.push(load_cifar_batch(&p)?);
    }
    let test = load_cifar_batch(&dir.join("test_batch.bin"))?;
    Ok((concat(train)?, test))
}

/// Deterministically truncates a dataset to its first `n` samples (0 keeps
/// everything).
pub fn truncate(ds: Dataset, n: usize) -> Dataset {
    if n == 0 || n >= ds.len() {
        return ds;
    }
    Dataset {
        features: ds.features,
        classes: ds.classes,
        images: ds.images[..n * ds.features].to_vec(),
        labels: ds.labels[..n].to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_images(path: &Path, images: &[Vec<u8>], rows: usize, cols: usize) {
        let mut out = Vec::new();
        out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        out.extend_from_slice(&(images.len() as u32).to_be_bytes());
        out.extend_from_slice(&(rows as u32).to_be_bytes());
        out.extend_from_slice(&(cols as u32).to_be_bytes());
        for img in images {
            out.extend_from_slice(img);
        }
        std::fs::write(path, out).unwrap();
    }

    fn write_idx_labels(path: &Path, labels: &[u8]) {
        let mut out = Vec::new();
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        std::fs::write(path, out).unwrap();
    }

    #[test]
    fn mnist_roundtrip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let imgs: Vec<Vec<u8>> = vec![vec![0u8; 4], vec![255u8; 4], vec![128u8; 4]];
        write_idx_images(&dir.path().join("train-images-idx3-ubyte"), &imgs, 2, 2);
        write_idx_labels(&dir.path().join("train-labels-idx1-ubyte"), &[3, 1, 4]);
        let ds = load_mnist_split(dir.path(), "train").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.features, 4);
        assert_eq!(ds.images[0], -1.0); // pixel 0
        assert_eq!(ds.images[4], 1.0); // pixel 255
        assert_eq!(ds.labels, vec![3, 1, 4]);
    }

    #[test]
    fn mnist_gzip_variant() {
        let dir = tempfile::tempdir().unwrap();
        let mut payload = Vec::new();
        payload.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        payload.extend_from_slice(&1u32.to_be_bytes());
        payload.extend_from_slice(&2u32.to_be_bytes());
        payload.extend_from_slice(&2u32.to_be_bytes());
        payload.extend_from_slice(&[10, 20, 30, 40]);
        let f = File::create(dir.path().join("train-images-idx3-ubyte.gz")).unwrap();
        let mut gz = flate2::write::GzEncoder::new(f, flate2::Compression::default());
        gz.write_all(&payload).unwrap();
        gz.finish().unwrap();
        write_idx_labels(&dir.path().join("train-labels-idx1-ubyte"), &[7]);
        let ds = load_mnist_split(dir.path(), "train").unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels, vec![7]);
    }

    #[test]
    fn mnist_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("train-images-idx3-ubyte"),
            [0u8, 0, 8, 4, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 1],
        )
        .unwrap();
        write_idx_labels(&dir.path().join("train-labels-idx1-ubyte"), &[0]);
        let err = load_mnist_split(dir.path(), "train").unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn cifar_roundtrip_channel_last() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 5; // label
        rec[1] = 255; // R plane, first pixel
        rec[1 + CIFAR_HW] = 0; // G
        rec[1 + 2 * CIFAR_HW] = 128; // B
        std::fs::write(dir.path().join("test_batch.bin"), &rec).unwrap();
        let ds = load_cifar_batch(&dir.path().join("test_batch.bin")).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels, vec![5]);
        // channel-last: first three values are (R, G, B) of pixel (0, 0)
        assert_eq!(ds.images[0], 1.0);
        assert_eq!(ds.images[1], -1.0);
        assert!((ds.images[2] - (128.0 / 127.5 - 1.0)).abs() < 1e-6);
    }

    #[test]
    fn cifar_wrong_length_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("test_batch.bin"), vec![0u8; 3072]).unwrap();
        let err = load_cifar_batch(&dir.path().join("test_batch.bin")).unwrap_err();
        assert!(err.to_string().contains("3073"));
    }

    #[test]
    fn truncate_caps_samples() {
        let ds = Dataset {
            features: 2,
            classes: 2,
            images: vec![0.0; 20],
            labels: vec![0; 10],
        };
        assert_eq!(truncate(ds.clone(), 4).len(), 4);
        assert_eq!(truncate(ds.clone(), 0).len(), 10);
        assert_eq!(truncate(ds, 99).len(), 10);
    }
}
