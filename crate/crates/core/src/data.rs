//! Datasets: the CIFAR-10 binary batches and a synthetic single-channel
//! shape set.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, io_err, DcnError, Result};
use crate::pgm;
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub class_count: usize,
    /// Per-channel means subtracted from `images` (zeros if uncentered).
    pub channel_means: Vec<f64>,
}

impl LabeledDataset {
    pub fn new(images: Tensor4, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if labels.len() != images.n() {
            return Err(invalid(format!(
                "{} labels for {} images",
                labels.len(),
                images.n()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(invalid(format!(
                "label {} out of range for {} classes",
                l, class_count
            )));
        }
        let c = images.c();
        Ok(LabeledDataset {
            images,
            labels,
            class_count,
            channel_means: vec![0.0; c],
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Mean of every channel over all samples and pixels.
    pub fn compute_channel_means(&self) -> Vec<f64> {
        let (n, c) = (self.images.n(), self.images.c());
        let per = (n * self.images.h() * self.images.w()) as f64;
        (0..c)
            .map(|ch| {
                (0..n)
                    .map(|i| self.images.plane(i, ch).iter().sum::<f64>())
                    .sum::<f64>()
                    / per
            })
            .collect()
    }

    /// Subtracts `means` per channel and records them.
    pub fn center_with(&mut self, means: &[f64]) -> Result<()> {
        if means.len() != self.images.c() {
            return Err(invalid(format!(
                "{} channel means for {} channels",
                means.len(),
                self.images.c()
            )));
        }
        for i in 0..self.images.n() {
            for (ch, &m) in means.iter().enumerate() {
                for v in self.images.plane_mut(i, ch) {
                    *v -= m;
                }
            }
        }
        for (dst, &m) in self.channel_means.iter_mut().zip(means) {
            *dst += m;
        }
        Ok(())
    }

    /// Zero-mean normalization with statistics from `train` only.
    pub fn center_pair(train: &mut LabeledDataset, test: &mut LabeledDataset) -> Result<()> {
        let means = train.compute_channel_means();
        train.center_with(&means)?;
        test.center_with(&means)
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: self.images.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            channel_means: self.channel_means.clone(),
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

pub const CIFAR_RECORD_BYTES: u64 = 3073;
pub const CIFAR_RECORDS_PER_BATCH: usize = 10_000;
const CIFAR_SIDE: usize = 32;
const CIFAR_CLASSES: usize = 10;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Raw records of one binary batch file: labels plus channel-planar pixels
/// scaled to `[0, 1]`.
pub fn read_cifar_batch(
    path: &Path,
    expected_records: Option<usize>,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let len = bytes.len() as u64;
    let complete = len / CIFAR_RECORD_BYTES;
    if !len.is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(DcnError::Ingest {
            path: path.to_path_buf(),
            offset: complete * CIFAR_RECORD_BYTES,
            reason: format!(
                "truncated record: {} trailing bytes, records are {} bytes",
                len % CIFAR_RECORD_BYTES,
                CIFAR_RECORD_BYTES
            ),
        });
    }
    if let Some(expected) = expected_records {
        if complete as usize != expected {
            return Err(DcnError::Ingest {
                path: path.to_path_buf(),
                offset: len,
                reason: format!("found {} records, expected {}", complete, expected),
            });
        }
    }
    let mut labels = Vec::with_capacity(complete as usize);
    let mut pixels = Vec::with_capacity(complete as usize * 3072);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES as usize).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(DcnError::Ingest {
                path: path.to_path_buf(),
                offset: i as u64 * CIFAR_RECORD_BYTES,
                reason: format!("label byte {} out of range", label),
            });
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((labels, pixels))
}

fn cifar_root(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if !dir.join(CIFAR_TEST_FILE).exists() && nested.join(CIFAR_TEST_FILE).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// True if `dir` (or its `cifar-10-batches-bin` child) holds the batches.
pub fn cifar10_present(dir: &Path) -> bool {
    let root = cifar_root(dir);
    root.join(CIFAR_TEST_FILE).is_file() && CIFAR_TRAIN_FILES.iter().all(|f| root.join(f).is_file())
}

/// Loads the five training batches and the test batch, scales pixels to
/// `[0, 1]` and subtracts the per-channel training means from both splits.
pub fn load_cifar10(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    load_cifar10_with(dir, Some(CIFAR_RECORDS_PER_BATCH))
}

/// [`load_cifar10`] with a configurable per-file record count check.
pub fn load_cifar10_with(
    dir: &Path,
    records_per_file: Option<usize>,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let root = cifar_root(dir);
    let load = |files: &[&str]| -> Result<LabeledDataset> {
        let mut labels = Vec::new();
        let mut pixels = Vec::new();
        for f in files {
            let (l, p) = read_cifar_batch(&root.join(f), records_per_file)?;
            labels.extend(l);
            pixels.extend(p);
        }
        let n = labels.len();
        let images = Tensor4::from_vec(n, 3, CIFAR_SIDE, CIFAR_SIDE, pixels)?;
        LabeledDataset::new(images, labels, CIFAR_CLASSES)
    };
    let mut train = load(&CIFAR_TRAIN_FILES)?;
    let mut test = load(&[CIFAR_TEST_FILE])?;
    LabeledDataset::center_pair(&mut train, &mut test)?;
    Ok((train, test))
}

/// Shape kinds available to [`synth_shapes`]; the class id indexes this list.
pub const SHAPE_KINDS: [&str; 6] = ["disk", "square", "triangle", "cross", "ring", "bar"];

fn inside(kind: usize, u: f64, v: f64) -> bool {
    match kind {
        0 => u * u + v * v <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.8,
        2 => v >= -0.5 && 3f64.sqrt() * u.abs() + v <= 1.0,
        3 => (u.abs() <= 0.25 && v.abs() <= 1.0) || (v.abs() <= 0.25 && u.abs() <= 1.0),
        4 => {
            let r2 = u * u + v * v;
            (0.36..=1.0).contains(&r2)
        }
        _ => u.abs() <= 1.0 && v.abs() <= 0.3,
    }
}

/// Grayscale renders of parametric shapes with random position, scale and
/// rotation; class `i % classes` is assigned round-robin. Pixels lie in
/// `[0, 1]`; no centering is applied. Deterministic in `seed`.
pub fn synth_shapes(
    seed: u64,
    count: usize,
    classes: usize,
    width: usize,
    height: usize,
) -> Result<LabeledDataset> {
    if classes == 0 || classes > SHAPE_KINDS.len() {
        return Err(invalid(format!(
            "classes must be in 1..={}, got {}",
            SHAPE_KINDS.len(),
            classes
        )));
    }
    if count < classes {
        return Err(invalid(format!(
            "{} samples for {} classes",
            count, classes
        )));
    }
    if width < 8 || height < 8 {
        return Err(invalid("images must be at least 8x8"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).expect("valid deviation");
    let (wf, hf) = (width as f64, height as f64);
    let side = wf.min(hf);
    let mut data = Vec::with_capacity(count * width * height);
    let mut labels = Vec::with_capacity(count);
    const SUB: usize = 3;
    for i in 0..count {
        let kind = i % classes;
        let radius = rng.random_range(0.22..0.36) * side;
        let cx = rng.random_range(radius * 0.8..wf - radius * 0.8);
        let cy = rng.random_range(radius * 0.8..hf - radius * 0.8);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (sin, cos) = angle.sin_cos();
        let fg = rng.random_range(0.65..0.95);
        let bg = rng.random_range(0.05..0.35);
        for y in 0..height {
            for x in 0..width {
                let mut hits = 0;
                for sy in 0..SUB {
                    for sx in 0..SUB {
                        let px = x as f64 + (sx as f64 + 0.5) / SUB as f64 - cx;
                        let py = y as f64 + (sy as f64 + 0.5) / SUB as f64 - cy;
                        let u = (cos * px + sin * py) / radius;
                        let v = (-sin * px + cos * py) / radius;
                        if inside(kind, u, v) {
                            hits += 1;
                        }
                    }
                }
                let cover = hits as f64 / (SUB * SUB) as f64;
                let value = bg + (fg - bg) * cover + noise.sample(&mut rng);
                data.push(value.clamp(0.0, 1.0));
            }
        }
        labels.push(kind);
    }
    let images = Tensor4::from_vec(count, 1, height, width, data)?;
    LabeledDataset::new(images, labels, classes)
}

/// Writes every image as `NNNNN.pgm` plus a `labels.csv` index into `dir`.
pub fn export_pgm(dataset: &LabeledDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut index = String::from("file,label\n");
    let (h, w) = (dataset.images.h(), dataset.images.w());
    for (i, &label) in dataset.labels.iter().enumerate() {
        let name = format!("{:05}.pgm", i);
        pgm::write_pgm(&dir.join(&name), dataset.images.plane(i, 0), w, h)?;
        let _ = writeln!(index, "{},{}", name, label);
    }
    let path = dir.join("labels.csv");
    std::fs::write(&path, index).map_err(io_err(path))
}
