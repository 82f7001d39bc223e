//! Dataset readers (IDX and CIFAR-10 binary) and deterministic batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::SampleShape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;
const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Images scaled to `[0, 1]`, stored sample-major, with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub shape: SampleShape,
    pub pixels: Vec<f32>,
    pub labels: Vec<u8>,
}

impl LabeledImageSet {
    pub fn new(shape: SampleShape, pixels: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if pixels.len() != per * labels.len() {
            return Err(Error::shape(
                "LabeledImageSet::new",
                format!("{} pixels for {} samples of {shape:?}", pixels.len(), labels.len()),
            ));
        }
        if let Some(l) = labels.iter().find(|l| **l as usize >= NUM_CLASSES) {
            return Err(Error::invalid(
                "LabeledImageSet::new",
                format!("label {l} out of range"),
            ));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("LabeledImageSet::new", "pixel outside [0, 1]"));
        }
        Ok(Self { shape, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let n = self.sample_len();
        &self.pixels[index * n..(index + 1) * n]
    }

    /// The first `n` samples (all of them when `n >= len`).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            shape: self.shape,
            pixels: self.pixels[..n * self.sample_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Gathers samples into an `(N, C, H, W)` tensor and their labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.shape;
        let images = Tensor::new(&[indices.len(), c, h, w], data).expect("gathered size matches shape");
        (images, indices.iter().map(|&i| self.labels[i] as usize).collect())
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(what, "truncated header"))
}

/// Parses an IDX image file (`0x00000803`, N×H×W) and label file (`0x00000801`).
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledImageSet> {
    let magic = be_u32(images, 0, "IDX images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format("IDX images", format!("bad magic {magic:#010x}")));
    }
    let n = be_u32(images, 4, "IDX images")? as usize;
    let h = be_u32(images, 8, "IDX images")? as usize;
    let w = be_u32(images, 12, "IDX images")? as usize;
    let body = &images[16..];
    if body.len() != n * h * w {
        return Err(Error::format(
            "IDX images",
            format!("header declares {n}x{h}x{w} pixels, payload has {}", body.len()),
        ));
    }

    let magic = be_u32(labels, 0, "IDX labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format("IDX labels", format!("bad magic {magic:#010x}")));
    }
    let n_labels = be_u32(labels, 4, "IDX labels")? as usize;
    let label_body = &labels[8..];
    if label_body.len() != n_labels {
        return Err(Error::format(
            "IDX labels",
            format!("header declares {n_labels} labels, payload has {}", label_body.len()),
        ));
    }
    if n_labels != n {
        return Err(Error::format("IDX", format!("{n} images but {n_labels} labels")));
    }
    let pixels = body.iter().map(|b| *b as f32 / 255.0).collect();
    LabeledImageSet::new([1, h, w], pixels, label_body.to_vec()).map_err(|e| Error::format("IDX", e.to_string()))
}

fn to_byte(p: f32) -> u8 {
    (p * 255.0).round() as u8
}

/// Inverse of [`parse_idx`] for single-channel sets.
pub fn encode_idx(set: &LabeledImageSet) -> Result<(Vec<u8>, Vec<u8>)> {
    let [c, h, w] = set.shape;
    if c != 1 {
        return Err(Error::invalid(
            "encode_idx",
            format!("IDX holds one channel, set has {c}"),
        ));
    }
    let mut images = Vec::with_capacity(16 + set.pixels.len());
    for v in [IDX_IMAGES_MAGIC, set.len() as u32, h as u32, w as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(set.pixels.iter().map(|p| to_byte(*p)));
    let mut labels = Vec::with_capacity(8 + set.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(set.len() as u32).to_be_bytes());
    labels.extend_from_slice(&set.labels);
    Ok((images, labels))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    parse_idx(&read_file(images_path.as_ref())?, &read_file(labels_path.as_ref())?)
}

/// Parses concatenated CIFAR-10 records: one label byte, then 3072 planar RGB bytes.
pub fn parse_cifar10(bytes: &[u8]) -> Result<LabeledImageSet> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(
            "CIFAR-10",
            format!(
                "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0]);
        pixels.extend(rec[1..].iter().map(|b| *b as f32 / 255.0));
    }
    LabeledImageSet::new([3, 32, 32], pixels, labels).map_err(|e| Error::format("CIFAR-10", e.to_string()))
}

pub fn encode_cifar10(set: &LabeledImageSet) -> Result<Vec<u8>> {
    if set.shape != [3, 32, 32] {
        return Err(Error::invalid(
            "encode_cifar10",
            format!("expected 3x32x32, got {:?}", set.shape),
        ));
    }
    let mut out = Vec::with_capacity(set.len() * CIFAR_RECORD);
    for i in 0..set.len() {
        out.push(set.labels[i]);
        out.extend(set.image(i).iter().map(|p| to_byte(*p)));
    }
    Ok(out)
}

pub fn read_cifar10<P: AsRef<Path>>(paths: &[P]) -> Result<LabeledImageSet> {
    let mut bytes = Vec::new();
    for p in paths {
        let chunk = read_file(p.as_ref())?;
        if chunk.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                "CIFAR-10",
                format!(
                    "{}: {} bytes is not a whole number of records",
                    p.as_ref().display(),
                    chunk.len()
                ),
            ));
        }
        bytes.extend(chunk);
    }
    parse_cifar10(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dataset {
    FashionMnist,
    Cifar10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Dataset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "fashion-mnist" | "fashion_mnist" | "fmnist" => Ok(Dataset::FashionMnist),
            "cifar10" | "cifar-10" => Ok(Dataset::Cifar10),
            other => Err(Error::Config(format!(
                "unknown dataset '{other}' (fashion-mnist, cifar10)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dataset::FashionMnist => "fashion-mnist",
            Dataset::Cifar10 => "cifar10",
        }
    }

    pub fn default_batch_size(self) -> usize {
        match self {
            Dataset::FashionMnist => 4096,
            Dataset::Cifar10 => 1024,
        }
    }

    /// Files expected under `root`: `fashion-mnist/*-ubyte` (uncompressed
    /// IDX) or `cifar-10-batches-bin/*.bin`.
    pub fn files(self, root: &Path, split: Split) -> Vec<PathBuf> {
        match (self, split) {
            (Dataset::FashionMnist, split) => {
                let prefix = if split == Split::Train { "train" } else { "t10k" };
                let dir = root.join("fashion-mnist");
                vec![
                    dir.join(format!("{prefix}-images-idx3-ubyte")),
                    dir.join(format!("{prefix}-labels-idx1-ubyte")),
                ]
            }
            (Dataset::Cifar10, Split::Train) => (1..=5)
                .map(|i| root.join("cifar-10-batches-bin").join(format!("data_batch_{i}.bin")))
                .collect(),
            (Dataset::Cifar10, Split::Test) => vec![root.join("cifar-10-batches-bin").join("test_batch.bin")],
        }
    }

    pub fn load(self, root: &Path, split: Split) -> Result<LabeledImageSet> {
        let files = self.files(root, split);
        if let Some(missing) = files.iter().find(|f| !f.is_file()) {
            return Err(Error::Config(format!(
                "dataset file {} not found; run `attnwise fetch-data --dataset {} --dir {}`",
                missing.display(),
                self.name(),
                root.display()
            )));
        }
        match self {
            Dataset::FashionMnist => read_idx(&files[0], &files[1]),
            Dataset::Cifar10 => read_cifar10(&files),
        }
    }
}

/// Sample indices of one minibatch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub epoch: u64,
    pub index: usize,
    pub indices: Vec<usize>,
}

/// Splits `0..n` into batches of `batch_size` (last may be short). With
/// `shuffle`, the order is a permutation drawn from ChaCha8 seeded with
/// `seed` on stream `epoch`, so every epoch has its own permutation.
pub fn make_batches(n: usize, batch_size: usize, shuffle: bool, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::invalid("make_batches", "batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    Ok(order
        .chunks(batch_size)
        .enumerate()
        .map(|(index, c)| Batch {
            epoch,
            index,
            indices: c.to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_fixture(n: u32, h: u32, w: u32, pixels: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let mut im = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, h, w] {
            im.extend_from_slice(&v.to_be_bytes());
        }
        im.extend_from_slice(pixels);
        let mut lb = Vec::new();
        lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lb.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lb.extend_from_slice(labels);
        (im, lb)
    }

    #[test]
    fn idx_two_by_two() {
        let (im, lb) = idx_fixture(1, 2, 2, &[0, 255, 0, 255], &[3]);
        let set = parse_idx(&im, &lb).unwrap();
        assert_eq!(set.pixels, vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(set.labels, vec![3]);
        assert_eq!(set.shape, [1, 2, 2]);
        assert_eq!(encode_idx(&set).unwrap(), (im, lb));
    }

    #[test]
    fn idx_errors() {
        let (im, lb) = idx_fixture(2, 2, 2, &[0; 8], &[1]);
        assert!(parse_idx(&im, &lb)
            .unwrap_err()
            .to_string()
            .contains("2 images but 1 labels"));
        let (im, lb) = idx_fixture(2, 2, 2, &[0; 7], &[1, 2]);
        assert!(parse_idx(&im, &lb).is_err());
        let (mut im, lb) = idx_fixture(1, 1, 1, &[0], &[1]);
        im[3] = 0x01;
        assert!(parse_idx(&im, &lb).unwrap_err().to_string().contains("magic"));
        assert!(parse_idx(&[0, 0], &lb).is_err());
        let (im, lb) = idx_fixture(1, 1, 1, &[0], &[12]);
        assert!(parse_idx(&im, &lb).is_err());
    }

    #[test]
    fn cifar_single_record() {
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat_n(255, 1024));
        rec.extend(std::iter::repeat_n(0, 2048));
        let set = parse_cifar10(&rec).unwrap();
        assert_eq!(set.labels, vec![7]);
        assert!(set.image(0)[..1024].iter().all(|v| *v == 1.0));
        assert!(set.image(0)[1024..].iter().all(|v| *v == 0.0));
        assert_eq!(encode_cifar10(&set).unwrap(), rec);
    }

    #[test]
    fn cifar_empty_and_ragged() {
        assert!(parse_cifar10(&[]).unwrap().is_empty());
        assert!(parse_cifar10(&[0; 3074]).is_err());
    }

    #[test]
    fn batch_arithmetic() {
        let b = make_batches(60_000, 4096, true, 1, 0).unwrap();
        assert_eq!(b.len(), 15);
        assert_eq!(b[14].indices.len(), 2656);
        let b = make_batches(50_000, 1024, false, 1, 0).unwrap();
        assert_eq!(b.len(), 49);
        assert_eq!(b[48].indices.len(), 848);
        assert_eq!(make_batches(10, 10, true, 0, 3).unwrap().len(), 1);
        assert!(make_batches(10, 0, false, 0, 0).is_err());
    }

    #[test]
    fn epochs_get_fresh_permutations() {
        let a = make_batches(100, 100, true, 5, 0).unwrap();
        let b = make_batches(100, 100, true, 5, 1).unwrap();
        let a2 = make_batches(100, 100, true, 5, 0).unwrap();
        assert_ne!(a[0].indices, b[0].indices);
        assert_eq!(a, a2);
    }

    #[test]
    fn gather_builds_batch_tensor() {
        let set = LabeledImageSet::new([1, 1, 2], vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5], vec![0, 1, 2]).unwrap();
        let (x, y) = set.gather(&[2, 0]);
        assert_eq!(x.shape(), &[2, 1, 1, 2]);
        assert_eq!(x.to_vec(), vec![0.4, 0.5, 0.0, 0.1]);
        assert_eq!(y, vec![2, 0]);
        assert_eq!(set.truncated(2).len(), 2);
    }
}
