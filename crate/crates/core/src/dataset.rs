//! MNIST (IDX) and CIFAR-10 (binary batch) loading, normalisation, splits
//! and seeded batching.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "CEILCOMP_DATA_DIR";

pub const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_FILE_BYTES: u64 = (CIFAR_RECORD_BYTES * CIFAR_RECORDS_PER_FILE) as u64;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Fraction of the training set held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" | "cifar-10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::Parameter(format!("unknown dataset '{other}' (mnist|cifar10)"))),
        }
    }
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    /// `$CEILCOMP_DATA_DIR/<name>` when the variable is set.
    pub fn default_dir(self) -> Option<PathBuf> {
        std::env::var_os(DATA_DIR_ENV).map(|d| PathBuf::from(d).join(self.name()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Per-channel affine normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Images `[N, c, h, w]` with labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub split: Split,
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    normalized: bool,
}

impl LabeledDataset {
    pub fn new(split: Split, images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Dimension(format!(
                "images must be [N, c, h, w], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {l} outside [0, {num_classes})")));
        }
        Ok(LabeledDataset {
            split,
            images,
            labels,
            num_classes,
            normalized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// `[c, h, w]` of one image.
    pub fn item_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Copies the listed samples into a batch tensor and label vector.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let [c, h, w] = self.item_shape();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("sample {i} outside dataset of {}", self.len())));
            }
            data.extend_from_slice(self.images.item(i));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(vec![indices.len(), c, h, w], data)?, labels))
    }

    /// New dataset holding the listed samples.
    pub fn subset(&self, split: Split, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.gather(indices)?;
        Ok(LabeledDataset {
            split,
            images,
            labels,
            num_classes: self.num_classes,
            normalized: self.normalized,
        })
    }

    /// Per-channel mean and (population) standard deviation.
    pub fn channel_stats(&self) -> Normalization {
        let [c, h, w] = self.item_shape();
        let hw = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for b in 0..self.len() {
            let item = self.images.item(b);
            for ch in 0..c {
                for &v in &item[ch * hw..(ch + 1) * hw] {
                    sum[ch] += f64::from(v);
                    sq[ch] += f64::from(v) * f64::from(v);
                }
            }
        }
        let n = (self.len() * hw) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        Normalization {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: sq
                .iter()
                .zip(&mean)
                .map(|(s, m)| ((s / n - m * m).max(0.0).sqrt().max(1e-8)) as f32)
                .collect(),
        }
    }

    /// Applies `(x - mean) / std` per channel. Normalising twice is a state
    /// error.
    pub fn normalize(&mut self, stats: &Normalization) -> Result<()> {
        if self.normalized {
            return Err(Error::State(format!("{:?} split is already normalised", self.split)));
        }
        let [c, h, w] = self.item_shape();
        if stats.mean.len() != c || stats.std.len() != c {
            return Err(Error::Dimension(format!(
                "normalisation has {} channels, images have {c}",
                stats.mean.len()
            )));
        }
        let hw = h * w;
        for (i, v) in self.images.data_mut().iter_mut().enumerate() {
            let ch = (i / hw) % c;
            *v = (*v - stats.mean[ch]) / stats.std[ch];
        }
        self.normalized = true;
        Ok(())
    }
}

/// Train/validation/test splits sharing one normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBundle {
    pub name: String,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    pub stats: Normalization,
}

impl DataBundle {
    /// Holds out a seeded 10% of `train` for validation, then normalises
    /// all three splits with statistics of the remaining training part.
    pub fn from_raw(name: &str, train: LabeledDataset, test: LabeledDataset, seed: u64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data(format!("{name}: training split is empty")));
        }
        let (train_idx, val_idx) = validation_split(train.len(), VALIDATION_FRACTION, seed);
        let mut val = train.subset(Split::Val, &val_idx)?;
        let mut tr = train.subset(Split::Train, &train_idx)?;
        let mut test = test;
        let stats = tr.channel_stats();
        tr.normalize(&stats)?;
        val.normalize(&stats)?;
        test.normalize(&stats)?;
        Ok(DataBundle {
            name: name.to_string(),
            train: tr,
            val,
            test,
            stats,
        })
    }

    pub fn split(&self, split: Split) -> &LabeledDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Seeded disjoint `(train, val)` index sets covering `0..n`, both sorted.
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Index batches over `0..n`; the final partial batch is kept.
pub fn batches(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    if shuffle {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn truncated(path: &Path, what: &str) -> Error {
    Error::io(
        path,
        io::Error::new(io::ErrorKind::UnexpectedEof, format!("file ends inside {what}")),
    )
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

/// First existing file among the usual spellings of an IDX file name.
fn idx_path(dir: &Path, stem: &str, kind: &str) -> PathBuf {
    let candidates = [
        format!("{stem}-{kind}-ubyte"),
        format!("{stem}-{}.{}-ubyte", &kind[..kind.len() - 5], &kind[kind.len() - 4..]),
    ];
    candidates
        .iter()
        .map(|c| dir.join(c))
        .find(|p| p.exists())
        .unwrap_or_else(|| dir.join(&candidates[0]))
}

/// IDX image file: `[N, 1, rows, cols]` scaled to `[0, 1]`.
pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    let bytes = read_file(path)?;
    if bytes.len() < 16 {
        return Err(truncated(path, "the header"));
    }
    let magic = be_u32(&bytes, 0);
    if magic != MNIST_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "{}: magic 0x{magic:08x}, expected 0x{MNIST_IMAGE_MAGIC:08x}",
            path.display()
        )));
    }
    let (n, rows, cols) = (
        be_u32(&bytes, 4) as usize,
        be_u32(&bytes, 8) as usize,
        be_u32(&bytes, 12) as usize,
    );
    let body = &bytes[16..];
    if body.len() < n * rows * cols {
        return Err(truncated(path, "the pixel data"));
    }
    let data = body[..n * rows * cols].iter().map(|&b| f32::from(b) / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_file(path)?;
    if bytes.len() < 8 {
        return Err(truncated(path, "the header"));
    }
    let magic = be_u32(&bytes, 0);
    if magic != MNIST_LABEL_MAGIC {
        return Err(Error::Format(format!(
            "{}: magic 0x{magic:08x}, expected 0x{MNIST_LABEL_MAGIC:08x}",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4) as usize;
    if bytes.len() < 8 + n {
        return Err(truncated(path, "the labels"));
    }
    Ok(bytes[8..8 + n].iter().map(|&b| usize::from(b)).collect())
}

/// Raw MNIST train and test splits, pixels in `[0, 1]`.
pub fn load_mnist_raw(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let load = |stem: &str, split: Split| -> Result<LabeledDataset> {
        let images = read_idx_images(&idx_path(dir, stem, "images-idx3"))?;
        let labels = read_idx_labels(&idx_path(dir, stem, "labels-idx1"))?;
        LabeledDataset::new(split, images, labels, 10)
    };
    Ok((load("train", Split::Train)?, load("t10k", Split::Test)?))
}

/// MNIST with a validation hold-out and train-split normalisation.
pub fn load_mnist(dir: &Path, seed: u64) -> Result<DataBundle> {
    let (train, test) = load_mnist_raw(dir)?;
    DataBundle::from_raw("mnist", train, test, seed)
}

/// One CIFAR-10 batch file: `[10000, 3, 32, 32]` in `[0, 1]`.
pub fn read_cifar_batch(path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let bytes = read_file(path)?;
    if bytes.len() as u64 != CIFAR_FILE_BYTES {
        return Err(Error::Format(format!(
            "{}: {} bytes, expected {CIFAR_FILE_BYTES}",
            path.display(),
            bytes.len()
        )));
    }
    let mut labels = Vec::with_capacity(CIFAR_RECORDS_PER_FILE);
    let mut data = Vec::with_capacity(CIFAR_RECORDS_PER_FILE * (CIFAR_RECORD_BYTES - 1));
    for record in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        labels.push(usize::from(record[0]));
        data.extend(record[1..].iter().map(|&b| f32::from(b) / 255.0));
    }
    Ok((Tensor::new(vec![CIFAR_RECORDS_PER_FILE, 3, 32, 32], data)?, labels))
}

pub fn load_cifar10_raw(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for f in CIFAR_TRAIN_FILES {
        let (t, l) = read_cifar_batch(&dir.join(f))?;
        data.extend(t.into_data());
        labels.extend(l);
    }
    let n = labels.len();
    let train = LabeledDataset::new(Split::Train, Tensor::new(vec![n, 3, 32, 32], data)?, labels, 10)?;
    let (t, l) = read_cifar_batch(&dir.join(CIFAR_TEST_FILE))?;
    let test = LabeledDataset::new(Split::Test, t, l, 10)?;
    Ok((train, test))
}

pub fn load_cifar10(dir: &Path, seed: u64) -> Result<DataBundle> {
    let (train, test) = load_cifar10_raw(dir)?;
    DataBundle::from_raw("cifar10", train, test, seed)
}

pub fn load(kind: DatasetKind, dir: &Path, seed: u64) -> Result<DataBundle> {
    match kind {
        DatasetKind::Mnist => load_mnist(dir, seed),
        DatasetKind::Cifar10 => load_cifar10(dir, seed),
    }
}

/// Mirrors every image of a `[N, c, h, w]` batch left to right.
pub fn hflip(batch: &mut Tensor) {
    let w = batch.shape()[3];
    for row in batch.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn write_idx(dir: &Path, name: &str, magic: u32, dims: &[u32], body: &[u8]) -> PathBuf {
        let mut bytes = magic.to_be_bytes().to_vec();
        for d in dims {
            bytes.extend(d.to_be_bytes());
        }
        bytes.extend_from_slice(body);
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 10) as u8).collect();
        let p = write_idx(dir.path(), "img", MNIST_IMAGE_MAGIC, &[2, 3, 3], &px);
        let t = read_idx_images(&p).unwrap();
        assert_eq!(t.shape(), &[2, 1, 3, 3]);
        assert!((t.data()[17] - 170.0 / 255.0).abs() < 1e-7);

        let bad = write_idx(dir.path(), "bad", 0x0000_0804, &[2, 3, 3], &px);
        match read_idx_images(&bad) {
            Err(Error::Format(msg)) => assert!(msg.contains("bad")),
            other => panic!("{other:?}"),
        }
        let short = write_idx(dir.path(), "short", MNIST_IMAGE_MAGIC, &[3, 3, 3], &px);
        assert!(matches!(read_idx_images(&short), Err(Error::Io { .. })));

        let l = write_idx(dir.path(), "lab", MNIST_LABEL_MAGIC, &[3], &[5, 0, 4]);
        assert_eq!(read_idx_labels(&l).unwrap(), vec![5, 0, 4]);
        let l = write_idx(dir.path(), "lab2", MNIST_LABEL_MAGIC, &[4], &[5, 0, 4]);
        assert!(matches!(read_idx_labels(&l), Err(Error::Io { .. })));
    }

    #[test]
    fn cifar_size_and_stride() {
        assert_eq!(CIFAR_RECORD_BYTES, 3073);
        assert_eq!(CIFAR_FILE_BYTES, 30_730_000);
        assert_eq!(CIFAR_TRAIN_FILES.len() + 1, 6);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        fs::write(&p, vec![0u8; 3073 * 2]).unwrap();
        assert!(matches!(read_cifar_batch(&p), Err(Error::Format(_))));
    }

    #[test]
    fn cifar_records_match_byte_reader() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        let bytes: Vec<u8> = (0..CIFAR_FILE_BYTES).map(|i| ((i * 7 + i / 3073) % 251) as u8).collect();
        fs::write(&p, &bytes).unwrap();
        let (t, labels) = read_cifar_batch(&p).unwrap();
        for r in [0usize, 1, 2, 17, 999, 5000, 7777, 9000, 9998, 9999] {
            let rec = &bytes[r * 3073..(r + 1) * 3073];
            assert_eq!(labels[r], rec[0] as usize);
            // Channel 2, row 31, column 5.
            let off = 2 * 1024 + 31 * 32 + 5;
            assert_eq!(t.item(r)[off], f32::from(rec[1 + off]) / 255.0);
        }
    }

    #[test]
    fn batch_sizes_and_order() {
        let b = batches(10, 4, 3, false);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b.concat(), (0..10).collect::<Vec<_>>());
        assert_eq!(batches(10, 4, 3, true), batches(10, 4, 3, true));
        assert_ne!(batches(100, 10, 3, true), batches(100, 10, 4, true));
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let (tr, va) = validation_split(1000, 0.1, 7);
        assert_eq!(va.len(), 100);
        let all: BTreeSet<usize> = tr.iter().chain(&va).copied().collect();
        assert_eq!(all.len(), 1000);
        assert_eq!(validation_split(1000, 0.1, 7), (tr, va));
    }

    #[test]
    fn normalisation_zero_mean_unit_std_once() {
        let images = Tensor::from_fn(&[50, 2, 3, 3], |i| ((i * 37) % 11) as f32 * 0.1 + (i % 2) as f32);
        let labels = (0..50).map(|i| i % 3).collect();
        let raw = LabeledDataset::new(Split::Train, images, labels, 3).unwrap();
        let test = raw.subset(Split::Test, &[0, 1, 2]).unwrap();
        let bundle = DataBundle::from_raw("toy", raw, test, 1).unwrap();
        let s = bundle.train.channel_stats();
        for c in 0..2 {
            assert!(s.mean[c].abs() < 1e-2 && (s.std[c] - 1.0).abs() < 1e-2, "{s:?}");
        }
        let mut again = bundle.train.clone();
        assert!(matches!(again.normalize(&bundle.stats), Err(Error::State(_))));
        assert_eq!(bundle.train.len() + bundle.val.len(), 50);
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            LabeledDataset::new(Split::Train, Tensor::zeros(&[1, 1, 2, 2]), vec![3], 3),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn hflip_reverses_rows() {
        let mut t = Tensor::from_fn(&[1, 1, 2, 3], |i| i as f32);
        hflip(&mut t);
        assert_eq!(t.data(), &[2., 1., 0., 5., 4., 3.]);
    }
}
