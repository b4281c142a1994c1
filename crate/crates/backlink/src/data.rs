//! Dataset ingestion, synthesis, batching, and normalization.
//!
//! Images live in memory as raw unsigned bytes shaped `(N, C, H, W)`. Two
//! on-disk formats are supported bit-exactly: the IDX format (magic
//! `0x00000803` for images, `0x00000801` for labels, big-endian
//! dimensions) and the CIFAR-10 binary layout (3073-byte records: one
//! label byte followed by 3072 channel-major pixel bytes). A synthetic
//! Gaussian-blob generator provides a deterministic desk-scale stand-in.
//!
//! Batching normalizes bytes to per-channel zero mean and unit variance
//! using statistics computed from the training split, shuffles each epoch
//! from a named substream of the run seed, and optionally applies the
//! standard pad-4 random crop plus horizontal flip (bytes are padded with
//! zeros before the crop; augmentation is off by default so oracle runs
//! stay deterministic).

use std::marker::PhantomData;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::nn::FeatureShape;
use crate::rng::substream;
use crate::{Error, Real, Result, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD_BYTES: usize = 3073;
const CIFAR_PIXEL_BYTES: usize = 3072;
/// Noise scale of the synthetic blobs, in byte units.
const BLOB_NOISE: f64 = 32.0;

// ---------------------------------------------------------------------------
// Dataset handle
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// An in-memory dataset: byte images shaped `(N, C, H, W)` plus labels.
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    images: Vec<u8>,
    samples: usize,
    channels: usize,
    height: usize,
    width: usize,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl DatasetHandle {
    pub fn new(
        images: Vec<u8>,
        channels: usize,
        height: usize,
        width: usize,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        let pixel = channels * height * width;
        if pixel == 0 {
            return Err(Error::invalid("dataset", "image dimensions must be positive"));
        }
        if labels.is_empty() {
            return Err(Error::DataConsistency("dataset has no samples".into()));
        }
        if images.len() != labels.len() * pixel {
            return Err(Error::DataConsistency(format!(
                "{} labels but {} image bytes (expected {} per sample)",
                labels.len(),
                images.len(),
                pixel
            )));
        }
        if classes == 0 {
            return Err(Error::invalid("dataset", "class count must be positive"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::DataConsistency(format!(
                "label {} outside [0, {})",
                bad, classes
            )));
        }
        Ok(DatasetHandle {
            images,
            samples: labels.len(),
            channels,
            height,
            width,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.samples == 0
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn feature_shape(&self) -> FeatureShape {
        FeatureShape::Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }

    pub fn label(&self, sample: usize) -> usize {
        self.labels[sample]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Raw `(C, H, W)` bytes of one sample.
    pub fn image_bytes(&self, sample: usize) -> &[u8] {
        let pixel = self.channels * self.height * self.width;
        &self.images[sample * pixel..(sample + 1) * pixel]
    }

    /// A new handle holding the first `count` samples.
    pub fn take(&self, count: usize) -> Result<DatasetHandle> {
        if count == 0 || count > self.samples {
            return Err(Error::invalid(
                "dataset subset",
                format!("cannot take {} of {} samples", count, self.samples),
            ));
        }
        let pixel = self.channels * self.height * self.width;
        DatasetHandle::new(
            self.images[..count * pixel].to_vec(),
            self.channels,
            self.height,
            self.width,
            self.labels[..count].to_vec(),
            self.classes,
            self.split,
        )
    }
}

// ---------------------------------------------------------------------------
// IDX format
// ---------------------------------------------------------------------------

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn idx_error(path: &Path, detail: impl Into<String>) -> Error {
    Error::DataFormat {
        format: "idx",
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ])
}

/// Load an IDX image/label file pair (the MNIST container format).
/// Images are single-channel `(N, 1, rows, cols)`.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<DatasetHandle> {
    let img = read_file(images_path)?;
    if img.len() < 16 {
        return Err(idx_error(images_path, "truncated header (need 16 bytes)"));
    }
    let magic = be_u32(&img, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_error(
            images_path,
            format!("bad magic {:#010x}, expected {:#010x}", magic, IDX_IMAGES_MAGIC),
        ));
    }
    let count = be_u32(&img, 4) as usize;
    let rows = be_u32(&img, 8) as usize;
    let cols = be_u32(&img, 12) as usize;
    let expected = 16 + count * rows * cols;
    if img.len() != expected {
        return Err(idx_error(
            images_path,
            format!("{} bytes for {} {}x{} images, expected {}", img.len(), count, rows, cols, expected),
        ));
    }

    let lab = read_file(labels_path)?;
    if lab.len() < 8 {
        return Err(idx_error(labels_path, "truncated header (need 8 bytes)"));
    }
    let magic = be_u32(&lab, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(idx_error(
            labels_path,
            format!("bad magic {:#010x}, expected {:#010x}", magic, IDX_LABELS_MAGIC),
        ));
    }
    let label_count = be_u32(&lab, 4) as usize;
    if lab.len() != 8 + label_count {
        return Err(idx_error(
            labels_path,
            format!("{} bytes for {} labels, expected {}", lab.len(), label_count, 8 + label_count),
        ));
    }
    if label_count != count {
        return Err(Error::DataConsistency(format!(
            "{} images but {} labels",
            count, label_count
        )));
    }

    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    DatasetHandle::new(img[16..].to_vec(), 1, rows, cols, labels, classes, split)
}

/// Write a single-channel handle as an IDX image/label file pair.
pub fn write_idx(images_path: &Path, labels_path: &Path, handle: &DatasetHandle) -> Result<()> {
    if handle.channels != 1 {
        return Err(Error::invalid(
            "idx write",
            format!("idx images are single-channel, got {} channels", handle.channels),
        ));
    }
    let mut img = Vec::with_capacity(16 + handle.images.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(handle.samples as u32).to_be_bytes());
    img.extend_from_slice(&(handle.height as u32).to_be_bytes());
    img.extend_from_slice(&(handle.width as u32).to_be_bytes());
    img.extend_from_slice(&handle.images);
    write_file(images_path, &img)?;

    let mut lab = Vec::with_capacity(8 + handle.samples);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(handle.samples as u32).to_be_bytes());
    for &l in &handle.labels {
        if l > u8::MAX as usize {
            return Err(Error::invalid(
                "idx write",
                format!("label {} does not fit in one byte", l),
            ));
        }
        lab.push(l as u8);
    }
    write_file(labels_path, &lab)
}

// ---------------------------------------------------------------------------
// CIFAR binary format
// ---------------------------------------------------------------------------

fn cifar_error(path: &Path, detail: impl Into<String>) -> Error {
    Error::DataFormat {
        format: "cifar binary",
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Load a CIFAR-10 binary batch file: 3073-byte records of one label byte
/// plus 3072 channel-major pixel bytes, i.e. `(3, 32, 32)` images.
pub fn load_cifar_binary(path: &Path, split: Split) -> Result<DatasetHandle> {
    let bytes = read_file(path)?;
    if bytes.is_empty() {
        return Err(cifar_error(path, "empty file"));
    }
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(cifar_error(
            path,
            format!(
                "{} bytes is not a multiple of the {}-byte record",
                bytes.len(),
                CIFAR_RECORD_BYTES
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut images = Vec::with_capacity(n * CIFAR_PIXEL_BYTES);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        labels.push(rec[0] as usize);
        images.extend_from_slice(&rec[1..]);
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    DatasetHandle::new(images, 3, 32, 32, labels, classes, split)
}

/// Write a `(3, 32, 32)` handle as a CIFAR-10 binary batch file.
pub fn write_cifar_binary(path: &Path, handle: &DatasetHandle) -> Result<()> {
    if (handle.channels, handle.height, handle.width) != (3, 32, 32) {
        return Err(Error::invalid(
            "cifar write",
            format!(
                "records are fixed at 3x32x32, got {}x{}x{}",
                handle.channels, handle.height, handle.width
            ),
        ));
    }
    let mut bytes = Vec::with_capacity(handle.samples * CIFAR_RECORD_BYTES);
    for i in 0..handle.samples {
        if handle.labels[i] > u8::MAX as usize {
            return Err(Error::invalid(
                "cifar write",
                format!("label {} does not fit in one byte", handle.labels[i]),
            ));
        }
        bytes.push(handle.labels[i] as u8);
        bytes.extend_from_slice(handle.image_bytes(i));
    }
    write_file(path, &bytes)
}

// ---------------------------------------------------------------------------
// Synthetic blobs
// ---------------------------------------------------------------------------

/// Deterministic Gaussian class clusters in byte space. Each class gets a
/// mean at `128 + separation * (random unit direction)`; samples add
/// byte-scale Gaussian noise and clamp to `[0, 255]`. Labels cycle
/// through the classes, so every class receives exactly `per_class`
/// samples. `separation` is in byte units: small values make the classes
/// overlap heavily, values of 60+ are nearly linearly separable.
pub fn synth_blobs(
    classes: usize,
    per_class: usize,
    channels: usize,
    height: usize,
    width: usize,
    separation: f64,
    seed: u64,
    split: Split,
) -> Result<DatasetHandle> {
    if classes == 0 || per_class == 0 {
        return Err(Error::invalid(
            "blob dataset",
            "class count and samples per class must be positive",
        ));
    }
    let dim = channels * height * width;
    if dim == 0 {
        return Err(Error::invalid("blob dataset", "image dimensions must be positive"));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::invalid(
            "blob dataset",
            format!("separation must be non-negative, got {}", separation),
        ));
    }

    let mut means = Vec::with_capacity(classes);
    for class in 0..classes {
        let mut rng = substream(seed, "blobs.direction", &[class as u64]);
        let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in &mut dir {
            *v = 128.0 + separation * (*v / norm);
        }
        means.push(dir);
    }

    let n = classes * per_class;
    let mut rng = substream(seed, "blobs.noise", &[]);
    let mut images = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class);
        for d in 0..dim {
            let noise: f64 = rng.sample(StandardNormal);
            let v = (means[class][d] + BLOB_NOISE * noise).round().clamp(0.0, 255.0);
            images.push(v as u8);
        }
    }
    DatasetHandle::new(images, channels, height, width, labels, classes, split)
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-channel affine normalization `(byte - mean) / std`.
#[derive(Clone, Debug)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Statistics of a (training) split: per-channel mean and population
    /// standard deviation over every pixel.
    pub fn from_handle(handle: &DatasetHandle) -> Self {
        let c = handle.channels;
        let per_channel = handle.height * handle.width;
        let mut sum = vec![0.0f64; c];
        let mut sum_sq = vec![0.0f64; c];
        for i in 0..handle.samples {
            let img = handle.image_bytes(i);
            for ch in 0..c {
                for &b in &img[ch * per_channel..(ch + 1) * per_channel] {
                    let v = b as f64;
                    sum[ch] += v;
                    sum_sq[ch] += v * v;
                }
            }
        }
        let count = (handle.samples * per_channel) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std: Vec<f64> = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| ((sq / count - m * m).max(0.0)).sqrt().max(1e-6))
            .collect();
        Normalization { mean, std }
    }

    /// Pass bytes through unchanged.
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub shuffle: bool,
    /// Pad-4 random crop plus horizontal flip, drawn deterministically
    /// from the seed. Train-time only by construction: evaluation
    /// iterators simply leave it off.
    pub augment: bool,
    pub seed: u64,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions {
            batch_size: 128,
            shuffle: true,
            augment: false,
            seed: 0,
        }
    }
}

/// One training batch: normalized inputs shaped `(B, C, H, W)`.
pub struct Batch<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Deterministic epoch iterator over a dataset.
pub struct BatchIterator<'a, T> {
    handle: &'a DatasetHandle,
    norm: Normalization,
    opts: BatchOptions,
    order: Vec<usize>,
    cursor: usize,
    augment_rng: ChaCha8Rng,
    _real: PhantomData<T>,
}

impl<'a, T: Real> BatchIterator<'a, T> {
    pub fn new(handle: &'a DatasetHandle, norm: Normalization, opts: BatchOptions) -> Result<Self> {
        if opts.batch_size == 0 {
            return Err(Error::invalid("batch options", "batch size must be positive"));
        }
        if norm.mean.len() != handle.channels || norm.std.len() != handle.channels {
            return Err(Error::invalid(
                "batch options",
                format!(
                    "normalization covers {} channels, dataset has {}",
                    norm.mean.len(),
                    handle.channels
                ),
            ));
        }
        let mut it = BatchIterator {
            handle,
            norm,
            opts,
            order: Vec::new(),
            cursor: 0,
            augment_rng: substream(opts.seed, "batch.augment", &[0]),
            _real: PhantomData,
        };
        it.begin_epoch(0);
        Ok(it)
    }

    /// Reset to the start of `epoch`, reshuffling from its substream.
    pub fn begin_epoch(&mut self, epoch: u64) {
        self.order = (0..self.handle.samples).collect();
        if self.opts.shuffle {
            let mut rng = substream(self.opts.seed, "batch.shuffle", &[epoch]);
            self.order.shuffle(&mut rng);
        }
        self.augment_rng = substream(self.opts.seed, "batch.augment", &[epoch]);
        self.cursor = 0;
    }

    /// Number of batches one epoch yields.
    pub fn batches_per_epoch(&self) -> usize {
        self.handle.samples.div_ceil(self.opts.batch_size)
    }

    /// Next batch of this epoch, or `None` when the epoch is exhausted
    /// (the final batch may be smaller than the configured size).
    pub fn next_batch(&mut self) -> Option<Batch<T>> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.opts.batch_size).min(self.order.len());
        let indices = &self.order[self.cursor..end];
        self.cursor = end;

        let (c, h, w) = (self.handle.channels, self.handle.height, self.handle.width);
        let pixel = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * pixel);
        let mut labels = Vec::with_capacity(indices.len());
        let mut scratch = Vec::new();
        for &i in indices {
            labels.push(self.handle.labels[i]);
            let raw = self.handle.image_bytes(i);
            let bytes: &[u8] = if self.opts.augment {
                let flip = self.augment_rng.gen_bool(0.5);
                let dy = self.augment_rng.gen_range(0..=8usize);
                let dx = self.augment_rng.gen_range(0..=8usize);
                scratch = crop_flip(raw, c, h, w, flip, dy, dx);
                &scratch
            } else {
                raw
            };
            for ch in 0..c {
                let m = self.norm.mean[ch];
                let s = self.norm.std[ch];
                for &b in &bytes[ch * h * w..(ch + 1) * h * w] {
                    data.push(T::from_f64((b as f64 - m) / s));
                }
            }
        }
        let inputs = Tensor::new(vec![indices.len(), c, h, w], data)
            .expect("batch buffer matches its shape");
        Some(Batch { inputs, labels })
    }
}

/// Zero-pad the image by 4 on each side, crop an `(h, w)` window at
/// offset `(dy, dx)` (each in `0..=8`), and optionally mirror it
/// horizontally.
fn crop_flip(bytes: &[u8], c: usize, h: usize, w: usize, flip: bool, dy: usize, dx: usize) -> Vec<u8> {
    let mut out = vec![0u8; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            // Padded coordinate yp = y + dy maps to source row y + dy - 4.
            let sy = (y + dy).wrapping_sub(4);
            if sy >= h {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx).wrapping_sub(4);
                if sx >= w {
                    continue;
                }
                let tx = if flip { w - 1 - x } else { x };
                out[(ch * h + y) * w + tx] = bytes[(ch * h + sy) * w + sx];
            }
        }
    }
    out
}
