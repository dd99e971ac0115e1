//! MNIST IDX ingestion, synthetic blobs, and per-worker partitioning.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{invalid, Error, Result};

const IMAGES_MAGIC: u32 = 2051;
const LABELS_MAGIC: u32 = 2049;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Mnist,
    Synthetic,
}

/// Row-major images in `[0, 1]` with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub dim: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            images,
            labels,
            dim: self.dim,
            provenance: self.provenance,
        }
    }

    /// The first `n` examples (or all of them).
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.dim].to_vec(),
            labels: self.labels[..n].to_vec(),
            dim: self.dim,
            provenance: self.provenance,
        }
    }

    /// Copies the listed examples into the batch buffers.
    pub fn gather(&self, indices: &[usize], images: &mut Vec<f32>, labels: &mut Vec<u8>) {
        images.clear();
        labels.clear();
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
    }
}

fn ingest_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        offset,
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(BigEndian::read_u32)
        .ok_or_else(|| ingest_err(offset, "truncated header"))
}

/// Parses an IDX image file into `(rows * cols)`-wide rows scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<f32>, usize, usize)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(ingest_err(0, format!("image magic {magic}, expected {IMAGES_MAGIC}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let dim = rows * cols;
    let body = &bytes[16..];
    if body.len() != count * dim {
        return Err(ingest_err(
            16 + body.len().min(count * dim),
            format!("expected {} pixel bytes, found {}", count * dim, body.len()),
        ));
    }
    Ok((body.iter().map(|&b| b as f32 / 255.0).collect(), count, dim))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(ingest_err(0, format!("label magic {magic}, expected {LABELS_MAGIC}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(ingest_err(
            8 + body.len().min(count),
            format!("expected {count} labels, found {}", body.len()),
        ));
    }
    if let Some(pos) = body.iter().position(|&l| l > 9) {
        return Err(ingest_err(8 + pos, format!("label {} outside 0..=9", body[pos])));
    }
    Ok(body.to_vec())
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (images, count, dim) = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if labels.len() != count {
        return Err(ingest_err(4, format!("{count} images but {} labels", labels.len())));
    }
    Ok(Dataset {
        images,
        labels,
        dim,
        provenance: Provenance::Mnist,
    })
}

/// The standard training and test files of an MNIST directory.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
    let test = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

pub fn encode_idx_images(pixels: &[u8], count: usize, rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.write_u32::<BigEndian>(v).unwrap();
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.write_u32::<BigEndian>(LABELS_MAGIC).unwrap();
    out.write_u32::<BigEndian>(labels.len() as u32).unwrap();
    out.extend_from_slice(labels);
    out
}

/// Gaussian clusters, one per class, clamped to `[0, 1]`.
///
/// Class `c` has mean 0.8 on the coordinates `j` with `j % classes == c` and
/// 0.2 elsewhere, each jittered by up to 0.05; points add N(0, 0.1) noise.
pub fn synth_blobs(classes: usize, per_class: usize, dim: usize, seed: u64) -> Result<Dataset> {
    Ok(synth_split(classes, per_class, 0, dim, seed)?.0)
}

/// Training and holdout sets drawn from the same clusters.
pub fn synth_split(
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    dim: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if classes == 0 || classes > 256 || train_per_class == 0 || dim == 0 {
        return Err(invalid(
            "synthetic dataset needs classes in 1..=256, per_class >= 1, dim >= 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<f32> = (0..classes * dim)
        .map(|k| {
            let (c, j) = (k / dim, k % dim);
            let base = if j % classes == c { 0.8 } else { 0.2 };
            base + rng.random_range(-0.05..0.05)
        })
        .collect();
    let noise = Normal::new(0.0f32, 0.1).expect("valid normal");
    let draw = |per_class: usize, rng: &mut ChaCha8Rng| {
        let mut images = Vec::with_capacity(classes * per_class * dim);
        let mut labels = Vec::with_capacity(classes * per_class);
        for _ in 0..per_class {
            for c in 0..classes {
                let mean = &means[c * dim..(c + 1) * dim];
                images.extend(mean.iter().map(|m| (m + noise.sample(rng)).clamp(0.0, 1.0)));
                labels.push(c as u8);
            }
        }
        Dataset {
            images,
            labels,
            dim,
            provenance: Provenance::Synthetic,
        }
    };
    let train = draw(train_per_class, &mut rng);
    let test = draw(test_per_class, &mut rng);
    Ok((train, test))
}

/// Contiguous near-equal ranges: the first `total % parts` get one extra.
pub fn split_ranges(total: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let base = total / parts;
    let extra = total % parts;
    let mut start = 0;
    (0..parts)
        .map(|k| {
            let len = base + usize::from(k < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Worker `worker`'s share of a seeded shuffle of the dataset.
pub fn partition(dataset: &Dataset, workers: usize, worker: usize, seed: u64) -> Result<Dataset> {
    if workers == 0 || worker >= workers {
        return Err(invalid(format!("worker {worker} of {workers}")));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x5041_5254])));
    let range = split_ranges(dataset.len(), workers)[worker].clone();
    Ok(dataset.subset(&order[range]))
}

/// Visiting order of a shard's examples in a given epoch.
pub fn epoch_order(len: usize, seed: u64, worker: usize, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[
        seed,
        worker as u64,
        epoch as u64,
    ])));
    order
}
