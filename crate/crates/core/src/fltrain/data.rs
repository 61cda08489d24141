use std::fs;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Dense labelled samples, features stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub num_classes: usize,
    pub features: Vec<f64>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.sample(i));
        }
        Dataset {
            dim: self.dim,
            num_classes: self.num_classes,
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// `count` samples drawn without replacement, kept in file order.
    pub fn subsample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Dataset {
        if count >= self.len() {
            return self.clone();
        }
        let mut picked = rand::seq::index::sample(rng, self.len(), count).into_vec();
        picked.sort_unstable();
        self.select(&picked)
    }

    /// Two Gaussian classes with unit covariance and means at `±m`, where
    /// `m` has entries of magnitude `1/sqrt(dim)` and random signs.
    pub fn synthetic_gaussian<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Dataset {
        let scale = 1.5 / (dim as f64).sqrt();
        let mean: Vec<f64> = (0..dim)
            .map(|_| if rng.random_bool(0.5) { scale } else { -scale })
            .collect();
        let mut features = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 2) as u8;
            let sign = if label == 0 { -1.0 } else { 1.0 };
            for m in &mean {
                let z: f64 = StandardNormal.sample(rng);
                features.push(sign * m + z);
            }
            labels.push(label);
        }
        Dataset {
            dim,
            num_classes: 2,
            features,
            labels,
        }
    }
}

/// One vehicle's share of a dataset.
#[derive(Debug, Clone)]
pub struct LocalDataset {
    pub data: Arc<Dataset>,
    pub indices: Vec<usize>,
}

impl LocalDataset {
    pub fn full(data: Arc<Dataset>) -> Self {
        let indices = (0..data.len()).collect();
        LocalDataset { data, indices }
    }

    /// Sample count, the `n_k` weight used in aggregation.
    pub fn n(&self) -> usize {
        self.indices.len()
    }

    pub fn labels(&self) -> impl Iterator<Item = u8> + '_ {
        self.indices.iter().map(|&i| self.data.labels[i])
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path, field: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx {
            path: path.to_path_buf(),
            field,
            detail: "file truncated in header".into(),
        })
}

/// Reads an IDX image/label file pair. Gzip-compressed files are accepted
/// transparently. Pixels are scaled to `[0, 1]` by `1/255`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_maybe_gz(images_path)?;
    let lbl = read_maybe_gz(labels_path)?;

    let magic = be_u32(&img, 0, images_path, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Idx {
            path: images_path.to_path_buf(),
            field: "magic",
            detail: format!("expected {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let count = be_u32(&img, 4, images_path, "image count")? as usize;
    let rows = be_u32(&img, 8, images_path, "rows")? as usize;
    let cols = be_u32(&img, 12, images_path, "cols")? as usize;
    let dim = rows * cols;
    let pixels = &img[16..];
    if pixels.len() < count * dim {
        return Err(Error::Idx {
            path: images_path.to_path_buf(),
            field: "pixel data",
            detail: format!("need {} bytes, found {}", count * dim, pixels.len()),
        });
    }

    let lmagic = be_u32(&lbl, 0, labels_path, "magic")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Idx {
            path: labels_path.to_path_buf(),
            field: "magic",
            detail: format!("expected {IDX_LABELS_MAGIC:#010x}, found {lmagic:#010x}"),
        });
    }
    let lcount = be_u32(&lbl, 4, labels_path, "label count")? as usize;
    if lcount != count {
        return Err(Error::Idx {
            path: labels_path.to_path_buf(),
            field: "label count",
            detail: format!("{lcount} labels for {count} images"),
        });
    }
    let labels = lbl.get(8..8 + count).ok_or_else(|| Error::Idx {
        path: labels_path.to_path_buf(),
        field: "label data",
        detail: format!("need {count} bytes, found {}", lbl.len().saturating_sub(8)),
    })?;
    let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1).max(10);

    Ok(Dataset {
        dim,
        num_classes,
        features: pixels[..count * dim].iter().map(|&b| f64::from(b) / 255.0).collect(),
        labels: labels.to_vec(),
    })
}

/// Label-sorted shard partition. The dataset is stably sorted by label and cut
/// into `num_shards` equal shards (default `num_vehicles * shards_per_vehicle`);
/// each vehicle receives `shards_per_vehicle` distinct shards. Remainder
/// samples that do not fill a shard are left unassigned.
pub fn partition_non_iid<R: Rng + ?Sized>(
    data: &Arc<Dataset>,
    num_vehicles: usize,
    shards_per_vehicle: usize,
    num_shards: Option<usize>,
    rng: &mut R,
) -> Result<Vec<LocalDataset>> {
    if num_vehicles == 0 || shards_per_vehicle == 0 {
        return Err(Error::Partition(
            "num_vehicles and shards_per_vehicle must be positive".into(),
        ));
    }
    let num_shards = num_shards.unwrap_or(num_vehicles * shards_per_vehicle);
    if num_vehicles * shards_per_vehicle > num_shards {
        return Err(Error::Partition(format!(
            "{num_vehicles} vehicles x {shards_per_vehicle} shards exceeds {num_shards} shards"
        )));
    }
    let shard_size = data.len() / num_shards.max(1);
    if shard_size == 0 {
        return Err(Error::Partition(format!(
            "{} samples cannot fill {num_shards} shards",
            data.len()
        )));
    }

    let mut sorted: Vec<usize> = (0..data.len()).collect();
    sorted.sort_by_key(|&i| data.labels[i]);
    let mut shard_ids: Vec<usize> = (0..num_shards).collect();
    shard_ids.shuffle(rng);

    Ok((0..num_vehicles)
        .map(|k| {
            let mut indices = Vec::with_capacity(shards_per_vehicle * shard_size);
            for &s in &shard_ids[k * shards_per_vehicle..(k + 1) * shards_per_vehicle] {
                indices.extend_from_slice(&sorted[s * shard_size..(s + 1) * shard_size]);
            }
            LocalDataset {
                data: Arc::clone(data),
                indices,
            }
        })
        .collect())
}

/// Uniform random split into `num_vehicles` equal parts.
pub fn partition_iid<R: Rng + ?Sized>(
    data: &Arc<Dataset>,
    num_vehicles: usize,
    rng: &mut R,
) -> Result<Vec<LocalDataset>> {
    if num_vehicles == 0 || num_vehicles > data.len() {
        return Err(Error::Partition(format!(
            "cannot split {} samples across {num_vehicles} vehicles",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let size = data.len() / num_vehicles;
    Ok(order
        .chunks_exact(size)
        .take(num_vehicles)
        .map(|c| LocalDataset {
            data: Arc::clone(data),
            indices: c.to_vec(),
        })
        .collect())
}
