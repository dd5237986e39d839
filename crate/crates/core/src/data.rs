//! Dataset ingestion and client partitioning.
//!
//! Supports the IDX binary image format, two deterministic synthetic
//! generators (2-D blobs for boundary visualizations, byte-quantized
//! high-dimensional "digits" for desk-scale image experiments), and three
//! partitioning schemes: IID, Dirichlet-proportional, and label sharding.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803; // 2051
const IDX_LABELS_MAGIC: u32 = 0x0000_0801; // 2049

/// A labeled dataset: `[n, d]` features in `[0, 1]` plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if !features.is_matrix() || features.rows() != labels.len() || labels.is_empty() {
            return Err(Error::ShapeMismatch {
                context: "Dataset::new".into(),
                expected: format!("[n, d] features with n == {} labels", labels.len()),
                actual: format!("{:?}", features.shape()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Materializes the rows named by `indices` as a batch tensor + labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        (
            Tensor::new(vec![indices.len(), d], data).unwrap(),
            labels,
        )
    }

    /// A new dataset holding copies of the selected rows; `num_classes` is
    /// inherited so subsets of a 10-class set stay 10-class.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (features, labels) = self.batch(indices);
        Dataset {
            features,
            labels,
            num_classes: self.num_classes,
        }
    }

    /// Splits into `[0, k)` and `[k, n)` row ranges.
    pub fn split_at(&self, k: usize) -> (Dataset, Dataset) {
        let head: Vec<usize> = (0..k).collect();
        let tail: Vec<usize> = (k..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// Label counts over the given indices (length `num_classes`).
    pub fn label_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut hist = vec![0usize; self.num_classes];
        for &i in indices {
            hist[self.labels[i]] += 1;
        }
        hist
    }
}

/// One client's view: indices into the parent [`Dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

impl ClientShard {
    pub fn n_k(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// How to split a dataset across clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PartitionKind {
    Iid,
    Dirichlet { alpha: f64 },
    Shards { q: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    pub clients: usize,
    pub seed: u64,
}

pub fn partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    if spec.clients == 0 {
        return Err(Error::InvalidConfig("client count must be >= 1".into()));
    }
    match spec.kind {
        PartitionKind::Iid => partition_iid(dataset, spec.clients, spec.seed),
        PartitionKind::Dirichlet { alpha } => {
            partition_dirichlet(dataset, spec.clients, alpha, spec.seed)
        }
        PartitionKind::Shards { q } => partition_shards(dataset, spec.clients, q, spec.seed),
    }
}

/// Uniform split: shuffle once, deal contiguous chunks whose sizes differ by
/// at most one.
pub fn partition_iid(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<ClientShard>> {
    let n = dataset.len();
    if k > n {
        return Err(Error::InvalidConfig(format!(
            "cannot split {n} samples across {k} clients"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut stream(seed, "partition-iid", &[]));

    let base = n / k;
    let extra = n % k;
    let mut shards = Vec::with_capacity(k);
    let mut cursor = 0;
    for client_id in 0..k {
        let size = base + usize::from(client_id < extra);
        shards.push(ClientShard {
            client_id,
            indices: indices[cursor..cursor + size].to_vec(),
        });
        cursor += size;
    }
    Ok(shards)
}

/// For each class, draws client proportions from a symmetric Dirichlet and
/// allocates that class's samples with largest-remainder rounding, so every
/// sample lands somewhere. Clients may end up empty.
pub fn partition_dirichlet(
    dataset: &Dataset,
    k: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if alpha <= 0.0 {
        return Err(Error::InvalidConfig("dirichlet alpha must be > 0".into()));
    }
    let mut shards: Vec<ClientShard> = (0..k)
        .map(|client_id| ClientShard {
            client_id,
            indices: Vec::new(),
        })
        .collect();

    for class in 0..dataset.num_classes {
        let mut class_idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] == class)
            .collect();
        if class_idx.is_empty() {
            continue;
        }
        let mut rng = stream(seed, "partition-dirichlet", &[class as u64]);
        class_idx.shuffle(&mut rng);

        // Dirichlet via normalized Gamma draws.
        let gamma = Gamma::new(alpha, 1.0)
            .map_err(|e| Error::InvalidConfig(format!("gamma({alpha}): {e}")))?;
        let mut props: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = props.iter().sum();
        if total <= 0.0 {
            // All draws underflowed to zero (tiny alpha); fall back to uniform.
            props = vec![1.0 / k as f64; k];
        } else {
            for p in &mut props {
                *p /= total;
            }
        }

        let counts = largest_remainder(&props, class_idx.len());
        let mut cursor = 0;
        for (client, &c) in counts.iter().enumerate() {
            shards[client]
                .indices
                .extend_from_slice(&class_idx[cursor..cursor + c]);
            cursor += c;
        }
    }
    Ok(shards)
}

/// Rounds `props * total` to integers summing exactly to `total`; leftover
/// units go to the largest fractional parts (ties to the lowest index).
fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Label sharding: the label-sorted dataset is cut into equal single-label
/// shards and every client receives exactly `q` of them, giving each client
/// at most `q` distinct labels.
///
/// The nominal shard size is `n / (k*q)`; when label imbalance makes that
/// many single-label shards impossible the size shrinks until `k*q` shards
/// exist. Samples that do not fit into the selected shards are dropped
/// (run reports account for them as `n - sum(n_k)`).
pub fn partition_shards(dataset: &Dataset, k: usize, q: usize, seed: u64) -> Result<Vec<ClientShard>> {
    let n = dataset.len();
    let total_shards = k
        .checked_mul(q)
        .filter(|&t| t > 0 && t <= n)
        .ok_or_else(|| {
            Error::InvalidConfig(format!(
                "cannot build {k}*{q} shards from {n} samples"
            ))
        })?;
    if q > dataset.num_classes {
        return Err(Error::InvalidConfig(format!(
            "q = {q} exceeds the number of classes {}",
            dataset.num_classes
        )));
    }

    // Stable label sort keeps the original order within a class.
    let mut sorted: Vec<usize> = (0..n).collect();
    sorted.sort_by_key(|&i| dataset.labels[i]);

    let class_runs: Vec<&[usize]> = {
        let mut runs = Vec::new();
        let mut start = 0;
        for i in 1..=n {
            if i == n || dataset.labels[sorted[i]] != dataset.labels[sorted[start]] {
                runs.push(&sorted[start..i]);
                start = i;
            }
        }
        runs
    };

    let mut shard_size = n / total_shards;
    let constructible = |s: usize| -> usize {
        class_runs.iter().map(|run| run.len() / s).sum()
    };
    while shard_size > 1 && constructible(shard_size) < total_shards {
        shard_size -= 1;
    }
    if constructible(shard_size) < total_shards {
        return Err(Error::InvalidConfig(format!(
            "cannot build {k}*{q} single-label shards from {n} samples"
        )));
    }

    let mut pieces: Vec<&[usize]> = Vec::new();
    for run in &class_runs {
        for chunk in run.chunks_exact(shard_size) {
            pieces.push(chunk);
        }
    }
    pieces.shuffle(&mut stream(seed, "partition-shards", &[]));

    let mut shards = Vec::with_capacity(k);
    for client_id in 0..k {
        let mut indices = Vec::with_capacity(q * shard_size);
        for piece in &pieces[client_id * q..(client_id + 1) * q] {
            indices.extend_from_slice(piece);
        }
        shards.push(ClientShard { client_id, indices });
    }
    Ok(shards)
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.into(),
            what: "header".into(),
        })
}

/// Loads an IDX image/label file pair (the MNIST distribution format).
/// Pixels are scaled to `[0, 1]`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_name = images_path.display().to_string();
    let lbl_name = labels_path.display().to_string();

    let img_bytes = fs::read(images_path)?;
    let magic = read_u32_be(&img_bytes, 0, &img_name)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: img_name,
            expected: IDX_IMAGES_MAGIC,
            actual: magic,
        });
    }
    let count = read_u32_be(&img_bytes, 4, &img_name)? as usize;
    let rows = read_u32_be(&img_bytes, 8, &img_name)? as usize;
    let cols = read_u32_be(&img_bytes, 12, &img_name)? as usize;
    let d = rows * cols;
    let pixels = &img_bytes[16..];
    if pixels.len() < count * d {
        return Err(Error::Truncated {
            path: img_name,
            what: format!("image data ({} of {} bytes)", pixels.len(), count * d),
        });
    }

    let lbl_bytes = fs::read(labels_path)?;
    let magic = read_u32_be(&lbl_bytes, 0, &lbl_name)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: lbl_name,
            expected: IDX_LABELS_MAGIC,
            actual: magic,
        });
    }
    let lbl_count = read_u32_be(&lbl_bytes, 4, &lbl_name)? as usize;
    let raw_labels = &lbl_bytes[8..];
    if raw_labels.len() < lbl_count {
        return Err(Error::Truncated {
            path: lbl_name,
            what: format!("label data ({} of {lbl_count} bytes)", raw_labels.len()),
        });
    }
    if lbl_count != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: lbl_count,
        });
    }
    if count == 0 {
        return Err(Error::Truncated {
            path: lbl_name,
            what: "dataset (zero samples)".into(),
        });
    }

    let data: Vec<f64> = pixels[..count * d]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels: Vec<usize> = raw_labels[..count].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().unwrap() + 1;
    Dataset::new(Tensor::new(vec![count, d], data)?, labels, num_classes)
}

/// Writes a dataset as an IDX image/label file pair. Features are quantized
/// to bytes, so a write/load round trip is exact for byte-quantized data.
pub fn write_mnist_idx(
    dataset: &Dataset,
    rows: usize,
    cols: usize,
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    if rows * cols != dataset.dim() {
        return Err(Error::ShapeMismatch {
            context: "write_mnist_idx".into(),
            expected: format!("{}x{} = {}", rows, cols, rows * cols),
            actual: format!("{} features", dataset.dim()),
        });
    }
    let n = dataset.len();
    let mut img = Vec::with_capacity(16 + n * dataset.dim());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    img.extend(
        dataset
            .features
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    fs::write(images_path, img)?;

    let mut lbl = Vec::with_capacity(8 + n);
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(n as u32).to_be_bytes());
    lbl.extend(dataset.labels.iter().map(|&y| y as u8));
    fs::write(labels_path, lbl)?;
    Ok(())
}

/// Writes a 2-D dataset as `x0,x1,label` CSV for external plotting.
pub fn write_points_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    if dataset.dim() != 2 {
        return Err(Error::InvalidConfig(
            "points CSV export requires 2-D features".into(),
        ));
    }
    let mut out = String::from("x0,x1,label\n");
    for i in 0..dataset.len() {
        let row = dataset.features.row(i);
        out.push_str(&format!("{},{},{}\n", row[0], row[1], dataset.labels[i]));
    }
    fs::write(path, out)?;
    Ok(())
}

/// `c` Gaussian clusters centered on a circle inside the unit square, with
/// balanced class counts (within one).
pub fn make_synthetic_blobs(n: usize, c: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if c == 0 || n < c {
        return Err(Error::InvalidConfig(format!(
            "need n >= c >= 1, got n = {n}, c = {c}"
        )));
    }
    let mut rng = stream(seed, "blobs", &[]);
    let noise = Normal::new(0.0, spread.max(0.0))
        .map_err(|e| Error::InvalidConfig(format!("spread: {e}")))?;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % c;
        let angle = 2.0 * std::f64::consts::PI * class as f64 / c as f64;
        let cx = 0.5 + 0.3 * angle.cos();
        let cy = 0.5 + 0.3 * angle.sin();
        data.push((cx + noise.sample(&mut rng)).clamp(0.0, 1.0));
        data.push((cy + noise.sample(&mut rng)).clamp(0.0, 1.0));
        labels.push(class);
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels, c)
}

// Synthetic digit generator tuning. Classes are sparse "ink" templates over
// a 28x28 canvas; samples drop strokes, vary in brightness, and sit on
// background speckle. Bright samples keep their ink above the background by
// more than twice the customary 0.3 perturbation bound, so robust stroke
// detectors exist; dim samples (brightness near the low end) fall inside the
// ambiguous band and are the ones adversarial training trades away.
const DIGITS_SIDE: usize = 28;
const DIGITS_DIM: usize = DIGITS_SIDE * DIGITS_SIDE;
const DIGITS_CLASSES: usize = 10;
const DIGITS_INK_PIXELS: usize = 130;
const DIGITS_INK_MIN: f64 = 0.9;
const DIGITS_INK_KEEP: f64 = 0.8;
const DIGITS_BRIGHTNESS_MIN: f64 = 0.75;
const DIGITS_BG_MAX: f64 = 0.15;

/// A deterministic 784-dimensional, 10-class image dataset in the MNIST
/// layout. Round-trips exactly through [`write_mnist_idx`] /
/// [`load_mnist_idx`] because pixels are byte-quantized.
pub fn make_synthetic_digits(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidConfig("need n >= 1".into()));
    }

    // Templates depend on the seed only, not on n, so train/test splits of
    // different sizes share the same class structure.
    let mut templates = vec![vec![0.0f64; DIGITS_DIM]; DIGITS_CLASSES];
    for (class, template) in templates.iter_mut().enumerate() {
        let mut trng = stream(seed, "digit-template", &[class as u64]);
        let mut placed = 0;
        while placed < DIGITS_INK_PIXELS {
            let p = trng.random_range(0..DIGITS_DIM);
            if template[p] == 0.0 {
                template[p] = trng.random_range(DIGITS_INK_MIN..1.0);
                placed += 1;
            }
        }
    }

    let mut rng = stream(seed, "digit-samples", &[]);
    let mut data = Vec::with_capacity(n * DIGITS_DIM);
    let mut labels = Vec::with_capacity(n);
    let mut pixel = vec![0.0f64; DIGITS_DIM];
    for i in 0..n {
        let class = i % DIGITS_CLASSES;
        for (px, _) in pixel.iter_mut().zip(0..DIGITS_DIM) {
            *px = rng.random_range(0.0..DIGITS_BG_MAX);
        }
        let brightness = rng.random_range(DIGITS_BRIGHTNESS_MIN..1.0);
        for (p, &ink) in templates[class].iter().enumerate() {
            if ink > 0.0 && rng.random_range(0.0..1.0) < DIGITS_INK_KEEP {
                pixel[p] = (ink * brightness).clamp(0.0, 1.0);
            }
        }
        // Byte quantization keeps the IDX round trip exact.
        data.extend(pixel.iter().map(|&v| (v * 255.0).round() / 255.0));
        labels.push(class);
    }
    Dataset::new(
        Tensor::new(vec![n, DIGITS_DIM], data)?,
        labels,
        DIGITS_CLASSES,
    )
}
