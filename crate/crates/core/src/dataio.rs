//! MNIST ingestion from big-endian IDX files, deterministic mini-batching,
//! and the pixel-permuted control set.

use std::path::Path;

use crate::error::{Error, Result};
use crate::netcore::Tensor;
use crate::stochastics::RngStream;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_SIDE: usize = 28;
pub const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

/// Images scaled to `[0, 1]`, one row per sample, with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    images: Tensor,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor, labels: Vec<u8>) -> Result<Self> {
        if images.shape().len() != 2 || images.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
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

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn features(&self) -> usize {
        self.images.cols()
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn head(&self, n: usize) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let d = self.features();
        Dataset {
            name: format!("{}[..{n}]", self.name),
            images: Tensor::from_vec(&[n, d], self.images.data()[..n * d].to_vec())
                .expect("prefix of a valid tensor"),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Gathers the given sample indices into a `(images, labels)` pair.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<u8>) {
        let d = self.features();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
            labels.push(self.labels[i]);
        }
        let images = Tensor::from_vec(&[indices.len(), d], data).expect("gathered rows");
        (images, labels)
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, field, "file truncated inside header"))
}

/// Loads an IDX image file (magic 2051, 28x28) and label file (magic 2049).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lab = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let name = images_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_idx(&img, images_path, &lab, labels_path, name)
}

pub(crate) fn parse_idx(
    img: &[u8],
    images_path: &Path,
    lab: &[u8],
    labels_path: &Path,
    name: String,
) -> Result<Dataset> {
    let magic = read_u32(img, 0, images_path, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(
            images_path,
            "magic",
            format!("expected {IMAGES_MAGIC} for an image file, found {magic}"),
        ));
    }
    let count = read_u32(img, 4, images_path, "image count")? as usize;
    let rows = read_u32(img, 8, images_path, "row count")? as usize;
    let cols = read_u32(img, 12, images_path, "column count")? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(Error::format(
            images_path,
            "dimensions",
            format!("expected {IMAGE_SIDE}x{IMAGE_SIDE}, found {rows}x{cols}"),
        ));
    }
    let pixels = &img[16..];
    if pixels.len() != count * PIXELS {
        return Err(Error::format(
            images_path,
            "pixel data",
            format!(
                "{} bytes for {count} images ({} expected)",
                pixels.len(),
                count * PIXELS
            ),
        ));
    }

    let magic = read_u32(lab, 0, labels_path, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(
            labels_path,
            "magic",
            format!("expected {LABELS_MAGIC} for a label file, found {magic}"),
        ));
    }
    let label_count = read_u32(lab, 4, labels_path, "label count")? as usize;
    if label_count != count {
        return Err(Error::format(
            labels_path,
            "label count",
            format!("{label_count} labels for {count} images"),
        ));
    }
    let labels = &lab[8..];
    if labels.len() != count {
        return Err(Error::format(
            labels_path,
            "label data",
            format!("{} bytes for {count} labels", labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::format(
            labels_path,
            "label data",
            format!("label {bad} outside [0, 9]"),
        ));
    }
    if count == 0 {
        return Err(Error::format(images_path, "image count", "no samples"));
    }

    let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Dataset::new(
        name,
        Tensor::from_vec(&[count, PIXELS], data)?,
        labels.to_vec(),
    )
}

/// How pixels are scrambled for the signal-free control set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Permutation {
    /// An independent permutation for every sample.
    #[default]
    PerSample,
    /// One permutation shared by all samples.
    Shared,
}

/// A copy of `dataset` whose pixels are shuffled within each sample; labels
/// are kept.
pub fn permute_pixels(dataset: &Dataset, stream: &mut RngStream, policy: Permutation) -> Dataset {
    let d = dataset.features();
    let mut data = dataset.images.data().to_vec();
    let mut order: Vec<usize> = (0..d).collect();
    if policy == Permutation::Shared {
        stream.shuffle(&mut order);
    }
    let mut scratch = vec![0.0; d];
    for row in data.chunks_exact_mut(d) {
        if policy == Permutation::PerSample {
            stream.shuffle(&mut order);
        }
        for (dst, &src) in scratch.iter_mut().zip(&order) {
            *dst = row[src];
        }
        row.copy_from_slice(&scratch);
    }
    Dataset {
        name: format!("{} (pixels permuted)", dataset.name),
        images: Tensor::from_vec(dataset.images.shape(), data).expect("same shape"),
        labels: dataset.labels.clone(),
    }
}

/// Mini-batches over a dataset, built lazily from an index order.
pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Batches<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<u8>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.dataset.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

/// Splits `dataset` into batches of `batch_size` (the last may be short).
/// With a stream the sample order is freshly shuffled, otherwise it is the
/// stored order.
pub fn batches<'a>(
    dataset: &'a Dataset,
    batch_size: usize,
    stream: Option<&mut RngStream>,
) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(s) = stream {
        s.shuffle(&mut order);
    }
    Ok(Batches {
        dataset,
        order,
        batch_size,
        pos: 0,
    })
}
