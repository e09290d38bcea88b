//! Datasets: MNIST IDX files, synthetic Gaussian blobs, batch iteration.
//!
//! Pixels are stored in single precision in `[0, 1]`; normalization is not
//! applied here but carried along as metadata for the input box.

mod idx;

pub use idx::{load_mnist_idx, parse_idx_images, parse_idx_labels};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ibp::InputBox;
use crate::io::Container;
use crate::tensor::{Real, SeededRng, Tensor};

/// Community-standard MNIST normalization constants.
pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;

/// Standard deviation of each synthetic blob around its center.
pub const BLOB_STD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0],
            std: vec![1.0],
        }
    }

    pub fn mnist() -> Self {
        Self {
            mean: vec![MNIST_MEAN],
            std: vec![MNIST_STD],
        }
    }
}

/// Labeled images with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N×C×H×W` or `N×D`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        classes: usize,
        split: impl Into<String>,
        normalization: Normalization,
    ) -> Result<Self> {
        if images.rank() < 2 || images.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::arg(format!("label {y} out of range for {classes} classes")));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::arg(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split: split.into(),
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example shape.
    pub fn example_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Examples `indices`, in order, as a new dataset.
    pub fn subset(&self, indices: &[usize], split: impl Into<String>) -> Result<Self> {
        Ok(Self {
            images: self.images.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: split.into(),
            normalization: self.normalization.clone(),
        })
    }

    /// First `n` examples (or all, if fewer).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.split.clone())
    }

    /// ℓ∞ box of radius `eps` in pixel space, clipped to `[0, 1]` and
    /// normalized with this dataset's constants.
    pub fn input_box(&self, eps: f64) -> InputBox {
        InputBox {
            eps,
            clip: [0.0, 1.0],
            mean: self.normalization.mean.clone(),
            std: self.normalization.std.clone(),
        }
    }

    /// Inputs and labels of `indices`, converted to `T`.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let x = self.images.select_rows(indices)?.cast();
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "classes": self.classes,
            "split": self.split,
            "normalization": self.normalization,
        });
        let mut c = Container::new("dataset", meta);
        c.push("images", &self.images);
        let labels: Vec<f64> = self.labels.iter().map(|&y| y as f64).collect();
        c.push("labels", &Tensor::new(vec![labels.len()], labels)?);
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        if c.kind != "dataset" {
            return Err(Error::Checkpoint(format!("expected a dataset container, found `{}`", c.kind)));
        }
        let classes = c.meta["classes"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("dataset metadata lacks `classes`".into()))? as usize;
        let split = c.meta["split"].as_str().unwrap_or("unknown").to_string();
        let normalization = serde_json::from_value(c.meta["normalization"].clone())
            .map_err(|e| Error::Checkpoint(format!("dataset normalization: {e}")))?;
        let labels = c.get::<f64>("labels")?.data().iter().map(|&v| v as usize).collect();
        Self::new(c.get("images")?, labels, classes, split, normalization)
    }
}

/// `K` Gaussian clusters (std [`BLOB_STD`]) in `[0, 1]^dim`, clipped.
///
/// Centers do not depend on `rng`: class `k` sits at `0.5 + (s/2)·u_k`
/// where `u_k` is `±e_{k/2}` for the first `2·dim` classes and a fixed
/// pseudo-random unit vector afterwards. Adjacent axis-aligned centers are
/// therefore `s/√2` apart and opposite ones `s` apart.
pub fn synth_blobs(rng: &mut SeededRng, n_per_class: usize, classes: usize, dim: usize, separation: f64) -> Result<Dataset> {
    if !(separation > 0.0) {
        return Err(Error::arg("separation must be positive"));
    }
    if classes < 2 || dim == 0 {
        return Err(Error::arg("need at least two classes and one dimension"));
    }
    let mut center_rng = SeededRng::new(0x000b_10b5_eed5);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|k| {
            let mut u = vec![0.0; dim];
            if k < 2 * dim {
                u[k / 2] = if k % 2 == 0 { 1.0 } else { -1.0 };
            } else {
                let v: Vec<f64> = (0..dim).map(|_| center_rng.normal()).collect();
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                u = v.into_iter().map(|a| a / norm).collect();
            }
            u.into_iter().map(|a| 0.5 + 0.5 * separation * a).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(n_per_class * classes * dim);
    let mut labels = Vec::with_capacity(n_per_class * classes);
    for _ in 0..n_per_class {
        for (k, c) in centers.iter().enumerate() {
            for &ci in c {
                data.push((ci + BLOB_STD * rng.normal()).clamp(0.0, 1.0) as f32);
            }
            labels.push(k);
        }
    }
    Dataset::new(
        Tensor::new(vec![labels.len(), dim], data)?,
        labels,
        classes,
        "synthetic",
        Normalization::identity(),
    )
}

/// Visiting order for one epoch: identity, or a permutation determined by
/// `(seed, epoch)`.
pub fn epoch_order(n: usize, shuffle: bool, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        SeededRng::new(seed).fork(0x5eed_0000 + epoch).shuffle(&mut order);
    }
    order
}

/// Splits `order` into consecutive batches; the final short batch is kept.
pub fn batch_iter(order: &[usize], batch_size: usize) -> Result<std::slice::Chunks<'_, usize>> {
    if batch_size == 0 {
        return Err(Error::arg("batch size must be at least 1"));
    }
    Ok(order.chunks(batch_size))
}
