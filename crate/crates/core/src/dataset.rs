//! Labeled image datasets: IDX (MNIST layout) and NTSR1 tensor directories.

use std::path::Path;

use thiserror::Error;

use crate::io::{
    read_idx_images, read_idx_labels, read_ntsr1, write_ntsr1, IoFormatError,
};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] IoFormatError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Invalid(String),
}

/// Images in `[N,C,H,W]` layout with values in `[0,1]`, plus integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor<f64>, labels: Vec<usize>) -> Result<Self, DatasetError> {
        if images.shape().len() != 4 {
            return Err(DatasetError::Invalid(format!(
                "images must be [N,C,H,W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(DatasetError::Invalid(format!(
                "{} images vs {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-image shape `[C,H,W]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn image(&self, i: usize) -> Tensor<f64> {
        let shape = self.image_shape().to_vec();
        let stride: usize = shape.iter().product();
        Tensor::new(shape, self.images.data()[i * stride..(i + 1) * stride].to_vec())
            .expect("image slice length")
    }

    /// Rows `[start, end)` as a `[B,C,H,W]` batch.
    pub fn batch(&self, start: usize, end: usize) -> (Tensor<f64>, &[usize]) {
        let shape = self.image_shape();
        let stride: usize = shape.iter().product();
        let mut batch_shape = vec![end - start];
        batch_shape.extend_from_slice(shape);
        let images = Tensor::new(
            batch_shape,
            self.images.data()[start * stride..end * stride].to_vec(),
        )
        .expect("batch slice length");
        (images, &self.labels[start..end])
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let shape = self.image_shape().to_vec();
        let stride: usize = shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let mut full = vec![indices.len()];
        full.extend_from_slice(&shape);
        Dataset {
            images: Tensor::new(full, data).expect("subset dims"),
            labels,
        }
    }

    pub fn class_count(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }
}

/// Loads the `train-*` or `test-*` IDX pair from a directory. Accepts the
/// classic `t10k-` prefix as an alias for `test-`.
pub fn load_idx_dir(dir: &Path, split: &str) -> Result<Dataset, DatasetError> {
    let prefixes: &[&str] = match split {
        "train" => &["train"],
        "test" => &["test", "t10k"],
        other => {
            return Err(DatasetError::Invalid(format!(
                "unknown split '{other}' (want train|test)"
            )))
        }
    };
    let found = prefixes
        .iter()
        .map(|p| dir.join(format!("{p}-images-idx3-ubyte")))
        .find(|p| p.exists());
    let Some(images_path) = found else {
        return Err(DatasetError::Invalid(format!(
            "no {split} images found under {}",
            dir.display()
        )));
    };
    let labels_path = images_path
        .to_string_lossy()
        .replace("images-idx3", "labels-idx1");
    let images: Tensor<f64> = read_idx_images(&images_path)?;
    let labels = read_idx_labels(Path::new(&labels_path))?;
    Dataset::new(images, labels.into_iter().map(|l| l as usize).collect())
}

/// Loads a dataset stored as NTSR1 blobs: `images.ntsr` (`[N,C,H,W]`) and
/// `labels.ntsr` (`[N]`, integral values).
pub fn load_ntsr_dir(dir: &Path) -> Result<Dataset, DatasetError> {
    let images: Tensor<f64> = read_ntsr1(&dir.join("images.ntsr"))?;
    let labels_t: Tensor<f64> = read_ntsr1(&dir.join("labels.ntsr"))?;
    if labels_t.shape().len() != 1 {
        return Err(DatasetError::Invalid("labels.ntsr must be rank 1".into()));
    }
    let mut labels = Vec::with_capacity(labels_t.numel());
    for &v in labels_t.data() {
        if v < 0.0 || v.fract() != 0.0 {
            return Err(DatasetError::Invalid(format!(
                "label {v} is not a nonnegative integer"
            )));
        }
        labels.push(v as usize);
    }
    Dataset::new(images, labels)
}

/// Writes a dataset as an NTSR1 tensor directory.
pub fn save_ntsr_dir(dataset: &Dataset, dir: &Path) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir).map_err(|e| IoFormatError::io(dir, e))?;
    write_ntsr1(&dir.join("images.ntsr"), &dataset.images)?;
    let labels = Tensor::<f64>::new(
        vec![dataset.labels.len()],
        dataset.labels.iter().map(|&l| l as f64).collect(),
    )?;
    write_ntsr1(&dir.join("labels.ntsr"), &labels)?;
    Ok(())
}

/// Casts images to another scalar type (used by f32 pipelines).
pub fn cast_images<T: Scalar>(dataset: &Dataset) -> Tensor<T> {
    dataset.images.cast()
}
