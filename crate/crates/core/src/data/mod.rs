//! Datasets: a seeded Gaussian-mixture generator, the CIFAR-10 binary
//! format, and the gradient-batch / statistics-batch planner.

mod batching;
pub mod cifar;
mod synth;

pub use batching::{iterate, BatchPlan, GradientBatch};
pub use cifar::{load_cifar10, load_cifar10_subset};
pub use synth::synth_gaussian_mixture;

use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

/// Environment variable naming the directory that holds the CIFAR-10 batch files.
pub const DATA_DIR_ENV: &str = "KALNORM_DATA_DIR";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: truncated record ({len} bytes is not a multiple of {record})")]
    Truncated { path: PathBuf, len: usize, record: usize },
    #[error("{path}: record {index} has label {label}, expected < {classes}")]
    BadLabel {
        path: PathBuf,
        index: usize,
        label: u8,
        classes: usize,
    },
    #[error("invalid batch plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Images `[N, C, H, W]` with values in `[0, 1]` and their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let s = images.shape4()?;
        if s.batch == 0 || s.batch != labels.len() {
            return Err(DataError::InvalidSize(format!(
                "{} images for {} labels",
                s.batch,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DataError::InvalidSize(format!("label {bad} >= {class_count} classes")));
        }
        Ok(Self {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one sample.
    pub fn sample_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    fn sample_len(&self) -> usize {
        let (c, h, w) = self.sample_dims();
        c * h * w
    }

    /// Gathers the given samples into a batch tensor and label list.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let (c, h, w) = self.sample_dims();
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * len..(i + 1) * len]);
        }
        let images = Tensor::new(vec![indices.len(), c, h, w], data).expect("consistent batch shape");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        Dataset {
            images,
            labels,
            class_count: self.class_count,
        }
    }

    /// Splits off the first `n` samples; returns `(head, tail)`.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        let (hi, hl) = self.batch(&head);
        let (ti, tl) = self.batch(&tail);
        (
            Dataset {
                images: hi,
                labels: hl,
                class_count: self.class_count,
            },
            Dataset {
                images: ti,
                labels: tl,
                class_count: self.class_count,
            },
        )
    }
}
