//! Benchmark dataset loading, ZCA whitening and class-balanced sampling.

mod blobs;
mod cifar;
mod idx;
mod svhn;
mod zca;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use haba_autograd::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};
use crate::rng;

pub use blobs::{generate_blobs, BlobSpec};
pub use zca::{apply_zca, fit_zca, ZcaStats, DEFAULT_ZCA_EPSILON};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(usage(format!("unknown split {other:?} (expected train or test)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetId {
    Mnist,
    FashionMnist,
    Cifar10,
    Cifar100,
    Svhn,
    /// Procedural 10-class 8x8 grayscale blobs; needs no files.
    Blobs,
}

impl DatasetId {
    pub const ALL: [DatasetId; 6] = [
        DatasetId::Mnist,
        DatasetId::FashionMnist,
        DatasetId::Cifar10,
        DatasetId::Cifar100,
        DatasetId::Svhn,
        DatasetId::Blobs,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::FashionMnist => "fashion-mnist",
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Cifar100 => "cifar100",
            DatasetId::Svhn => "svhn",
            DatasetId::Blobs => "blobs",
        }
    }

    pub fn class_count(&self) -> usize {
        match self {
            DatasetId::Cifar100 => 100,
            _ => 10,
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        DatasetId::ALL.into_iter().find(|d| d.as_str() == s).ok_or_else(|| {
            let known: Vec<_> = DatasetId::ALL.iter().map(|d| d.as_str()).collect();
            usage(format!("unknown dataset {s:?}; known: {}", known.join(", ")))
        })
    }
}

/// Labelled images, stored `[count, height, width, channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub name: String,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: Split,
}

impl ImageDataset {
    /// Validates shape, label range and finiteness.
    pub fn new(name: impl Into<String>, images: Tensor, labels: Vec<usize>, class_count: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(usage(format!("images must be [n, h, w, c], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(usage(format!("{} images but {} labels", images.shape()[0], labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(usage(format!("label {bad} outside [0, {class_count})")));
        }
        if !images.is_finite() {
            return Err(usage("images contain non-finite values"));
        }
        let ds = Self { name: name.into(), images, labels, class_count, split };
        if split == Split::Train {
            if let Some(missing) = (0..class_count).find(|&c| !ds.labels.contains(&c)) {
                return Err(usage(format!("class {missing} absent from the train split")));
            }
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[h, w, c]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image_elements(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == class).map(|(i, _)| i).collect()
    }

    /// `[indices.len(), h, w, c]` copy of the selected images.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let d = self.image_elements();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * d..(i + 1) * d]);
        }
        let [h, w, c] = self.image_shape();
        Tensor::new([indices.len(), h, w, c], data)
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(self.name.clone(), self.gather(indices), self.labels_of(indices), self.class_count, self.split)
    }

    /// Same labels with replaced pixels (e.g. after whitening).
    pub fn with_images(&self, images: Tensor) -> Result<Self> {
        Self::new(self.name.clone(), images, self.labels.clone(), self.class_count, self.split)
    }
}

/// Loads a dataset split from its published binary files under `root`.
///
/// Layouts: MNIST and Fashion-MNIST as IDX files (`train-images-idx3-ubyte` etc., optionally
/// gzipped), CIFAR-10 as `data_batch_{1..5}.bin` / `test_batch.bin`, CIFAR-100 as
/// `train.bin` / `test.bin` (fine labels), SVHN as `train_32x32.mat` / `test_32x32.mat`.
/// `blobs` is generated and ignores `root`.
pub fn load_dataset(name: &str, root: &Path, split: Split) -> Result<ImageDataset> {
    let id: DatasetId = name.parse()?;
    let (images, labels) = match id {
        DatasetId::Mnist | DatasetId::FashionMnist => idx::load_mnist_family(root, split)?,
        DatasetId::Cifar10 => cifar::load_cifar10(root, split)?,
        DatasetId::Cifar100 => cifar::load_cifar100(root, split)?,
        DatasetId::Svhn => svhn::load_svhn(root, split)?,
        DatasetId::Blobs => return generate_blobs(&BlobSpec::default(), split),
    };
    ImageDataset::new(id.as_str(), images, labels, id.class_count(), split)
}

/// `per_class` distinct indices from every class, class-major, deterministic in `seed`.
pub fn sample_class_balanced(data: &ImageDataset, per_class: usize, seed: u64) -> Result<Vec<usize>> {
    if per_class == 0 {
        return Err(usage("per_class must be at least 1"));
    }
    let mut out = Vec::with_capacity(per_class * data.class_count);
    for class in 0..data.class_count {
        let mut pool = data.indices_of_class(class);
        if pool.len() < per_class {
            return Err(usage(format!(
                "class {class} has {} samples, fewer than the {per_class} requested",
                pool.len()
            )));
        }
        let mut r = rng::stream(seed, "class-balanced", class as u64);
        pool.shuffle(&mut r);
        out.extend_from_slice(&pool[..per_class]);
    }
    Ok(out)
}

/// Bytes scaled to `[0, 1]`.
pub(crate) fn bytes_to_unit(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| b as f64 / 255.0).collect()
}
