//! Datasets: synthetic Gaussian clusters, a noisy linear regression task, and
//! IDX (MNIST-format) ingestion.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::info::{DiscreteJoint, FeatureKey};
use crate::rng::{derive_seed, SplitMix64};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyDataset)?;
        let (dx, dy) = (first.x.len(), first.y.len());
        if samples.iter().any(|s| s.x.len() != dx || s.y.len() != dy) {
            return Err(Error::Shape("samples differ in dimension".into()));
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples[0].x.len()
    }

    pub fn target_dim(&self) -> usize {
        self.samples[0].y.len()
    }

    pub fn inputs(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.x.clone()).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Empirical joint keyed by exact input bytes.
    pub fn joint(&self) -> Result<DiscreteJoint> {
        let pairs: Vec<(FeatureKey, Vec<f64>)> = self
            .samples
            .iter()
            .map(|s| (FeatureKey::from_f64s(&s.x), s.y.clone()))
            .collect();
        DiscreteJoint::from_samples(&pairs)
    }
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianClusters {
    pub n: usize,
    pub classes: usize,
    pub dim: usize,
    /// Standard deviation of the class centers.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Within-class standard deviation.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_separation() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    1.0
}

impl GaussianClusters {
    /// Sample `i` belongs to class `i mod classes`; labels are one-hot.
    pub fn generate(&self) -> Result<Dataset> {
        if self.n == 0 {
            return Err(Error::EmptyDataset);
        }
        if self.classes < 2 || self.dim == 0 {
            return Err(Error::Range(
                "need at least two classes and a positive dimension".into(),
            ));
        }
        let mut crng = SplitMix64::new(derive_seed(self.seed, 0));
        let centers: Vec<Vec<f64>> = (0..self.classes)
            .map(|_| (0..self.dim).map(|_| self.separation * crng.normal()).collect())
            .collect();
        let mut rng = SplitMix64::new(derive_seed(self.seed, 1));
        let samples = (0..self.n)
            .map(|i| {
                let c = i % self.classes;
                Sample {
                    x: centers[c].iter().map(|m| m + self.noise * rng.normal()).collect(),
                    y: one_hot(c, self.classes),
                }
            })
            .collect();
        Dataset::new(samples)
    }
}

/// `y = W* x + noise` with standard normal inputs and teacher weights.
pub fn linear_regression(n: usize, input_dim: usize, output_dim: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = SplitMix64::new(derive_seed(seed, 2));
    let w: Vec<f64> = (0..input_dim * output_dim).map(|_| rng.normal()).collect();
    let samples = (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..input_dim).map(|_| rng.normal()).collect();
            let y = w
                .chunks_exact(input_dim)
                .map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + noise * rng.normal())
                .collect();
            Sample { x, y }
        })
        .collect();
    Dataset::new(samples)
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Gaussian {
        n: usize,
        classes: usize,
        dim: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    LinearRegression {
        n: usize,
        input_dim: usize,
        output_dim: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        limit: usize,
        #[serde(default = "default_idx_classes")]
        classes: usize,
    },
}

fn default_idx_classes() -> usize {
    10
}

impl DatasetSpec {
    /// Relative IDX paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        match *self {
            DatasetSpec::Gaussian {
                n,
                classes,
                dim,
                separation,
                noise,
                seed,
            } => GaussianClusters {
                n,
                classes,
                dim,
                separation,
                noise,
                seed,
            }
            .generate(),
            DatasetSpec::LinearRegression {
                n,
                input_dim,
                output_dim,
                noise,
                seed,
            } => linear_regression(n, input_dim, output_dim, noise, seed),
            DatasetSpec::Idx {
                ref images,
                ref labels,
                limit,
                classes,
            } => load_idx(&base.join(images), &base.join(labels), limit, classes),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::TruncatedFile(self.what.to_string()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parse IDX image and label buffers; see [`load_idx`].
pub fn parse_idx(images: &[u8], labels: &[u8], limit: usize, classes: usize) -> Result<Dataset> {
    let mut ri = Reader {
        bytes: images,
        what: "images",
    };
    let magic = ri.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::MagicMismatch {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = ri.u32_be()? as usize;
    let rows = ri.u32_be()? as usize;
    let cols = ri.u32_be()? as usize;
    let mut rl = Reader {
        bytes: labels,
        what: "labels",
    };
    let magic = rl.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::MagicMismatch {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let label_count = rl.u32_be()? as usize;
    let take = limit.min(count).min(label_count);
    let pixels = rows * cols;
    let mut samples = Vec::with_capacity(take);
    for _ in 0..take {
        let img = ri.take(pixels)?;
        let label = rl.take(1)?[0] as usize;
        if label >= classes {
            return Err(Error::Range(format!("label {label} with {classes} classes")));
        }
        samples.push(Sample {
            x: img.iter().map(|&p| p as f64 / 255.0).collect(),
            y: one_hot(label, classes),
        });
    }
    Dataset::new(samples)
}

/// First `limit` records of an IDX image/label file pair, pixels scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path, limit: usize, classes: usize) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_idx(&images, &labels, limit, classes)
}
