//! Datasets: synthetic blobs and uniform noise, IDX image files, and FGSM
//! perturbation of labeled batches.

mod blobs;
mod fgsm;
mod idx;
mod noise;

pub use blobs::{gen_blobs, polygon_centers};
pub use fgsm::{fgsm_perturb, AttackTarget, FgsmConfig, FgsmLoss};
pub use idx::{load_idx, load_idx_images, write_idx};
pub use noise::gen_uniform_noise;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Feature rows with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[N×D]` feature matrix.
    pub features: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn new(features: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if !features.all_finite() {
            return Err(Error::Domain("batch features must be finite".into()));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Dimension(format!("{} labels for {} rows", l.len(), n)));
            }
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Rejects labels outside `[0, classes)`.
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        if let Some(l) = &self.labels {
            if let Some(&bad) = l.iter().find(|&&t| t >= classes) {
                return Err(Error::Contract(format!("label {} outside [0, {})", bad, classes)));
            }
        }
        Ok(())
    }
}

fn default_radius() -> f64 {
    1.0
}

fn default_dims() -> usize {
    2
}

/// Declarative description of a dataset. Synthetic contents are a pure
/// function of the spec, including its `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Isotropic Gaussian blobs. Without explicit `centers` the class
    /// centers are the vertices of a regular polygon of the given `radius`
    /// in the first two coordinates, shifted by `offset` in every coordinate.
    Blobs {
        classes: usize,
        per_class: usize,
        sigma: f64,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default)]
        offset: f64,
        #[serde(default = "default_dims")]
        dims: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        centers: Option<Vec<Vec<f64>>>,
        seed: u64,
    },
    /// Unlabeled i.i.d. uniform `[0, 1]` vectors.
    UniformNoise { n: usize, dims: usize, seed: u64 },
    /// IDX image file, optionally with an IDX label file.
    IdxFile {
        images: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        labels: Option<PathBuf>,
    },
    /// The test set after an FGSM step of size `epsilon` against the trained
    /// model; materialized by the experiment runner.
    FgsmDerived { epsilon: f64 },
}

impl DatasetSpec {
    /// Generates or loads the dataset. `FgsmDerived` needs a model and is
    /// rejected here.
    pub fn materialize(&self) -> Result<Batch> {
        match self {
            DatasetSpec::Blobs {
                classes,
                per_class,
                sigma,
                radius,
                offset,
                dims,
                centers,
                seed,
            } => {
                let centers = match centers {
                    Some(c) => {
                        if c.len() != *classes {
                            return Err(Error::Config(format!(
                                "{} centers for {} classes",
                                c.len(),
                                classes
                            )));
                        }
                        c.clone()
                    }
                    None => polygon_centers(*classes, *radius, *offset, *dims)?,
                };
                gen_blobs(*per_class, &centers, *sigma, *seed)
            }
            DatasetSpec::UniformNoise { n, dims, seed } => gen_uniform_noise(*n, *dims, *seed),
            DatasetSpec::IdxFile { images, labels } => match labels {
                Some(l) => load_idx(images, l),
                None => load_idx_images(images),
            },
            DatasetSpec::FgsmDerived { .. } => Err(Error::Contract(
                "fgsm-derived datasets are produced from a trained model".into(),
            )),
        }
    }

    /// Paths that must exist before a run starts.
    pub fn paths(&self) -> Vec<&PathBuf> {
        match self {
            DatasetSpec::IdxFile { images, labels } => {
                let mut v = vec![images];
                v.extend(labels.iter());
                v
            }
            _ => Vec::new(),
        }
    }
}
