use super::Batch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Vertices of a regular `classes`-gon of the given radius in the first two
/// coordinates, every coordinate shifted by `offset`.
pub fn polygon_centers(classes: usize, radius: f64, offset: f64, dims: usize) -> Result<Vec<Vec<f64>>> {
    if dims < 2 {
        return Err(Error::Config("polygon centers need at least 2 dimensions".into()));
    }
    Ok((0..classes)
        .map(|i| {
            let angle = std::f64::consts::TAU * i as f64 / classes as f64;
            let mut c = vec![offset; dims];
            c[0] += radius * angle.cos();
            c[1] += radius * angle.sin();
            c
        })
        .collect())
}

/// `per_class` samples from `N(center, sigma² I)` for each center, class by
/// class. Duplicate centers are allowed.
pub fn gen_blobs(per_class: usize, centers: &[Vec<f64>], sigma: f64, seed: u64) -> Result<Batch> {
    if centers.len() < 2 {
        return Err(Error::Config("blobs need at least two classes".into()));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("blob sigma must be positive, got {}", sigma)));
    }
    let dims = centers[0].len();
    if dims == 0 || centers.iter().any(|c| c.len() != dims) {
        return Err(Error::Config("blob centers must share a positive dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(centers.len() * per_class * dims);
    let mut labels = Vec::with_capacity(centers.len() * per_class);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &c in center {
                let e: f64 = StandardNormal.sample(&mut rng);
                data.push(c + sigma * e);
            }
            labels.push(class);
        }
    }
    let n = labels.len();
    Batch::new(Tensor::new(vec![n, dims], data)?, Some(labels))
}
