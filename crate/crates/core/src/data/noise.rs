use super::Batch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` unlabeled vectors with i.i.d. `U[0, 1]` entries.
pub fn gen_uniform_noise(n: usize, dims: usize, seed: u64) -> Result<Batch> {
    if n == 0 || dims == 0 {
        return Err(Error::Config("noise set needs n >= 1 and dims >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * dims).map(|_| rng.random_range(0.0..=1.0)).collect();
    Batch::new(Tensor::new(vec![n, dims], data)?, None)
}
