use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DataError, Dataset, Result};
use crate::tensor::Tensor;

/// `classes * per_class` samples around per-class mean images drawn
/// uniformly from `[0, 1]`; each pixel gets `spread * N(0, 1)` noise and is
/// clamped back into `[0, 1]`. Labels cycle `0, 1, .., K-1, 0, ..`.
pub fn synth_gaussian_mixture(
    classes: usize,
    per_class: usize,
    dims: (usize, usize, usize),
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    let (c, h, w) = dims;
    if classes < 2 {
        return Err(DataError::InvalidSize(format!("need at least 2 classes, got {classes}")));
    }
    if per_class == 0 || c * h * w == 0 {
        return Err(DataError::InvalidSize("empty dataset dimensions".into()));
    }
    if !(spread >= 0.0) {
        return Err(DataError::InvalidSize(format!("spread must be >= 0, got {spread}")));
    }
    let len = c * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..len).map(|_| rng.random::<f64>()).collect())
        .collect();
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * len);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        labels.push(label);
        for &m in &means[label] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push((m + spread * z).clamp(0.0, 1.0));
        }
    }
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, classes)
}
