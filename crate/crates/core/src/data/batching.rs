use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Dataset, Result};

/// `gradient_batch` samples are averaged into one update; normalization
/// statistics are computed over disjoint groups of `statistics_batch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub gradient_batch: usize,
    pub statistics_batch: usize,
    pub seed: u64,
}

/// Sample indices of one gradient step, split into statistics micro-batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradientBatch {
    pub micro_batches: Vec<Vec<usize>>,
}

impl GradientBatch {
    pub fn len(&self) -> usize {
        self.micro_batches.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.micro_batches.is_empty()
    }
}

impl BatchPlan {
    pub fn new(gradient_batch: usize, statistics_batch: usize, seed: u64) -> Result<Self> {
        if statistics_batch == 0 || gradient_batch == 0 {
            return Err(DataError::Plan("batch sizes must be positive".into()));
        }
        if !gradient_batch.is_multiple_of(statistics_batch) {
            return Err(DataError::Plan(format!(
                "statistics batch {statistics_batch} does not divide gradient batch {gradient_batch}"
            )));
        }
        Ok(Self {
            gradient_batch,
            statistics_batch,
            seed,
        })
    }

    pub fn micro_batches_per_step(&self) -> usize {
        self.gradient_batch / self.statistics_batch
    }

    /// Number of full gradient batches in an epoch of `n` samples. A gradient
    /// batch larger than the dataset shrinks to the largest multiple of the
    /// statistics batch that fits.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        let g = self.effective_gradient_batch(n);
        if g == 0 { 0 } else { n / g }
    }

    pub fn effective_gradient_batch(&self, n: usize) -> usize {
        if self.gradient_batch <= n {
            self.gradient_batch
        } else {
            n / self.statistics_batch * self.statistics_batch
        }
    }

    /// The seeded permutation of `0..n` used for `epoch`.
    pub fn permutation(&self, n: usize, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    }
}

/// Partitions a shuffled epoch into gradient batches; a trailing partial
/// gradient batch is dropped.
pub fn iterate(plan: &BatchPlan, ds: &Dataset, epoch: u64) -> Result<Vec<GradientBatch>> {
    let n = ds.len();
    if plan.statistics_batch > n {
        return Err(DataError::Plan(format!(
            "statistics batch {} exceeds dataset size {n}",
            plan.statistics_batch
        )));
    }
    let g = plan.effective_gradient_batch(n);
    let perm = plan.permutation(n, epoch);
    Ok(perm
        .chunks_exact(g)
        .map(|chunk| GradientBatch {
            micro_batches: chunk.chunks(plan.statistics_batch).map(<[usize]>::to_vec).collect(),
        })
        .collect())
}
