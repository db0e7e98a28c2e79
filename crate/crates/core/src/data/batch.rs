use rand::seq::SliceRandom;

use crate::rng::{stream, Rng, Stream};
use crate::tensor::Tensor;

/// A minibatch of encoder inputs and the dataset rows they came from.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    pub images: Tensor<f32>,
    pub indices: Vec<usize>,
}

/// Epoch-wise shuffled index batches. Each epoch is a fresh uniform
/// permutation; with `drop_last` the trailing partial batch is skipped.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    drop_last: bool,
    rng: Rng,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
}

impl BatchSampler {
    /// Panics unless `1 <= batch_size <= n`.
    pub fn new(n: usize, batch_size: usize, seed: u64, drop_last: bool) -> Self {
        Self::with_rng(n, batch_size, stream(seed, Stream::Data), drop_last)
    }

    pub fn with_rng(n: usize, batch_size: usize, rng: Rng, drop_last: bool) -> Self {
        assert!(
            batch_size >= 1 && batch_size <= n,
            "batch size {batch_size} must lie in [1, {n}]"
        );
        let mut s = Self {
            n,
            batch_size,
            drop_last,
            rng,
            order: (0..n).collect(),
            pos: 0,
            epoch: 0,
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        if self.drop_last {
            self.n / self.batch_size
        } else {
            self.n.div_ceil(self.batch_size)
        }
    }

    fn new_epoch(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
        self.epoch += 1;
    }

    /// Next batch, reshuffling at epoch boundaries. Never ends.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let remaining = self.n - self.pos;
        if remaining == 0 || (self.drop_last && remaining < self.batch_size) {
            self.new_epoch();
        }
        let end = (self.pos + self.batch_size).min(self.n);
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        batch
    }

    /// The batches of the current epoch (from the start of the next one if
    /// the current epoch has already been partly consumed).
    pub fn epoch_batches(&mut self) -> Vec<Vec<usize>> {
        if self.pos != 0 {
            self.new_epoch();
        }
        (0..self.batches_per_epoch()).map(|_| self.next_batch()).collect()
    }
}

impl Iterator for BatchSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}
