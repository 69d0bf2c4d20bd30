use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchOrder {
    Given,
    Shuffled { seed: u64 },
}

/// Row-index batches over a dataset; the last batch may be short.
#[derive(Debug, Clone)]
pub struct BatchStream {
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for BatchStream {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.cursor).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for BatchStream {}

/// Batches of row indices for `n_rows` rows. `batch_size` must be at least 2.
pub fn batch_indices(n_rows: usize, batch_size: usize, order: BatchOrder) -> Result<BatchStream> {
    if batch_size < 2 {
        return Err(Error::invalid(format!(
            "batch size must be at least 2, got {batch_size}"
        )));
    }
    let mut rows: Vec<usize> = (0..n_rows).collect();
    if let BatchOrder::Shuffled { seed } = order {
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(BatchStream {
        order: rows,
        batch_size,
        cursor: 0,
    })
}

pub fn stream_batches(data: &Dataset, batch_size: usize, order: BatchOrder) -> Result<BatchStream> {
    batch_indices(data.len(), batch_size, order)
}
