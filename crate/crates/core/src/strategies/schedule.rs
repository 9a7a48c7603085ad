//! Seeded mini-batch schedules. Indices inside each batch are sorted so that
//! a batch covering the whole set reproduces the full-batch gradient bitwise.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Batches of sample indices grouped by epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub epochs: Vec<Vec<Vec<usize>>>,
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

impl Schedule {
    /// Every epoch reshuffles `0..n` and cuts it into batches of
    /// `min(batch_size, n)`; the last batch may be short.
    pub fn minibatch(n: usize, batch_size: usize, epochs: u32, seed: u64) -> Self {
        let b = batch_size.min(n).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let epochs = (0..epochs)
            .map(|_| {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                perm.chunks(b).map(|c| sorted(c.to_vec())).collect()
            })
            .collect();
        Schedule { epochs }
    }

    pub fn steps(&self) -> usize {
        self.epochs.iter().map(Vec::len).sum()
    }
}

/// Disjoint `(support, query)` batch pairs grouped by epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaSchedule {
    pub epochs: Vec<Vec<(Vec<usize>, Vec<usize>)>>,
}

impl MetaSchedule {
    /// Every epoch reshuffles `0..n` and cuts it into double batches of
    /// `2 * batch_size`; the first half is the support batch, the second the
    /// query batch. A short remainder is dropped. Empty when `n < 2 * batch_size`.
    pub fn new(n: usize, batch_size: usize, epochs: u32, seed: u64) -> Self {
        let b = batch_size.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let epochs = (0..epochs)
            .map(|_| {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                perm.chunks_exact(2 * b)
                    .map(|c| (sorted(c[..b].to_vec()), sorted(c[b..].to_vec())))
                    .collect()
            })
            .collect();
        MetaSchedule { epochs }
    }

    /// The query batches alone, as a plain schedule.
    pub fn queries(&self) -> Schedule {
        Schedule {
            epochs: self
                .epochs
                .iter()
                .map(|e| e.iter().map(|(_, q)| q.clone()).collect())
                .collect(),
        }
    }

    pub fn steps(&self) -> usize {
        self.epochs.iter().map(Vec::len).sum()
    }
}
