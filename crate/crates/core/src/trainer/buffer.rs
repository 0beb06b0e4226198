use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Mcmc,
    ExactOracle,
    External,
}

/// Bounded FIFO store of target-domain samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<(Vec<f64>, Provenance)>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends a sample, evicting the oldest when full.
    pub fn push(&mut self, x: Vec<f64>, tag: Provenance) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back((x, tag));
    }

    pub fn extend(&mut self, xs: impl IntoIterator<Item = Vec<f64>>, tag: Provenance) {
        for x in xs {
            self.push(x, tag);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], Provenance)> {
        self.items.iter().map(|(x, p)| (x.as_slice(), *p))
    }

    pub fn count(&self, tag: Provenance) -> usize {
        self.items.iter().filter(|(_, p)| *p == tag).count()
    }

    /// `n` uniform draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        if self.items.is_empty() && n > 0 {
            return Err(Error::InvalidArgument("cannot sample from an empty buffer".into()));
        }
        Ok((0..n).map(|_| self.items[rng.random_range(0..self.items.len())].0.clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn fifo_eviction_and_tags() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..5 {
            b.push(vec![i as f64], if i % 2 == 0 { Provenance::Mcmc } else { Provenance::External });
        }
        assert_eq!(b.len(), 3);
        let xs: Vec<f64> = b.iter().map(|(x, _)| x[0]).collect();
        assert_eq!(xs, vec![2.0, 3.0, 4.0]);
        assert_eq!(b.count(Provenance::Mcmc), 2);
        let draws = b.sample(50, &mut stream(1, &[])).unwrap();
        assert!(draws.iter().all(|x| x[0] >= 2.0));
        assert!(ReplayBuffer::new(2).sample(1, &mut stream(1, &[])).is_err());
        let mut z = ReplayBuffer::new(0);
        z.push(vec![1.0], Provenance::ExactOracle);
        assert!(z.is_empty());
    }
}
