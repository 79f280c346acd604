use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;

use crate::env::EpisodeRecord;
use crate::error::{invalid, Error, Result};

/// Fixed-capacity episode store; the oldest episode is evicted first.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<EpisodeRecord>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(invalid("replay buffer capacity must be positive"));
        }
        Ok(Self { capacity, episodes: VecDeque::with_capacity(capacity) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn push(&mut self, episode: EpisodeRecord) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &EpisodeRecord> {
        self.episodes.iter()
    }

    /// `n` distinct episodes drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&EpisodeRecord>> {
        if n > self.episodes.len() || n == 0 {
            return Err(Error::InsufficientData { have: self.episodes.len(), need: n.max(1) });
        }
        Ok(index::sample(rng, self.episodes.len(), n).into_iter().map(|i| &self.episodes[i]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Transition;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn episode(tag: f64) -> EpisodeRecord {
        EpisodeRecord {
            transitions: vec![Transition {
                state: 0,
                state_features: vec![],
                observations: vec![],
                actions: vec![],
                reward: tag,
                next_state: None,
                next_state_features: vec![],
                next_observations: vec![],
                terminal: true,
            }],
        }
    }

    #[test]
    fn sampling_needs_enough_episodes() {
        let mut b = ReplayBuffer::new(4).unwrap();
        b.push(episode(1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(b.sample(2, &mut rng), Err(Error::InsufficientData { have: 1, need: 2 })));
        assert_eq!(b.sample(1, &mut rng).unwrap().len(), 1);
        assert!(ReplayBuffer::new(0).is_err());
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let mut b = ReplayBuffer::new(50).unwrap();
        for i in 0..50 {
            b.push(episode(i as f64));
        }
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            b.sample(10, &mut rng).unwrap().iter().map(|e| e.total_reward()).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    proptest! {
        #[test]
        fn capacity_and_fifo(capacity in 1usize..20, inserts in 0usize..60) {
            let mut b = ReplayBuffer::new(capacity).unwrap();
            for i in 0..inserts {
                b.push(episode(i as f64));
                prop_assert!(b.len() <= capacity);
            }
            let kept: Vec<f64> = b.iter().map(|e| e.total_reward()).collect();
            let first = inserts.saturating_sub(capacity);
            let expected: Vec<f64> = (first..inserts).map(|i| i as f64).collect();
            prop_assert_eq!(kept, expected);
        }
    }
}
