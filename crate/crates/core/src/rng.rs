//! Named random sub-streams derived from a single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Synthetic training partition.
    Data = 1,
    /// Synthetic test partition.
    DataTest = 2,
    /// Parameter initialization.
    Init = 3,
    /// Minibatch order of the contrastive stage.
    Sampling = 4,
    /// View augmentation of the contrastive stage.
    Augment = 5,
    /// Minibatch order of the meta stage.
    MetaSampling = 6,
    /// View augmentation of the meta stage.
    MetaAugment = 7,
    /// Linear-probe initialization and shuffling.
    Probe = 8,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
