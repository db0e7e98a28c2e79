//! Seeded random streams. Every consumer of randomness owns its own stream
//! derived from the experiment seed so that adding draws in one place never
//! shifts the sequence seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Augment = 3,
    Prior = 4,
    Pairing = 5,
    Interpolate = 6,
    Eval = 7,
    Subset = 8,
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
