//! Seed derivation. Every random mechanism draws from its own stream, keyed
//! by the master seed and a stream tag, so switching one mechanism on or off
//! leaves the draws of the others untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Seeding,
    Matching,
    SatiatedSet,
    NodeKinds,
    Altruism,
    ModelPartners,
    Sweep,
    Graph,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Seeding => 0x5345_4544,
            Stream::Matching => 0x4d41_5443,
            Stream::SatiatedSet => 0x5341_5449,
            Stream::NodeKinds => 0x4b49_4e44,
            Stream::Altruism => 0x414c_5452,
            Stream::ModelPartners => 0x4d50_4152,
            Stream::Sweep => 0x5357_4550,
            Stream::Graph => 0x4752_4150,
        }
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a sequence of words into one 64-bit value.
pub fn hash_words(words: &[u64]) -> u64 {
    words.iter().fold(0x6a09_e667_f3bc_c908, |acc, &w| mix64(acc ^ mix64(w)))
}

pub fn derive_seed(master_seed: u64, stream: Stream, salt: u64) -> u64 {
    hash_words(&[master_seed, stream.tag(), salt])
}

pub fn stream_rng(master_seed: u64, stream: Stream, salt: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master_seed, stream, salt))
}

/// Uniform integer in `0..bound` drawn from a counter-indexed hash, using
/// rejection to remove modulo bias.
pub fn hashed_below(key: &[u64], bound: u64) -> u64 {
    assert!(bound > 0);
    let zone = u64::MAX - (u64::MAX % bound);
    let base = hash_words(key);
    for attempt in 0u64.. {
        let x = mix64(base ^ mix64(attempt));
        if x < zone {
            return x % bound;
        }
    }
    unreachable!()
}
