// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seed expansion: one user seed feeds every stage through its own ChaCha
//! stream, selected by hashing the stage name.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stream id for a stage: the first 8 bytes (LE) of SHA-256 of its name.
pub fn stream_id(stage: &str) -> u64 {
    let digest = Sha256::digest(stage.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn stage_rng(seed: u64, stage: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(stage));
    rng
}
