//! Data-parallel SGD with compressed communication.
//!
//! Workers train replicas of a small MLP on disjoint slices of the data.
//! Every node also serves one contiguous shard of the flattened parameter
//! vector. Gradients pushed to the shards and parameter deltas pulled back
//! are both compressed by dropping all but the largest-magnitude entries;
//! what is dropped stays behind in a residual and is added to the next
//! transmission.

pub mod compress;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod net;
pub mod server;
pub mod tensor;

pub use error::{Error, Result};

/// Mixes values into a derived 64-bit seed (splitmix64 finalizer).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        h = splitmix(h);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
