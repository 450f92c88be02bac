//! Named, independent random streams derived from a master seed.
//!
//! Each stream is seeded from `sha256(master_seed_le || label)`, so adding a
//! new labelled stream never shifts the draws of an existing one.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn stream(master_seed: u64, label: &str) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Uniformly distributed unit vector in `n` dimensions.
pub fn unit_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let g = gaussian_vec(rng, n);
        if let Some(u) = crate::linalg::normalized(&g) {
            return u;
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// A `u64` seed for a component that takes a plain seed, drawn from the
/// labelled stream.
pub fn derive_seed(master_seed: u64, label: &str) -> u64 {
    stream(master_seed, label).next_u64()
}
