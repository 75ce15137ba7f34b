//! Seeded random streams. Everything random in the crate flows through
//! ChaCha8 so results are reproducible across platforms.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::real::Real;
use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream keyed by `(seed, label)`; distinct labels give independent streams.
pub fn labeled(seed: u64, label: &[u8]) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label);
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Counter-based stream: position `counter` of stream `stream` under `seed`.
/// Draws at one counter never depend on how many draws other counters made.
pub fn keyed(seed: u64, stream: u64, counter: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    // 16 words of headroom per counter value
    rng.set_word_pos(counter as u128 * 16);
    rng
}

pub fn gaussian_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

pub fn gaussian_tensor<T: Real>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = gaussian_vec(rng, n, std).into_iter().map(T::from_f64).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
