//! Seeded random streams.
//!
//! All randomness in a run is derived from one root seed. Each consumer asks
//! for a stream by name ("shuffle", "mask", ...), so adding or removing one
//! consumer never perturbs the draws seen by the others. Stream keys are
//! derived with splitmix64 over the root seed and the stream name, then fed
//! to ChaCha20.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::fm;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Root seed from which all named streams are derived.
#[derive(Clone, Copy, Debug)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Streams { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent ChaCha20 stream identified by `name`.
    pub fn stream(&self, name: &str) -> ChaCha20Rng {
        self.substream(name, 0)
    }

    /// Like [`Streams::stream`] but further keyed by an index, for per-epoch
    /// or per-item streams.
    pub fn substream(&self, name: &str, index: u64) -> ChaCha20Rng {
        let mut state = self.seed ^ 0x6A09_E667_F3BC_C908;
        let _ = splitmix64(&mut state);
        for chunk in name.as_bytes().chunks(8) {
            let mut word = [0u8; 8];
            word[..chunk.len()].copy_from_slice(chunk);
            state ^= u64::from_le_bytes(word).wrapping_add(0x9E37_79B9);
            let _ = splitmix64(&mut state);
        }
        state ^= index.wrapping_mul(0xA24B_AED4_963E_E407);
        let mut key = [0u8; 32];
        for i in 0..4 {
            let w = splitmix64(&mut state);
            key[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
        }
        ChaCha20Rng::from_seed(key)
    }
}

/// Standard normal draw via Box-Muller, pinned to `libm` transcendentals.
pub fn normal(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    fm::sqrt(-2.0 * fm::ln(u1)) * fm::cos(2.0 * fm::PI * u2)
}

pub fn normal_vec(rng: &mut ChaCha20Rng, n: usize, std: f64) -> alloc::vec::Vec<f64> {
    let mut out = alloc::vec::Vec::with_capacity(n);
    for _ in 0..n {
        out.push(normal(rng) * std);
    }
    out
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut ChaCha20Rng, items: &mut [T]) {
    if items.len() < 2 {
        return;
    }
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
