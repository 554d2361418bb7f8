//! Deterministic pseudo-random streams.
//!
//! Every run derives all of its randomness from a single 64-bit seed through
//! named streams, e.g. `"init"`, `"train"`, `"val"`, `"noise"`. Deriving a
//! stream hashes the parent seed together with the stream name (and an
//! optional index), so the batch schedule of one stream never shifts when
//! another stream draws more or fewer values. The core generator is the
//! xorshift64* shift-register generator; stream derivation mixes through
//! splitmix64. Both are fixed bit-for-bit across platforms.

/// One independent stream of pseudo-random values.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    seed: u64,
    cached_normal: Option<f64>,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl Rng {
    /// Stream rooted directly at `seed`.
    pub fn from_seed(seed: u64) -> Self {
        let mut state = splitmix64(seed);
        if state == 0 {
            // xorshift must not start at the all-zero state
            state = 0x4d59_5df4_d0f3_3173;
        }
        Rng {
            state,
            seed,
            cached_normal: None,
        }
    }

    /// Child stream identified by a name, independent of this stream's
    /// position. Derivation uses only the original seed, so
    /// `rng.stream("train")` yields the same stream no matter how many
    /// values `rng` itself has produced.
    pub fn stream(&self, name: &str) -> Rng {
        Rng::from_seed(splitmix64(self.seed ^ fnv1a(name.as_bytes())))
    }

    /// Child stream identified by a name and an index (per-layer init,
    /// per-subset runs, grid cells).
    pub fn stream_indexed(&self, name: &str, index: u64) -> Rng {
        Rng::from_seed(splitmix64(
            self.seed ^ fnv1a(name.as_bytes()) ^ splitmix64(index),
        ))
    }

    /// The seed this stream was derived from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        // Marsaglia xorshift64*
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_f491_4f6c_dd1d)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Lemire multiply-shift; n must be > 0.
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    /// Standard normal via Box-Muller; the paired value is cached.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }

    /// A uniformly random k-subset of 0..n, returned sorted.
    pub fn subset(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut indices: Vec<usize> = (0..n).collect();
        // partial Fisher-Yates: the first k entries are the sample
        for i in 0..k {
            let j = i + self.next_below(n - i);
            indices.swap(i, j);
        }
        let mut chosen = indices[..k].to_vec();
        chosen.sort_unstable();
        chosen
    }
}
