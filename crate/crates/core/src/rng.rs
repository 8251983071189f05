//! Deterministic randomness.
//!
//! Every stochastic decision in the crate (weight init, shuffling, random
//! masks, synthetic data) draws from [`Rng`], a SplitMix64 generator:
//!
//! ```text
//! state  <- state + 0x9E3779B97F4A7C15
//! z      <- state
//! z      <- (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z      <- (z ^ (z >> 27)) * 0x94D049BB133111EB
//! output <- z ^ (z >> 31)
//! ```
//!
//! All arithmetic is wrapping 64-bit, so a given state yields the same
//! stream on every platform. Stages never share a generator; each one asks
//! for a named sub-seed via [`derive_seed`] so it can be replayed alone.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_2: u64 = 0x94D0_49BB_1331_11EB;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX_1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_2);
    z ^ (z >> 31)
}

/// Sub-seed for the stage `name` under `root`: FNV-1a over the name bytes,
/// xor-folded into the root seed and passed through the SplitMix finalizer.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    mix64(root.wrapping_add(GOLDEN_GAMMA) ^ h)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn from_name(root: u64, name: &str) -> Self {
        Self::new(derive_seed(root, name))
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` (rejection sampling, no modulo bias).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller; the second variate is discarded so the
    /// generator state stays a single integer.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn exp1(&mut self) -> f64 {
        -(1.0 - self.uniform()).ln()
    }

    /// Flat Dirichlet(1, ..., 1) sample of dimension `k`.
    pub fn dirichlet_flat(&mut self, k: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..k).map(|_| self.exp1()).collect();
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    }

    /// Fisher-Yates.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

/// Record of every named sub-seed handed out during a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedLedger {
    pub root: u64,
    pub seeds: BTreeMap<String, u64>,
}

impl SeedLedger {
    pub fn new(root: u64) -> Self {
        Self {
            root,
            seeds: BTreeMap::new(),
        }
    }

    pub fn seed(&mut self, name: &str) -> u64 {
        let s = derive_seed(self.root, name);
        self.seeds.insert(name.to_string(), s);
        s
    }

    pub fn rng(&mut self, name: &str) -> Rng {
        Rng::new(self.seed(name))
    }
}
