//! xoshiro256** seeded through SplitMix64, plus Box–Muller Gaussians.
//!
//! The integer stream is fully specified by the algorithm constants and is
//! identical on every platform. Each Gaussian consumes exactly two `u64`
//! draws (the sine branch of Box–Muller is discarded).

use super::Matrix;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    finalize(*state)
}

#[inline]
fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed, e.g. for `(seed, layer, head)`.
///
/// Used so that per-layer / per-head construction is independent of the
/// order in which the pieces are built.
pub fn hash64(seed: u64, a: u64, b: u64) -> u64 {
    let h = finalize(seed.wrapping_add(GOLDEN_GAMMA));
    let h = finalize((h ^ a).wrapping_add(GOLDEN_GAMMA));
    finalize((h ^ b).wrapping_add(GOLDEN_GAMMA))
}

/// 256-bit state xoshiro256** generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn seed_from_u64(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Self { s }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Lemire's multiply-shift; bias is below 2^-64 * n.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal sample; consumes two `u64` draws.
    #[inline]
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// `rows × cols` matrix of i.i.d. `N(0, std²)` entries, filled row-major.
pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| std * rng.next_gaussian())
}
