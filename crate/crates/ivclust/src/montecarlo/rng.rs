//! Deterministic random streams for the simulation harness.
//!
//! Every replication draws from streams derived from a `(base_seed,
//! replication, salt)` triple, so results are bit-reproducible regardless of
//! thread count or the order in which replications finish.  Derivation feeds
//! the triple through the SplitMix64 finalizer as a chained hash; the result
//! seeds a SplitMix64 whose first four outputs initialize a xoshiro256++
//! generator.  Uniform variates take the top 53 bits of a 64-bit output and
//! normals go through the inverse CDF, so each variate consumes exactly one
//! generator step.

use crate::dist::normal_quantile;

/// Stream salt for instrument draws (cluster common factors, then the
/// idiosyncratic instrument matrix in row-major order).
pub const SALT_INSTRUMENTS: u64 = 1;

/// Stream salt for error draws (per-cluster common shocks, then per-row
/// idiosyncratic shocks).
pub const SALT_ERRORS: u64 = 2;

/// SplitMix64 finalizer: a bijective scramble of the 64-bit input.
fn scramble(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 generator, used only to expand a derived seed into the
/// xoshiro256++ state.
struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// A xoshiro256++ stream keyed by `(base_seed, index, salt)`.
///
/// `index` is the replication number and `salt` separates logically
/// independent draw groups within one replication (instruments vs. errors),
/// so the same instrument realization can be paired with fresh errors by
/// reusing the instrument index.
pub struct Stream {
    s: [u64; 4],
}

impl Stream {
    /// Derive the stream for a `(base_seed, index, salt)` triple.
    pub fn derive(base_seed: u64, index: u64, salt: u64) -> Self {
        let h = scramble(scramble(scramble(base_seed) ^ index) ^ salt);
        let mut sm = SplitMix64::new(h);
        let mut s = [
            sm.next_u64(),
            sm.next_u64(),
            sm.next_u64(),
            sm.next_u64(),
        ];
        // xoshiro256++ requires a nonzero state; four consecutive zero
        // outputs are practically impossible but cheap to guard against.
        if s == [0, 0, 0, 0] {
            s[0] = 1;
        }
        Stream { s }
    }

    /// Next raw 64-bit output (xoshiro256++ update).
    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform draw strictly inside (0, 1): top 53 bits, centered on the
    /// half-step so 0 and 1 are unreachable and the inverse CDF stays finite.
    pub fn u01(&mut self) -> f64 {
        (((self.next_u64() >> 11) as f64) + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Standard normal draw via the inverse CDF.
    pub fn normal(&mut self) -> f64 {
        normal_quantile(self.u01())
    }
}
