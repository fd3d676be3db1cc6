//! Portable seeded PRNG for the synthetic trace generators.
//!
//! The algorithm is fixed so that other implementations can reproduce traces
//! bit for bit:
//!
//! * state init: one SplitMix64 step on the user seed
//!   (`z = seed + 0x9E3779B97F4A7C15`, then the standard two
//!   xor-shift-multiply rounds and a final `z ^ (z >> 31)`); a zero result is
//!   replaced by `0x9E3779B97F4A7C15`.
//! * next: xorshift64* (`x ^= x >> 12; x ^= x << 25; x ^= x >> 27;`
//!   output `x * 0x2545F4914F6CDD1D`, wrapping).
//! * uniform: `(next >> 11) * 2^-53`, in `[0, 1)`.
//! * normal: Box-Muller cosine branch, `sqrt(-2 ln(1 - u1)) * cos(2π u2)`,
//!   consuming exactly two uniforms per sample.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone)]
pub struct XorShift64Star {
    state: u64,
}

impl XorShift64Star {
    pub fn new(seed: u64) -> Self {
        let mut z = seed.wrapping_add(GOLDEN);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        XorShift64Star {
            state: if z == 0 { GOLDEN } else { z },
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
