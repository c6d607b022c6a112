//! Symmetric uniform grids.
//!
//! A `B`-bit grid over a scope with largest magnitude `m` has spacing
//! `s = m / (2^(B-1) - 1)`. `B = 16` is the original storage precision, so
//! quantizing to 16 bits leaves values untouched.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;

/// Bit-width of the uncompressed model.
pub const B_ORIG: u8 = 16;
pub const MIN_BITS: u8 = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    /// Round to the nearest grid point (ties away from zero).
    #[default]
    Nearest,
    /// Round up with probability equal to the fractional position between
    /// the two neighbouring grid points; unbiased in expectation.
    Stochastic,
}

/// Largest integer level of a `bits`-wide symmetric grid.
pub fn max_level(bits: u8) -> f64 {
    f64::from((1u32 << (bits - 1)) - 1)
}

/// Grid spacing for a scope whose largest magnitude is `max_abs`.
pub fn spacing(max_abs: f64, bits: u8) -> f64 {
    max_abs / max_level(bits)
}

/// Rounds `v` onto the grid of spacing `s`. `u` is a uniform draw in
/// `[0, 1)`, only consulted by stochastic rounding.
#[inline]
pub fn round_to_grid(v: f64, s: f64, levels: f64, rounding: Rounding, u: f64) -> f64 {
    if s == 0.0 {
        return 0.0;
    }
    let t = v / s;
    let q = match rounding {
        Rounding::Nearest => t.round(),
        Rounding::Stochastic => {
            let lo = t.floor();
            if u < t - lo {
                lo + 1.0
            } else {
                lo
            }
        }
    };
    q.clamp(-levels, levels) * s
}

/// Quantizes `vals` in place with a fixed spacing. One uniform draw is
/// consumed per value whatever its magnitude, so a value's rounding does
/// not depend on which other values happen to be zero.
pub fn quantize_with_spacing<R: Rng + ?Sized>(vals: &mut [f64], s: f64, bits: u8, rounding: Rounding, rng: &mut R) {
    let levels = max_level(bits);
    for v in vals.iter_mut() {
        let u: f64 = match rounding {
            Rounding::Stochastic => rng.random(),
            Rounding::Nearest => 0.0,
        };
        *v = round_to_grid(*v, s, levels, rounding, u);
    }
}

/// Per-tensor quantization of `vals` with a scale from their own maximum
/// magnitude. No-op at the original precision.
pub fn quantize_tensor(vals: &mut [f64], bits: u8, rounding: Rounding, seed: u64) {
    if bits >= B_ORIG {
        return;
    }
    let max_abs = vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let s = spacing(max_abs, bits);
    let mut r = rng::stream(seed);
    quantize_with_spacing(vals, s, bits, rounding, &mut r);
}
