//! Shared helpers for integration tests: an exact big-integer image of the
//! extended-precision values, independent of the arithmetic under test.

use num_bigint::BigInt;
use wealthshare::extprec::ExtendedReal;

/// Scale exponent: every finite non-negative f64 is an integer at 2^1200.
pub const ORACLE_SCALE: u32 = 1200;

/// Exact integer image of a non-negative f64.
pub fn big_f64(x: f64) -> BigInt {
    assert!(x >= 0.0 && x.is_finite());
    let bits = x.to_bits();
    let exp_field = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    let (m, e) = if exp_field == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), exp_field - 1075)
    };
    if m == 0 {
        return BigInt::from(0);
    }
    BigInt::from(m) << (ORACLE_SCALE as i32 + e) as u32
}

/// Exact integer image of an extended value.
pub fn big_ext(x: &ExtendedReal) -> BigInt {
    let (hi, lo) = x.to_parts();
    (BigInt::from(hi) << (ORACLE_SCALE - 60)) + big_f64(lo)
}
