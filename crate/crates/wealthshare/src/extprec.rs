//! Split-representation scalar with an effective 113-bit mantissa.
//!
//! A value is stored as `hi` integer units of 2^-60 plus an ordinary f64
//! residual `lo`. After canonicalisation `lo` lies in `[0, 2^-60)`, so the
//! residual contributes a full 53-bit mantissa below the 2^-60 boundary and
//! quantities of order one carry roughly 113 significant bits. Values far
//! below 2^-60 live entirely in `lo` and keep plain f64 relative accuracy,
//! which is what the share dynamics needs: absolute 2^-113 resolution around
//! the unit total, graceful degradation for shares down to the 1e-318 floor.
//!
//! All quantities are non-negative. `hi` must stay below 2^63 (values below
//! 8.0) so that signed conversions stay exact; exceeding the cap is reported
//! as an accumulation error, never wrapped.

use thiserror::Error;

/// One `hi` unit: 2^-60.
pub const UNIT: f64 = 1.0 / (1u64 << 60) as f64;
const INV_UNIT: f64 = (1u64 << 60) as f64;
/// Exclusive upper bound for `hi`; values must stay below 8.0.
const HI_CAP: u64 = 1 << 63;
/// Scale used by the fixed-point summation accumulator: 2^113 = 2^60 * 2^53.
const LO_SUM_SCALE: f64 = INV_UNIT * (1u64 << 53) as f64;
const LO_SUM_INV: f64 = 1.0 / LO_SUM_SCALE;

#[derive(Debug, Error, PartialEq)]
pub enum PrecisionError {
    #[error("input {0} outside the representable range")]
    OutOfRange(f64),
    #[error("accumulation overflowed the representable range")]
    Overflow,
    #[error("subtraction produced a negative value")]
    Negative,
    #[error("division requires a strictly positive divisor")]
    NonPositiveDivisor,
    #[error("non-canonical representation: hi={hi}, lo={lo}")]
    NotCanonical { hi: u64, lo: f64 },
    #[error("malformed serialised value: {0}")]
    Parse(String),
}

/// Non-negative scalar `hi * 2^-60 + lo` with `lo` in `[0, 2^-60)`.
#[derive(Debug, Copy, Clone, PartialEq)]
pub struct ExtendedReal {
    hi: u64,
    lo: f64,
}

// `lo` is finite and non-negative by construction, so bitwise equality is
// value equality.
impl Eq for ExtendedReal {}

impl PartialOrd for ExtendedReal {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ExtendedReal {
    #[inline]
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Canonical form makes value order lexicographic in (hi, lo).
        self.hi
            .cmp(&other.hi)
            .then_with(|| self.lo.total_cmp(&other.lo))
    }
}

impl std::fmt::Display for ExtendedReal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:e}", self.value())
    }
}

/// 2^e as f64 for e in [-1022, 1023].
#[inline(always)]
fn pow2(e: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&e));
    f64::from_bits(((e + 1023) as u64) << 52)
}

/// 2^e, supporting the subnormal range via a two-step product.
#[inline]
fn pow2_wide(e: i32) -> f64 {
    if e >= -1022 {
        pow2(e)
    } else {
        pow2(-537) * pow2(e + 537)
    }
}

/// Integer mantissa and exponent with `value = m * 2^e`, trailing zeros
/// stripped. Zero decomposes to (0, 0).
fn decompose(x: f64) -> (u64, i32) {
    debug_assert!(x >= 0.0 && x.is_finite());
    let bits = x.to_bits();
    let exp_field = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    let (mut m, mut e) = if exp_field == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), exp_field - 1075)
    };
    if m == 0 {
        return (0, 0);
    }
    let tz = m.trailing_zeros();
    m >>= tz;
    e += tz as i32;
    (m, e)
}

impl ExtendedReal {
    pub const ZERO: ExtendedReal = ExtendedReal { hi: 0, lo: 0.0 };
    pub const ONE: ExtendedReal = ExtendedReal {
        hi: 1 << 60,
        lo: 0.0,
    };

    /// Exact decomposition of a float in [0, 2].
    pub fn from_f64(x: f64) -> Result<Self, PrecisionError> {
        if !(0.0..=2.0).contains(&x) || x.is_nan() {
            return Err(PrecisionError::OutOfRange(x));
        }
        Ok(Self::from_f64_wide(x))
    }

    /// Exact decomposition for any non-negative float below 8.0.
    #[inline]
    pub(crate) fn from_f64_wide(x: f64) -> Self {
        debug_assert!((0.0..8.0).contains(&x));
        // x * 2^60 is exact; trunc of a non-negative f64 equals floor; the
        // residual subtraction is exact by Sterbenz.
        let scaled = x * INV_UNIT;
        let hi = scaled as i64;
        ExtendedReal {
            hi: hi as u64,
            lo: x - (hi as f64) * UNIT,
        }
    }

    /// Nearest-f64 view of the value.
    #[inline(always)]
    pub fn value(&self) -> f64 {
        // hi < 2^63 so the signed conversion is a single exact instruction.
        (self.hi as i64 as f64) * UNIT + self.lo
    }

    #[inline(always)]
    pub fn is_zero(&self) -> bool {
        self.hi == 0 && self.lo == 0.0
    }

    #[inline(always)]
    pub fn is_positive(&self) -> bool {
        self.hi > 0 || self.lo > 0.0
    }

    /// Carry the integer part of `lo` into `hi`. `lo` must be non-negative.
    #[inline(always)]
    fn canon_nonneg(hi: u64, lo: f64) -> Result<Self, PrecisionError> {
        debug_assert!(lo >= 0.0);
        let c = (lo * INV_UNIT) as i64; // trunc == floor for lo >= 0
        let hi = hi
            .checked_add(c as u64)
            .filter(|&h| h < HI_CAP)
            .ok_or(PrecisionError::Overflow)?;
        Ok(ExtendedReal {
            hi,
            lo: lo - (c as f64) * UNIT,
        })
    }

    /// Sum of two values; `hi` overflow beyond the cap is an error.
    #[inline]
    pub fn add(self, rhs: Self) -> Result<Self, PrecisionError> {
        let hi = self
            .hi
            .checked_add(rhs.hi)
            .ok_or(PrecisionError::Overflow)?;
        Self::canon_nonneg(hi, self.lo + rhs.lo)
    }

    /// Difference `self - rhs`; negative results are errors.
    pub fn sub(self, rhs: Self) -> Result<Self, PrecisionError> {
        if self < rhs {
            return Err(PrecisionError::Negative);
        }
        let mut hi = self.hi - rhs.hi;
        let mut lo = self.lo - rhs.lo;
        if lo < 0.0 {
            hi -= 1; // hi >= 1 because self >= rhs
            lo += UNIT;
        }
        Ok(ExtendedReal { hi, lo })
    }

    /// Signed f64 perturbation, used by the division refinement.
    fn add_signed(self, d: f64) -> Result<Self, PrecisionError> {
        let lo = self.lo + d;
        if lo >= 0.0 {
            return Self::canon_nonneg(self.hi, lo);
        }
        let t = lo * INV_UNIT;
        let mut c = t as i64;
        if (c as f64) > t {
            c -= 1; // floor for negative residuals
        }
        let hi = self
            .hi
            .checked_add_signed(c)
            .filter(|&h| h < HI_CAP)
            .ok_or(PrecisionError::Negative)?;
        Ok(ExtendedReal {
            hi,
            lo: lo - (c as f64) * UNIT,
        })
    }

    /// Product with a positive float. The integer part is multiplied exactly
    /// in 128-bit arithmetic; only the residual recombination rounds, keeping
    /// the absolute error near 2^-111 for multipliers of order one.
    pub fn mul_f64(self, b: f64) -> Result<Self, PrecisionError> {
        if !(b > 0.0) || !b.is_finite() {
            return Err(PrecisionError::OutOfRange(b));
        }
        let (m, e) = decompose(b);
        let p = self.hi as u128 * m as u128;
        let (hi_add, lo1) = if e >= 0 {
            let shifted = p
                .checked_shl(e as u32)
                .filter(|&v| v < HI_CAP as u128)
                .ok_or(PrecisionError::Overflow)?;
            (shifted as u64, 0.0)
        } else {
            let s = -e as u32;
            if s <= 63 {
                let hi_part = p >> s;
                if hi_part >= HI_CAP as u128 {
                    return Err(PrecisionError::Overflow);
                }
                let rem = (p as u64) & ((1u64 << s) - 1);
                (hi_part as u64, (rem as f64) * pow2_wide(e - 60))
            } else if s < 128 {
                let hi_part = p >> s;
                if hi_part >= HI_CAP as u128 {
                    return Err(PrecisionError::Overflow);
                }
                let rem = p & ((1u128 << s) - 1);
                (hi_part as u64, (rem as f64) * pow2_wide(e - 60))
            } else {
                (0u64, (p as f64) * pow2_wide(e - 60))
            }
        };
        Self::canon_nonneg(hi_add, lo1 + self.lo * b)
    }

    /// Hot-path product with a multiplier in `[0.5, 1)`, whose exponent is
    /// fixed at -53. Single constant-shift reduction.
    #[inline(always)]
    pub(crate) fn mul_frac(self, b: f64) -> Self {
        debug_assert!((0.5..1.0).contains(&b));
        let m = (b.to_bits() & ((1u64 << 52) - 1)) | (1u64 << 52);
        let p = self.hi as u128 * m as u128;
        let hi_add = (p >> 53) as u64; // < HI_CAP: product shrinks
        let rem = (p as u64) & ((1u64 << 53) - 1);
        const REM_SCALE: f64 = 1.0 / ((1u128 << 113) as f64);
        let lo = (rem as f64) * REM_SCALE + self.lo * b;
        // lo < 2^-59, so the carry is 0 or 1 and the reduction is exact.
        let c = (lo * INV_UNIT) as i64;
        ExtendedReal {
            hi: hi_add + c as u64,
            lo: lo - (c as f64) * UNIT,
        }
    }

    /// Full product of two extended values. The hi x hi part is exact; the
    /// cross terms only need f64 accuracy because each is below 2^-60 times
    /// the other operand.
    pub fn mul(self, rhs: Self) -> Result<Self, PrecisionError> {
        let t1 = self.hi as u128 * rhs.hi as u128;
        let hi_part = t1 >> 60;
        if hi_part >= HI_CAP as u128 {
            return Err(PrecisionError::Overflow);
        }
        let rem = (t1 as u64) & ((1u64 << 60) - 1);
        const REM_SCALE: f64 = 1.0 / ((1u128 << 120) as f64);
        let cross = (self.hi as i64 as f64) * UNIT * rhs.lo + self.lo * rhs.value();
        Self::canon_nonneg(hi_part as u64, (rem as f64) * REM_SCALE + cross)
    }

    /// Quotient via an f64 estimate plus one Newton correction; relative
    /// error stays near 2^-103.
    pub fn div(self, rhs: Self) -> Result<Self, PrecisionError> {
        if !rhs.is_positive() {
            return Err(PrecisionError::NonPositiveDivisor);
        }
        let sf = rhs.value();
        let q0 = self.value() / sf;
        if !(0.0..8.0).contains(&q0) {
            return Err(PrecisionError::Overflow);
        }
        let q = Self::from_f64_wide(q0);
        let t = rhs.mul_f64(q0)?;
        // Residual self - t, exact in f64 because the hi difference is small.
        let dhi = self.hi as i64 - t.hi as i64;
        let r = (dhi as f64) * UNIT + (self.lo - t.lo);
        q.add_signed(r / sf)
    }

    /// Reciprocal.
    pub fn recip(self) -> Result<Self, PrecisionError> {
        Self::ONE.div(self)
    }

    /// Division by a positive integer. The integer part divides exactly and
    /// only the small remainder goes through f64, so the absolute error is
    /// bounded by 2^-112 regardless of `n`.
    pub fn div_u64(self, n: u64) -> Result<Self, PrecisionError> {
        if n == 0 {
            return Err(PrecisionError::NonPositiveDivisor);
        }
        let q = self.hi / n;
        let rem = self.hi % n;
        let lo = ((rem as f64) * UNIT + self.lo) / n as f64;
        Self::canon_nonneg(q, lo)
    }

    /// Exact doubling; the caller must know the result stays under the cap.
    #[inline(always)]
    pub(crate) fn double_unchecked(self) -> Self {
        debug_assert!(self.hi < HI_CAP / 2);
        ExtendedReal {
            hi: self.hi << 1,
            lo: self.lo * 2.0,
        }
    }

    /// -ln of the value, valid for any positive representable value.
    pub fn neg_log(&self) -> f64 {
        let v = self.value();
        if v >= f64::MIN_POSITIVE {
            -v.ln()
        } else {
            // Subnormal: hi is zero, read the residual's integer mantissa.
            debug_assert_eq!(self.hi, 0);
            let m = self.lo.to_bits() as f64; // lo subnormal: value = m * 2^-1074
            1074.0 * std::f64::consts::LN_2 - m.ln()
        }
    }

    /// Assemble from a 128-bit unit count plus a non-negative residual,
    /// as produced by internal product reductions.
    #[inline(always)]
    pub(crate) fn from_reduction(hi: u128, lo: f64) -> Result<Self, PrecisionError> {
        if hi >= HI_CAP as u128 {
            return Err(PrecisionError::Overflow);
        }
        Self::canon_nonneg(hi as u64, lo)
    }

    /// Raw representation (hi units of 2^-60, residual f64).
    pub fn to_parts(&self) -> (u64, f64) {
        (self.hi, self.lo)
    }

    /// Rebuild from raw parts, enforcing the canonical form.
    pub fn from_parts(hi: u64, lo: f64) -> Result<Self, PrecisionError> {
        if hi >= HI_CAP || !(0.0..UNIT).contains(&lo) {
            return Err(PrecisionError::NotCanonical { hi, lo });
        }
        Ok(ExtendedReal { hi, lo })
    }
}

/// Deterministic fixed-order sum. `hi` parts accumulate exactly; residuals
/// accumulate in 2^-113 fixed point, so the only error is one half-ulp
/// rounding per addend and the result is permutation-invariant.
pub fn ext_sum(items: &[ExtendedReal]) -> Result<ExtendedReal, PrecisionError> {
    let mut acc = ExtSumAccumulator::new();
    for x in items {
        acc.add(*x)?;
    }
    acc.finish()
}

/// Streaming form of [`ext_sum`] for single-pass loops.
#[derive(Default)]
pub struct ExtSumAccumulator {
    acc: i128, // units of 2^-113
}

impl ExtSumAccumulator {
    #[inline]
    pub fn new() -> Self {
        Self { acc: 0 }
    }

    #[inline(always)]
    pub fn add(&mut self, x: ExtendedReal) -> Result<(), PrecisionError> {
        debug_assert!(x.lo >= 0.0 && x.lo < UNIT);
        // Round-half-up via truncation: one SSE2 conversion, no libm.
        let units =
            ((x.hi as i128) << 53) + (x.lo * LO_SUM_SCALE + 0.5) as i64 as i128;
        self.acc = self
            .acc
            .checked_add(units)
            .ok_or(PrecisionError::Overflow)?;
        Ok(())
    }

    pub fn finish(self) -> Result<ExtendedReal, PrecisionError> {
        let hi = self.acc >> 53;
        if hi < 0 || hi >= HI_CAP as i128 {
            return Err(PrecisionError::Overflow);
        }
        // The masked residual is below 2^53, so the conversion is exact.
        let rem = (self.acc & ((1i128 << 53) - 1)) as u64;
        Ok(ExtendedReal {
            hi: hi as u64,
            lo: (rem as f64) * LO_SUM_INV,
        })
    }
}

/// Format a float as an exact C99-style hexadecimal literal, e.g. `0x1.8p-61`
/// in reduced integer-mantissa form `0x3p-62`.
pub fn f64_to_hex(x: f64) -> String {
    assert!(x >= 0.0 && x.is_finite(), "only finite non-negative values");
    if x == 0.0 {
        return "0x0p0".to_string();
    }
    let (m, e) = decompose(x);
    format!("0x{m:x}p{e}")
}

/// Parse the output of [`f64_to_hex`] back, bit-exactly.
pub fn f64_from_hex(s: &str) -> Result<f64, PrecisionError> {
    let body = s
        .strip_prefix("0x")
        .ok_or_else(|| PrecisionError::Parse(s.to_string()))?;
    let (mant, exp) = body
        .split_once('p')
        .ok_or_else(|| PrecisionError::Parse(s.to_string()))?;
    let m = u64::from_str_radix(mant, 16).map_err(|e| PrecisionError::Parse(e.to_string()))?;
    let e: i32 = exp
        .parse()
        .map_err(|e: std::num::ParseIntError| PrecisionError::Parse(e.to_string()))?;
    if m == 0 {
        return Ok(0.0);
    }
    if m > (1 << 53) || !(-1126..=1023).contains(&e) {
        return Err(PrecisionError::Parse(format!("out of range: {s}")));
    }
    // m <= 2^53 converts exactly; the two-step scale is exact for any value
    // that originated as an f64.
    let v = (m as f64) * pow2_wide(e);
    if !v.is_finite() {
        return Err(PrecisionError::Parse(format!("out of range: {s}")));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Exact integer image of a non-negative f64 at scale 2^1200.
    fn big_f64(x: f64) -> BigInt {
        let (m, e) = decompose(x);
        BigInt::from(m) << (1200 + e) as u32
    }

    fn big_ext(x: &ExtendedReal) -> BigInt {
        let (hi, lo) = x.to_parts();
        (BigInt::from(hi) << 1140u32) + big_f64(lo)
    }

    /// |impl - exact| <= tol_log2 relative, checked in exact arithmetic:
    /// |impl - exact| * 2^k <= exact  with k = -tol_log2.
    fn assert_rel_close(actual: &BigInt, exact: &BigInt, tol_log2: i32) {
        let diff = (actual - exact).magnitude().clone();
        let bound = exact.magnitude().clone();
        assert!(
            (diff << (-tol_log2) as u32) <= bound,
            "relative error above 2^{tol_log2}"
        );
    }

    #[test]
    fn from_f64_zero_and_one() {
        assert_eq!(ExtendedReal::from_f64(0.0).unwrap().to_parts(), (0, 0.0));
        assert_eq!(
            ExtendedReal::from_f64(1.0).unwrap().to_parts(),
            (1 << 60, 0.0)
        );
    }

    #[test]
    fn from_f64_is_exact_against_oracle() {
        // 0.3 plus a spread of awkward values: decomposition must be exact.
        let mut rng = ChaCha8Rng::from_seed([3; 32]);
        let mut values = vec![0.3, 1.5, 2.0, 1e-9, 1e-300, UNIT, UNIT * 0.999];
        values.extend((0..200).map(|_| rng.random::<f64>() * 2.0));
        for x in values {
            let e = ExtendedReal::from_f64(x).unwrap();
            assert_eq!(big_ext(&e), big_f64(x), "decomposition not exact for {x}");
            let (hi, lo) = e.to_parts();
            assert!(lo >= 0.0 && lo < UNIT, "not canonical for {x}: {hi} {lo}");
        }
    }

    #[test]
    fn from_f64_rejects_out_of_range() {
        assert!(ExtendedReal::from_f64(-0.1).is_err());
        assert!(ExtendedReal::from_f64(2.5).is_err());
        assert!(ExtendedReal::from_f64(f64::NAN).is_err());
    }

    #[test]
    fn add_identity_and_dyadic() {
        let one = ExtendedReal::ONE;
        assert_eq!(one.add(ExtendedReal::ZERO).unwrap(), one);
        let tiny = ExtendedReal::from_f64(2f64.powi(-70)).unwrap();
        let sum = tiny.add(tiny).unwrap();
        assert_eq!(sum.value(), 2f64.powi(-69));
        assert_eq!(big_ext(&sum), big_f64(2f64.powi(-69)));
    }

    #[test]
    fn add_matches_oracle_on_random_pairs() {
        // Operands at the normalisation scale [1/4, 1], where the 2^-110
        // relative bound is meaningful for the fixed-point residual.
        let mut rng = ChaCha8Rng::from_seed([7; 32]);
        for _ in 0..100_000 {
            let a = ExtendedReal::from_f64(0.25 + 0.75 * rng.random::<f64>()).unwrap();
            let b = ExtendedReal::from_f64(0.25 + 0.75 * rng.random::<f64>()).unwrap();
            let s = a.add(b).unwrap();
            let exact = big_ext(&a) + big_ext(&b);
            assert_rel_close(&big_ext(&s), &exact, -110);
        }
    }

    #[test]
    fn sum_of_equal_thousandths_is_one() {
        let x = ExtendedReal::from_f64(0.001).unwrap();
        let total = ext_sum(&vec![x; 1000]).unwrap();
        assert!((total.value() - 1.0).abs() < 1e-15);
        let exact = big_f64(0.001) * 1000u32;
        let diff = (big_ext(&total) - &exact).magnitude().clone();
        // 1e-30 relative of a total near 1, at scale 2^1200
        assert!(diff < (BigInt::from(1u8) << (1200u32 - 100)).magnitude().clone());
    }

    #[test]
    fn sum_empty_is_zero() {
        assert_eq!(ext_sum(&[]).unwrap(), ExtendedReal::ZERO);
    }

    #[test]
    fn sum_geometric_is_exact() {
        let xs: Vec<ExtendedReal> = (1..=60)
            .map(|n| ExtendedReal::from_f64(2f64.powi(-n)).unwrap())
            .collect();
        let total = ext_sum(&xs).unwrap();
        assert_eq!(big_ext(&total), big_f64(1.0) - big_f64(2f64.powi(-60)));
    }

    #[test]
    fn sum_matches_oracle_and_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::from_seed([9; 32]);
        let mut xs: Vec<ExtendedReal> = (0..10_000)
            .map(|_| ExtendedReal::from_f64(rng.random::<f64>() * 1e-4).unwrap())
            .collect();
        let total = ext_sum(&xs).unwrap();
        let exact: BigInt = xs.iter().map(big_ext).sum();
        assert_rel_close(&big_ext(&total), &exact, -100); // 1e-30
        xs.shuffle(&mut rng);
        assert_eq!(ext_sum(&xs).unwrap(), total);
    }

    #[test]
    fn sum_overflow_reported() {
        let two = ExtendedReal::from_f64(2.0).unwrap();
        assert_eq!(ext_sum(&vec![two; 5]), Err(PrecisionError::Overflow));
    }

    #[test]
    fn div_unit_cases() {
        let half = ExtendedReal::from_f64(0.5).unwrap();
        assert_eq!(half.div(ExtendedReal::ONE).unwrap(), half);
        let a = ExtendedReal::from_f64(0.7310529).unwrap();
        let q = a.div(a).unwrap();
        let diff = (big_ext(&q) - big_f64(1.0)).magnitude().clone();
        assert!(diff <= (BigInt::from(1u8) << (1200u32 - 100)).magnitude().clone());
    }

    #[test]
    fn div_matches_oracle() {
        // |q*s - a| <= 2^-100 * a, all exact in big integers. Operands at the
        // normalisation scale, where the relative bound is meaningful.
        let mut rng = ChaCha8Rng::from_seed([11; 32]);
        for _ in 0..20_000 {
            let a = ExtendedReal::from_f64(0.25 + 0.75 * rng.random::<f64>()).unwrap();
            let s = ExtendedReal::from_f64(0.5 + 1.5 * rng.random::<f64>()).unwrap();
            let q = a.div(s).unwrap();
            let lhs = ((big_ext(&q) * big_ext(&s)) >> 1200u32) - big_ext(&a);
            let bound = big_ext(&a) >> 100u32;
            assert!(
                lhs.magnitude() <= bound.magnitude(),
                "division error above 2^-100"
            );
        }
    }

    #[test]
    fn div_small_quotients_keep_absolute_resolution() {
        // Tiny results are limited by the 2^-113 grid, not the relative
        // bound: |q - a/s| <= max(2^-100 q, 2^-109).
        let mut rng = ChaCha8Rng::from_seed([12; 32]);
        for _ in 0..20_000 {
            let scale = 10f64.powi(-(rng.random_range(0..30) as i32));
            let a = ExtendedReal::from_f64(rng.random::<f64>() * scale).unwrap();
            let s = ExtendedReal::from_f64(0.5 + 1.5 * rng.random::<f64>()).unwrap();
            if !a.is_positive() {
                continue;
            }
            let q = a.div(s).unwrap();
            let err = ((big_ext(&q) * big_ext(&s)) >> 1200u32) - big_ext(&a);
            let bound_rel = big_ext(&a) >> 100u32;
            let bound_abs = big_ext(&s) >> 109u32;
            let bound = bound_rel.max(bound_abs);
            assert!(
                err.magnitude() <= bound.magnitude(),
                "division error above the dual bound"
            );
        }
    }

    #[test]
    fn div_rejects_zero() {
        assert_eq!(
            ExtendedReal::ONE.div(ExtendedReal::ZERO),
            Err(PrecisionError::NonPositiveDivisor)
        );
    }

    #[test]
    fn mul_matches_oracle() {
        let mut rng = ChaCha8Rng::from_seed([13; 32]);
        for _ in 0..20_000 {
            let a = ExtendedReal::from_f64(rng.random::<f64>() * 2.0).unwrap();
            let b = ExtendedReal::from_f64(rng.random::<f64>()).unwrap();
            let p = a.mul(b).unwrap();
            let exact = (big_ext(&a) * big_ext(&b)) >> 1200u32;
            let diff = (big_ext(&p) - &exact).magnitude().clone();
            assert!(
                diff <= (BigInt::from(1u8) << (1200u32 - 109)).magnitude().clone(),
                "mul absolute error above 2^-109"
            );
        }
    }

    #[test]
    fn mul_f64_matches_oracle_across_scales() {
        let mut rng = ChaCha8Rng::from_seed([17; 32]);
        for i in 0..20_000 {
            let a = ExtendedReal::from_f64(rng.random::<f64>() * 2.0).unwrap();
            let b = match i % 4 {
                0 => 0.5 + 0.5 * rng.random::<f64>(),  // tax-rate range
                1 => 1.0 + 3.0 * rng.random::<f64>(),  // factor range
                2 => rng.random::<f64>() * 1e-40,      // redistribution range
                _ => rng.random::<f64>() * 2e-300,     // extreme underflow
            };
            if b <= 0.0 {
                continue;
            }
            let p = a.mul_f64(b).unwrap();
            let exact = (big_ext(&a) * big_f64(b)) >> 1200u32;
            let diff = (big_ext(&p) - &exact).magnitude().clone();
            assert!(
                diff <= (BigInt::from(1u8) << (1200u32 - 109)).magnitude().clone(),
                "mul_f64 absolute error above 2^-109 (b={b})"
            );
        }
    }

    #[test]
    fn mul_frac_agrees_with_general_path() {
        let mut rng = ChaCha8Rng::from_seed([19; 32]);
        for _ in 0..50_000 {
            let a = ExtendedReal::from_f64(rng.random::<f64>() * 2.0).unwrap();
            let b = 0.5 + 0.5 * rng.random::<f64>();
            if b >= 1.0 {
                continue;
            }
            assert_eq!(a.mul_frac(b), a.mul_f64(b).unwrap());
        }
    }

    #[test]
    fn sub_and_negative() {
        let a = ExtendedReal::from_f64(0.75).unwrap();
        let b = ExtendedReal::from_f64(0.25).unwrap();
        assert_eq!(a.sub(b).unwrap().value(), 0.5);
        assert_eq!(b.sub(a), Err(PrecisionError::Negative));
    }

    #[test]
    fn roundtrip_value_identity() {
        let mut rng = ChaCha8Rng::from_seed([23; 32]);
        for _ in 0..100_000 {
            let x = rng.random::<f64>() * 2.0;
            assert_eq!(ExtendedReal::from_f64(x).unwrap().value(), x);
        }
    }

    #[test]
    fn neg_log_spans_subnormals() {
        let x = ExtendedReal::from_f64(1e-320).unwrap();
        assert!((x.neg_log() - (-(1e-320f64).ln())).abs() < 1e-9);
        let y = ExtendedReal::from_f64(0.25).unwrap();
        assert!((y.neg_log() - std::f64::consts::LN_2 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn ordering_is_value_order() {
        let a = ExtendedReal::from_f64(0.3).unwrap();
        let b = ExtendedReal::from_f64(0.30000000000000004).unwrap();
        assert!(a < b);
        assert!(a < ExtendedReal::ONE);
    }

    #[test]
    fn hexfloat_roundtrip() {
        let cases = [
            0.0,
            1.0,
            0.3,
            UNIT,
            f64::MIN_POSITIVE,
            5e-324,
            1.2345678901234567e-100,
            1.999999999999999,
        ];
        for &x in &cases {
            let s = f64_to_hex(x);
            assert_eq!(f64_from_hex(&s).unwrap().to_bits(), x.to_bits(), "{s}");
        }
        let mut rng = ChaCha8Rng::from_seed([29; 32]);
        for _ in 0..50_000 {
            let x = f64::from_bits(rng.random::<u64>() & 0x7fff_ffff_ffff_ffff);
            if !x.is_finite() {
                continue;
            }
            let s = f64_to_hex(x);
            assert_eq!(f64_from_hex(&s).unwrap().to_bits(), x.to_bits(), "{s}");
        }
    }

    #[test]
    fn div_u64_matches_oracle() {
        let mut rng = ChaCha8Rng::from_seed([31; 32]);
        for _ in 0..20_000 {
            let a = ExtendedReal::from_f64(rng.random::<f64>() * 2.0).unwrap();
            let n = rng.random_range(1u64..100_000);
            let q = a.div_u64(n).unwrap();
            let lhs = (big_ext(&q) * n) - big_ext(&a);
            assert!(
                lhs.magnitude() <= (BigInt::from(n) << (1200u32 - 110)).magnitude(),
                "div_u64 error above n * 2^-110"
            );
        }
    }

    #[test]
    fn from_parts_validates() {
        assert!(ExtendedReal::from_parts(1 << 60, 0.0).is_ok());
        assert!(ExtendedReal::from_parts(0, UNIT).is_err());
        assert!(ExtendedReal::from_parts(u64::MAX, 0.0).is_err());
        assert!(ExtendedReal::from_parts(0, -1e-30).is_err());
    }
}
