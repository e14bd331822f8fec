//! Arbitrary-precision bisection for ε(k, β, N), written independently of the
//! library solver.
//!
//! With `u = 1 − ε` and `t_m = C(m,k)/C(N,k) · u^{m−N}` the defining equation is
//!
//! ```text
//! β/(2N) Σ_{m=k}^{N-1} t_m + β/(6N) Σ_{m=N+1}^{4N} t_m = 1
//! ```
//!
//! Starting from `t_N = 1`, the terms follow from the exact recurrences
//! `t_{m−1} = t_m (m−k) / (m u)` and `t_{m+1} = t_m (m+1) u / (m+1−k)`. Every term is
//! at most 1 near the root, so binary fixed point with a few hundred fractional bits
//! keeps the left side accurate to far more than 50 significant digits there.

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};
use std::cmp::Ordering;

/// Fractional bits of the fixed-point representation (~96 decimal digits).
const FRAC_BITS: usize = 320;
/// Bisection steps on ε; 2^-200 is below 60 significant digits.
const STEPS: usize = 200;

fn fixed(x: &BigInt) -> BigInt {
    x << FRAC_BITS
}

/// `(mantissa, exponent)` with `x = mantissa · 2^exponent` exactly.
fn dyadic(x: f64) -> (BigInt, i64) {
    assert!(x.is_finite() && x > 0.0);
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    if exp == 0 {
        (BigInt::from(frac), -1074)
    } else {
        (BigInt::from(frac | (1u64 << 52)), exp - 1075)
    }
}

fn times_dyadic(x: &BigInt, (mant, exp): &(BigInt, i64)) -> BigInt {
    let p = x * mant;
    if *exp >= 0 {
        p << *exp as usize
    } else {
        p >> (-*exp) as usize
    }
}

/// Sign of `LHS(1 − u) − 1`, with `u` in fixed point.
fn sign(k: u64, n: u64, beta: &(BigInt, i64), u: &BigInt) -> Ordering {
    let one = fixed(&BigInt::one());
    let mut below = BigInt::zero();
    let mut t = one.clone();
    for m in ((k + 1)..=n).rev() {
        // t_{m-1} = t_m (m − k) / (m u)
        t = ((&t * BigInt::from(m - k)) << FRAC_BITS) / (u * BigInt::from(m));
        below += &t;
    }
    let mut above = BigInt::zero();
    let mut t = one.clone();
    for m in n..4 * n {
        // t_{m+1} = t_m (m + 1) u / (m + 1 − k)
        t = ((&t * u) >> FRAC_BITS) * BigInt::from(m + 1) / BigInt::from(m + 1 - k);
        above += &t;
    }
    // LHS − 1 scaled by 6N: 3 β Σ_below + β Σ_above − 6N
    let lhs = times_dyadic(&(below * 3 + above), beta);
    lhs.cmp(&(one * BigInt::from(6 * n)))
}

fn to_f64(x: &BigInt) -> f64 {
    let bits = x.bits() as i64;
    let drop = (bits - 64).max(0);
    let head = (x >> drop as usize).to_f64().unwrap();
    head * 2f64.powi((drop - FRAC_BITS as i64) as i32)
}

/// ε(k, β, N) to roughly 60 significant digits, rounded to a double.
pub fn epsilon(k: usize, beta: f64, n: usize) -> f64 {
    assert!(k <= n && n >= 1);
    if k == n {
        return 1.0;
    }
    let (k, n) = (k as u64, n as u64);
    let beta = dyadic(beta);
    let one = fixed(&BigInt::one());
    // ε ∈ [k/N, 1 − 2^-200], stored as u = 1 − ε.
    let mut u_hi = &one - fixed(&BigInt::from(k)) / BigInt::from(n);
    let mut u_lo = &one >> 200;
    assert_eq!(
        sign(k, n, &beta, &u_hi),
        Ordering::Less,
        "no root above k/N for ({k}, {n})"
    );
    assert_eq!(
        sign(k, n, &beta, &u_lo),
        Ordering::Greater,
        "no root below 1 for ({k}, {n})"
    );
    for _ in 0..STEPS {
        let mid: BigInt = (&u_lo + &u_hi) >> 1;
        match sign(k, n, &beta, &mid) {
            Ordering::Less => u_hi = mid,
            Ordering::Greater => u_lo = mid,
            Ordering::Equal => {
                u_lo = mid.clone();
                u_hi = mid;
                break;
            }
        }
    }
    let u: BigInt = (&u_lo + &u_hi) >> 1;
    let eps: BigInt = &one - &u;
    assert!(!eps.is_negative());
    to_f64(&eps)
}
