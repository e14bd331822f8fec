//! Scenario-theory risk level `ε(k, β, N)` and the resulting guarantee statement.
//!
//! `ε` is the root in `[k/N, 1]` of
//!
//! ```text
//! β/(2N) Σ_{m=k}^{N-1} C(m,k)/C(N,k) (1-ε)^{m-N} + β/(6N) Σ_{m=N+1}^{4N} C(m,k)/C(N,k) (1-ε)^{m-N} = 1
//! ```
//!
//! with `ε(N, β, N) = 1`. The left side is evaluated in log space: binomial ratios
//! are accumulated as sums of `ln(1 − k/(m+1))` terms and powers as
//! `(m−N)·ln(1−ε)`, so nothing overflows for `N` in the millions.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lipschitz::ConstantSet;
use crate::synthesis::SynthesisResult;

/// Number of probes used to look for additional sign changes before bisecting.
const SCAN_POINTS: usize = 32;

/// Precomputed `ln(C(m,k)/C(N,k))` for both sums of the left side.
struct LogRatios {
    /// Entries for `m = k..N-1`, paired with `m − N`.
    below: Vec<(f64, f64)>,
    /// Entries for `m = N+1..4N`, paired with `m − N`.
    above: Vec<(f64, f64)>,
    log_weight_below: f64,
    log_weight_above: f64,
}

/// Neumaier-compensated running sum.
#[derive(Default)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl LogRatios {
    fn new(k: usize, beta: f64, n: usize) -> Self {
        let kf = k as f64;
        let nf = n as f64;
        // ln C(m,k) − ln C(m+1,k) = ln(1 − k/(m+1))
        let mut below = Vec::with_capacity(n - k);
        let mut acc = CompensatedSum::default();
        for m in (k..n).rev() {
            acc.add((-kf / (m as f64 + 1.0)).ln_1p());
            below.push((acc.value(), m as f64 - nf));
        }
        below.reverse();
        let mut above = Vec::with_capacity(3 * n);
        let mut acc = CompensatedSum::default();
        for m in n..4 * n {
            acc.add(-(-kf / (m as f64 + 1.0)).ln_1p());
            above.push((acc.value(), (m + 1) as f64 - nf));
        }
        Self {
            below,
            above,
            log_weight_below: (beta / (2.0 * nf)).ln(),
            log_weight_above: (beta / (6.0 * nf)).ln(),
        }
    }

    /// `ln LHS(ε)`.
    fn log_lhs(&self, eps: f64) -> f64 {
        let log_base = (-eps).ln_1p();
        let exponent = |(r, p): &(f64, f64), w: f64| r + p * log_base + w;
        let max = self
            .below
            .iter()
            .map(|t| exponent(t, self.log_weight_below))
            .chain(self.above.iter().map(|t| exponent(t, self.log_weight_above)))
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return max;
        }
        let mut sum = CompensatedSum::default();
        for t in &self.below {
            sum.add((exponent(t, self.log_weight_below) - max).exp());
        }
        for t in &self.above {
            sum.add((exponent(t, self.log_weight_above) - max).exp());
        }
        max + sum.value().ln()
    }
}

fn check_args(k: usize, beta: f64, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count N must be at least 1".into()));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!("compression size {k} exceeds N = {n}")));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidArgument(format!("β must lie in (0, 1), got {beta}")));
    }
    Ok(())
}

/// `|LHS(ε) − 1|`, the relative residual of the defining equation.
pub fn residual(k: usize, beta: f64, n: usize, eps: f64) -> Result<f64> {
    check_args(k, beta, n)?;
    if k == n {
        return Ok(0.0);
    }
    Ok(LogRatios::new(k, beta, n).log_lhs(eps).exp_m1().abs())
}

/// `ε(k, β, N)`.
pub fn epsilon(k: usize, beta: f64, n: usize) -> Result<f64> {
    epsilon_with_residual(k, beta, n).map(|(e, _)| e)
}

/// `ε(k, β, N)` together with the residual `|LHS(ε) − 1|` at the returned root.
pub fn epsilon_with_residual(k: usize, beta: f64, n: usize) -> Result<(f64, f64)> {
    check_args(k, beta, n)?;
    if k == n {
        return Ok((1.0, 0.0));
    }
    let ratios = LogRatios::new(k, beta, n);
    let g = |e: f64| ratios.log_lhs(e);

    let lower = k as f64 / n as f64;
    let upper = 1.0 - f64::EPSILON / 2.0;
    let g_lower = g(lower);
    let g_upper = g(upper);
    if g_lower == 0.0 {
        return Ok((lower, 0.0));
    }

    // Probe the bracket for sign changes; the root is unique in theory, so more
    // than one is reported instead of guessed.
    let mut probes = Vec::with_capacity(SCAN_POINTS + 1);
    for i in 0..=SCAN_POINTS {
        let e = match i {
            0 => lower,
            i if i == SCAN_POINTS => upper,
            i => lower + (upper - lower) * i as f64 / SCAN_POINTS as f64,
        };
        let v = match i {
            0 => g_lower,
            i if i == SCAN_POINTS => g_upper,
            _ => g(e),
        };
        probes.push((e, v));
    }
    let brackets: Vec<(f64, f64)> = probes
        .windows(2)
        .filter(|w| (w[0].1 < 0.0) != (w[1].1 < 0.0))
        .map(|w| (w[0].0, w[1].0))
        .collect();
    match brackets.len() {
        0 => {
            return Err(Error::NumericalBracket {
                k,
                beta,
                n,
                lower_residual: g_lower.exp_m1(),
                upper_residual: g_upper.exp_m1(),
            })
        }
        1 => {}
        count => return Err(Error::MultipleRoots { k, n, count, brackets }),
    }

    let (mut lo, mut hi) = brackets[0];
    let mut g_lo = g(lo);
    let mut g_hi = g(hi);
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let g_mid = g(mid);
        if g_mid == 0.0 {
            return Ok((mid, 0.0));
        }
        if (g_mid < 0.0) == (g_lo < 0.0) {
            lo = mid;
            g_lo = g_mid;
        } else {
            hi = mid;
            g_hi = g_mid;
        }
    }
    let (root, g_root) = if g_lo.abs() <= g_hi.abs() {
        (lo, g_lo)
    } else {
        (hi, g_hi)
    };
    Ok((root, g_root.exp_m1().abs()))
}

/// `(k, β, N, ε)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PacBound {
    pub compression_size: usize,
    pub confidence_param: f64,
    pub sample_count: usize,
    pub epsilon: f64,
    pub residual: f64,
}

impl PacBound {
    pub fn new(compression_size: usize, beta: f64, sample_count: usize) -> Result<Self> {
        let (epsilon, residual) = epsilon_with_residual(compression_size, beta, sample_count)?;
        Ok(Self {
            compression_size,
            confidence_param: beta,
            sample_count,
            epsilon,
            residual,
        })
    }

    pub fn is_vacuous(&self) -> bool {
        self.epsilon >= 1.0
    }
}

/// Continuous-time guarantee issued for a successful synthesis run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GuaranteeStatement {
    pub bound: PacBound,
    pub d_used: f64,
    pub constants: ConstantSet,
    pub caveats: Vec<String>,
    pub statement: String,
}

/// Packages a successful run and its bound into a [`GuaranteeStatement`].
pub fn assemble_guarantee(result: &SynthesisResult, bound: PacBound) -> Result<GuaranteeStatement> {
    if !result.is_success() {
        return Err(Error::SynthesisNotSuccessful);
    }
    if bound.compression_size != result.compression.indices.len() {
        return Err(Error::CompressionMismatch {
            bound_k: bound.compression_size,
            actual: result.compression.indices.len(),
        });
    }
    let mut caveats = Vec::new();
    if bound.is_vacuous() {
        caveats.push("vacuous bound: the compression set contains every sample, so ε = 1".to_string());
    }
    if result.constants.asymptotic() {
        caveats.push(
            "Lipschitz constants are sampled max-slope estimates (asymptotically convergent, inflated by the recorded safety factor)"
                .to_string(),
        );
    }
    caveats.push("initial-set and unsafe-set infima/suprema are evaluated on finite grids".to_string());
    let statement = format!(
        "With confidence at least {:.6} over the draw of the {} sampled trajectories, \
         the probability that a new continuous-time trajectory violates the barrier \
         conditions (initial/unsafe sign conditions and the derivative condition) is at most \
         ε = {:.6} (compression size {}, tightening d = {:.6e}).",
        1.0 - bound.confidence_param,
        bound.sample_count,
        bound.epsilon,
        bound.compression_size,
        result.d_used,
    );
    Ok(GuaranteeStatement {
        bound,
        d_used: result.d_used,
        constants: result.constants,
        caveats,
        statement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_compression_gives_one() {
        for (beta, n) in [(0.01, 1000), (1e-5, 100), (0.5, 1)] {
            assert_eq!(epsilon(n, beta, n).unwrap(), 1.0);
        }
    }

    #[test]
    fn root_lies_in_bracket_with_small_residual() {
        for (k, beta, n) in [
            (0, 0.01, 1000),
            (5, 0.01, 1000),
            (3, 1e-5, 100),
            (60, 1e-5, 100),
            (0, 0.9, 1),
        ] {
            let (e, r) = epsilon_with_residual(k, beta, n).unwrap();
            assert!(e >= k as f64 / n as f64 && e <= 1.0, "{k} {beta} {n}: {e}");
            assert!(r <= 1e-9, "{k} {beta} {n}: residual {r}");
            assert!((residual(k, beta, n, e).unwrap() - r).abs() < 1e-15);
        }
    }

    #[test]
    fn near_vacuous_root_is_best_double() {
        // ε ≈ 1 − 5e-10 where the slope of the left side is ~2e9, so one ulp moves
        // the residual by ~1e-7; the root is still bracketed by its neighbours.
        let (e, r) = epsilon_with_residual(99, 1e-5, 100).unwrap();
        assert!(e > 0.999_999_999 && e < 1.0);
        let below = LogRatios::new(99, 1e-5, 100).log_lhs(f64::from_bits(e.to_bits() - 1));
        let above = LogRatios::new(99, 1e-5, 100).log_lhs(f64::from_bits(e.to_bits() + 1));
        assert!(below.abs() >= r.ln_1p() || above.abs() >= r.ln_1p());
        assert!((below < 0.0) != (above < 0.0));
        assert!(r < 1e-6);
    }

    #[test]
    fn invalid_arguments() {
        assert!(epsilon(0, 0.0, 10).is_err());
        assert!(epsilon(0, 1.0, 10).is_err());
        assert!(epsilon(11, 0.5, 10).is_err());
        assert!(epsilon(0, 0.5, 0).is_err());
    }

    #[test]
    fn binomial_ratios_match_direct_products() {
        let r = LogRatios::new(2, 0.1, 5);
        // m = 2: C(2,2)/C(5,2) = 1/10
        assert!((r.below[0].0 - (0.1f64).ln()).abs() < 1e-14);
        assert_eq!(r.below[0].1, -3.0);
        // m = 6: C(6,2)/C(5,2) = 15/10
        assert!((r.above[0].0 - 1.5f64.ln()).abs() < 1e-14);
        assert_eq!(r.above[0].1, 1.0);
        assert_eq!(r.above.len(), 15);
    }

    #[test]
    fn huge_sample_counts_stay_finite() {
        let (e, r) = epsilon_with_residual(10, 1e-6, 1_000_000).unwrap();
        assert!(e.is_finite() && e > 1e-5 && e < 1e-3, "{e}");
        assert!(r <= 1e-9);
    }
}
