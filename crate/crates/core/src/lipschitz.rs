//! Sampling estimates of the constants `𝓛_f`, `𝓜_f`, `𝓛_B`, `𝓜_B` that enter the
//! tightening parameter.
//!
//! The Lipschitz estimate is the classical max-slope scheme: the largest observed
//! `‖g(x) − g(y)‖ / ‖x − y‖` over random pairs. It converges from below as the
//! number of pairs grows, so every estimate is inflated by a recorded safety
//! factor and flagged as asymptotic.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certificate::NeuralCertificate;
use crate::dynamics::{indexed_rng, BoxRegion, SystemModel};
use crate::error::{Error, Result};

pub const DEFAULT_SAFETY_FACTOR: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    MaxSlope,
    SuppliedAnalytic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantEstimate {
    /// Inflated value used downstream.
    pub value: f64,
    /// Largest raw sampled slope or norm.
    pub raw: f64,
    pub samples_used: usize,
    pub safety_factor: f64,
    pub method: EstimateMethod,
}

impl ConstantEstimate {
    pub fn analytic(value: f64) -> Self {
        Self {
            value,
            raw: value,
            samples_used: 0,
            safety_factor: 1.0,
            method: EstimateMethod::SuppliedAnalytic,
        }
    }

    /// Sampled estimates only converge from below.
    pub fn is_asymptotic(&self) -> bool {
        self.method == EstimateMethod::MaxSlope
    }
}

fn check_safety(safety_factor: f64) -> Result<()> {
    if !(safety_factor >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "safety factor must be at least 1, got {safety_factor}"
        )));
    }
    Ok(())
}

fn distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Odd-indexed pairs are short range: `y` lies within `diameter / 100` of `x`.
fn sample_pair(domain: &BoxRegion, seed: u64, index: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = indexed_rng(seed, index as u64);
    let x = domain.sample(&mut rng);
    if index.is_multiple_of(2) {
        let y = domain.sample(&mut rng);
        (x, y)
    } else {
        let radius = domain.diameter() / 100.0;
        let y = x
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let (lo, hi) = (domain.lower()[i], domain.upper()[i]);
                let step = radius / (x.len() as f64).sqrt();
                (v + rng.gen_range(-step..=step)).clamp(lo, hi)
            })
            .collect();
        (x, y)
    }
}

/// Max-slope Lipschitz estimate of `map` over `domain` from `pairs` random pairs.
///
/// Pair `i` depends only on `(seed, i)`, so the raw maximum is non-decreasing in
/// `pairs` for a fixed seed. Coincident pairs are skipped.
pub fn estimate_lipschitz<F>(
    map: F,
    domain: &BoxRegion,
    pairs: usize,
    seed: u64,
    safety_factor: f64,
) -> Result<ConstantEstimate>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    if pairs == 0 {
        return Err(Error::InvalidArgument("need at least one pair".into()));
    }
    check_safety(safety_factor)?;
    let raw = (0..pairs)
        .into_par_iter()
        .map(|i| {
            let (x, y) = sample_pair(domain, seed, i);
            let dx = distance(&x, &y);
            if dx == 0.0 {
                return 0.0;
            }
            distance(&map(&x), &map(&y)) / dx
        })
        .reduce(|| 0.0, f64::max);
    Ok(ConstantEstimate {
        value: safety_factor * raw,
        raw,
        samples_used: pairs,
        safety_factor,
        method: EstimateMethod::MaxSlope,
    })
}

/// Sampled estimate of `sup ‖map(x)‖` over `domain`. The box corners are always
/// included since norms of smooth maps are often maximal there.
pub fn estimate_bound<F>(
    map: F,
    domain: &BoxRegion,
    points: usize,
    seed: u64,
    safety_factor: f64,
) -> Result<ConstantEstimate>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    check_safety(safety_factor)?;
    let norm = |x: &[f64]| map(x).iter().map(|v| v * v).sum::<f64>().sqrt();
    let sampled = (0..points)
        .into_par_iter()
        .map(|i| {
            let mut rng = indexed_rng(seed, i as u64);
            norm(&domain.sample(&mut rng))
        })
        .reduce(|| 0.0, f64::max);
    let corners = domain.lattice(2).iter().map(|c| norm(c)).fold(0.0, f64::max);
    let raw = sampled.max(corners);
    Ok(ConstantEstimate {
        value: safety_factor * raw,
        raw,
        samples_used: points + (1 << domain.dim()),
        safety_factor,
        method: EstimateMethod::MaxSlope,
    })
}

/// `(𝓛_f, 𝓜_f)` for a system; analytic values on the model take precedence.
pub fn system_constants(
    system: &SystemModel,
    domain: &BoxRegion,
    samples: usize,
    seed: u64,
    safety_factor: f64,
) -> Result<(ConstantEstimate, ConstantEstimate)> {
    let map = |x: &[f64]| {
        let mut out = vec![0.0; system.dim()];
        system.eval_into(x, &mut out);
        out
    };
    let lipschitz = match system.lipschitz_f {
        Some(v) => ConstantEstimate::analytic(v),
        None => estimate_lipschitz(map, domain, samples, seed, safety_factor)?,
    };
    let bound = match system.bound_f {
        Some(v) => ConstantEstimate::analytic(v),
        None => estimate_bound(map, domain, samples, seed.wrapping_add(1), safety_factor)?,
    };
    Ok((lipschitz, bound))
}

/// `(𝓛_B, 𝓜_B)`: Lipschitz constant and norm bound of `x ↦ ∂B/∂x` over `domain`.
pub fn certificate_constants(
    cert: &NeuralCertificate,
    domain: &BoxRegion,
    points: usize,
    seed: u64,
    safety_factor: f64,
) -> Result<(ConstantEstimate, ConstantEstimate)> {
    if domain.dim() != cert.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: cert.input_dim(),
            actual: domain.dim(),
        });
    }
    let grad = |x: &[f64]| cert.grad_input(x).expect("dimension checked");
    let lipschitz = estimate_lipschitz(grad, domain, points, seed, safety_factor)?;
    let bound = estimate_bound(grad, domain, points, seed.wrapping_add(1), safety_factor)?;
    Ok((lipschitz, bound))
}

/// The four constants behind the tightening parameter, serialized under `constants`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantSet {
    #[serde(rename = "Lf")]
    pub lipschitz_f: ConstantEstimate,
    #[serde(rename = "Mf")]
    pub bound_f: ConstantEstimate,
    #[serde(rename = "LB")]
    pub lipschitz_b: ConstantEstimate,
    #[serde(rename = "MB")]
    pub bound_b: ConstantEstimate,
}

impl ConstantSet {
    pub fn asymptotic(&self) -> bool {
        [self.lipschitz_f, self.bound_f, self.lipschitz_b, self.bound_b]
            .iter()
            .any(ConstantEstimate::is_asymptotic)
    }
}
