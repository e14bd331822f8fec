//! Continuous-time systems `ẋ = f(x)`, fixed-step RK4 integration, initial-state
//! sampling and time discretization of dense trajectories.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

type VectorField = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// A vector field together with whatever Lipschitz data is known analytically.
#[derive(Clone)]
pub struct SystemModel {
    name: String,
    dim: usize,
    field: Arc<VectorField>,
    /// Lipschitz constant of `f` over the domain of interest, when known.
    pub lipschitz_f: Option<f64>,
    /// Upper bound on `‖f(x)‖` over the domain of interest, when known.
    pub bound_f: Option<f64>,
    /// Horizon used by the bundled experiment recipe for this system.
    pub default_horizon: Option<f64>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("lipschitz_f", &self.lipschitz_f)
            .field("bound_f", &self.bound_f)
            .finish()
    }
}

impl SystemModel {
    pub fn new<F>(name: impl Into<String>, dim: usize, field: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        assert!(dim > 0, "state dimension must be positive");
        Self {
            name: name.into(),
            dim,
            field: Arc::new(field),
            lipschitz_f: None,
            bound_f: None,
            default_horizon: None,
        }
    }

    /// `ẋ = A x` for a square row-major matrix.
    pub fn linear(matrix: Vec<Vec<f64>>) -> Result<Self> {
        let n = matrix.len();
        if n == 0 || matrix.iter().any(|row| row.len() != n) {
            return Err(Error::InvalidArgument(
                "linear system matrix must be square and nonempty".into(),
            ));
        }
        let flat: Vec<f64> = matrix.into_iter().flatten().collect();
        Ok(Self::new("linear", n, move |x, out| {
            for (i, o) in out.iter_mut().enumerate() {
                *o = flat[i * n..(i + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum();
            }
        }))
    }

    pub fn with_constants(mut self, lipschitz_f: Option<f64>, bound_f: Option<f64>) -> Self {
        self.lipschitz_f = lipschitz_f;
        self.bound_f = bound_f;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim);
        (self.field)(x, out)
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        let mut out = vec![0.0; self.dim];
        self.eval_into(x, &mut out);
        Ok(out)
    }
}

/// Jet engine model: `ẋ₁ = −x₂ − 3/2 x₁² − 1/2 x₁³`, `ẋ₂ = x₁`.
pub fn jet_engine() -> SystemModel {
    let mut system = SystemModel::new("jet_engine", 2, |x, out| {
        let (x1, x2) = (x[0], x[1]);
        out[0] = -x2 - 1.5 * x1 * x1 - 0.5 * x1 * x1 * x1;
        out[1] = x1;
    });
    system.default_horizon = Some(5.0);
    system
}

/// Four-dimensional nonlinear benchmark with a non-Lipschitz `√|x₁|` term in `ẋ₃`.
pub fn four_dim_benchmark() -> SystemModel {
    let mut system = SystemModel::new("four_dim", 4, |x, out| {
        let (x1, x2, x3, x4) = (x[0], x[1], x[2], x[3]);
        out[0] = x1 + x1 * x2 / 5.0 - x3 * x4 / 2.0;
        out[1] = x4.cos();
        out[2] = 0.01 * x1.abs().sqrt();
        out[3] = -x1 - x2 * x2 + x4.sin();
    });
    system.default_horizon = Some(4.0);
    system
}

/// Look up one of the bundled systems by name.
pub fn named_system(name: &str) -> Option<SystemModel> {
    match name {
        "jet_engine" => Some(jet_engine()),
        "four_dim" => Some(four_dim_benchmark()),
        _ => None,
    }
}

/// Axis-aligned box `{x : lower ≤ x ≤ upper}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct BoxRegion {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TryFrom<RawBox> for BoxRegion {
    type Error = Error;

    fn try_from(raw: RawBox) -> Result<Self> {
        BoxRegion::new(raw.lower, raw.upper)
    }
}

impl BoxRegion {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::InvalidRegion(format!(
                "bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::InvalidRegion(format!(
                    "coordinate {i}: lower {lo} must not exceed upper {hi}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }

    pub fn contains_box(&self, other: &BoxRegion) -> bool {
        other.dim() == self.dim()
            && (0..self.dim()).all(|i| self.lower[i] <= other.lower[i] && other.upper[i] <= self.upper[i])
    }

    pub fn intersects(&self, other: &BoxRegion) -> bool {
        other.dim() == self.dim()
            && (0..self.dim()).all(|i| self.lower[i] <= other.upper[i] && other.lower[i] <= self.upper[i])
    }

    pub fn is_degenerate(&self) -> bool {
        self.lower.iter().zip(&self.upper).all(|(lo, hi)| lo == hi)
    }

    pub fn diameter(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| (hi - lo) * (hi - lo))
            .sum::<f64>()
            .sqrt()
    }

    /// Uniform draw from the box.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| if lo == hi { *lo } else { rng.gen_range(*lo..=*hi) })
            .collect()
    }

    /// Boundary-inclusive lattice with `points_per_dim` points along every axis,
    /// enumerated with the first coordinate varying slowest.
    pub fn lattice(&self, points_per_dim: usize) -> Vec<Vec<f64>> {
        let n = self.dim();
        let axes: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let (lo, hi) = (self.lower[i], self.upper[i]);
                if points_per_dim <= 1 || lo == hi {
                    vec![0.5 * (lo + hi)]
                } else {
                    (0..points_per_dim)
                        .map(|j| lo + (hi - lo) * j as f64 / (points_per_dim - 1) as f64)
                        .collect()
                }
            })
            .collect();
        let total: usize = axes.iter().map(Vec::len).product();
        let mut points = Vec::with_capacity(total);
        let mut index = vec![0usize; n];
        for _ in 0..total {
            points.push(index.iter().enumerate().map(|(i, &j)| axes[i][j]).collect());
            for i in (0..n).rev() {
                index[i] += 1;
                if index[i] < axes[i].len() {
                    break;
                }
                index[i] = 0;
            }
        }
        points
    }
}

/// Domain `X`, initial set `X_I` and unsafe set `X_U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRegions")]
pub struct RegionSpec {
    pub domain: BoxRegion,
    pub initial: BoxRegion,
    #[serde(rename = "unsafe")]
    pub unsafe_set: BoxRegion,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegions {
    domain: BoxRegion,
    initial: BoxRegion,
    #[serde(rename = "unsafe")]
    unsafe_set: BoxRegion,
}

impl TryFrom<RawRegions> for RegionSpec {
    type Error = Error;

    fn try_from(raw: RawRegions) -> Result<Self> {
        RegionSpec::new(raw.domain, raw.initial, raw.unsafe_set)
    }
}

impl RegionSpec {
    pub fn new(domain: BoxRegion, initial: BoxRegion, unsafe_set: BoxRegion) -> Result<Self> {
        if !domain.contains_box(&initial) {
            return Err(Error::InvalidRegion(
                "initial set is not contained in the domain".into(),
            ));
        }
        if !domain.contains_box(&unsafe_set) {
            return Err(Error::InvalidRegion("unsafe set is not contained in the domain".into()));
        }
        if initial.intersects(&unsafe_set) {
            return Err(Error::InvalidRegion("initial and unsafe sets intersect".into()));
        }
        Ok(Self {
            domain,
            initial,
            unsafe_set,
        })
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }
}

/// Dense integrator output on a uniform grid over `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousTrajectory {
    times: Vec<f64>,
    states: Vec<f64>,
    dim: usize,
    step: f64,
}

impl ContinuousTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim)
    }

    pub fn flat_states(&self) -> &[f64] {
        &self.states
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("trajectory has at least two points")
    }

    /// Writes `t,x1,...,xn` rows with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((1..=self.dim).map(|i| format!("x{i}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for (t, x) in self.times.iter().zip(self.states()) {
            write!(out, "{t:.16e}")?;
            for v in x {
                write!(out, ",{v:.16e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// States sampled at `0 = t_0 < t_1 < … < t_M`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedTrajectory {
    times: Vec<f64>,
    states: Vec<f64>,
    dim: usize,
    max_gap: f64,
}

impl DiscretizedTrajectory {
    pub fn new(times: Vec<f64>, states: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() < 2 || times.len() != states.len() {
            return Err(Error::InvalidArgument(format!(
                "need at least two aligned samples, got {} times and {} states",
                times.len(),
                states.len()
            )));
        }
        let dim = states[0].len();
        if let Some(bad) = states.iter().find(|s| s.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: bad.len(),
            });
        }
        let mut max_gap: f64 = 0.0;
        for (k, w) in times.windows(2).enumerate() {
            let gap = w[1] - w[0];
            if gap <= 0.0 {
                return Err(Error::ZeroTimeGap { index: k });
            }
            max_gap = max_gap.max(gap);
        }
        Ok(Self {
            times,
            states: states.into_iter().flatten().collect(),
            dim,
            max_gap,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of sampled steps `M` (one less than the number of points).
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim)
    }

    pub fn flat_states(&self) -> &[f64] {
        &self.states
    }

    pub fn max_gap(&self) -> f64 {
        self.max_gap
    }

    pub fn initial_state(&self) -> &[f64] {
        self.state(0)
    }
}

/// Classical fixed-step RK4 over `[0, horizon]`.
///
/// The grid is uniform with `⌈T/h⌉` steps, so the realized step never exceeds `h`
/// and the last point lands exactly on `T`.
pub fn integrate(system: &SystemModel, x0: &[f64], horizon: f64, step: f64) -> Result<ContinuousTrajectory> {
    let n = system.dim();
    if x0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: x0.len(),
        });
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    if !(horizon >= step && horizon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon} must be at least the step {step}"
        )));
    }
    let steps = ((horizon / step) - 1e-9).ceil().max(1.0) as usize;
    let h = horizon / steps as f64;

    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity((steps + 1) * n);
    times.push(0.0);
    states.extend_from_slice(x0);

    let mut x = x0.to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for i in 1..=steps {
        system.eval_into(&x, &mut k1);
        for j in 0..n {
            tmp[j] = x[j] + 0.5 * h * k1[j];
        }
        system.eval_into(&tmp, &mut k2);
        for j in 0..n {
            tmp[j] = x[j] + 0.5 * h * k2[j];
        }
        system.eval_into(&tmp, &mut k3);
        for j in 0..n {
            tmp[j] = x[j] + h * k3[j];
        }
        system.eval_into(&tmp, &mut k4);
        for j in 0..n {
            x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        let t = if i == steps { horizon } else { i as f64 * h };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationDiverged { time: t });
        }
        times.push(t);
        states.extend_from_slice(&x);
    }
    Ok(ContinuousTrajectory {
        times,
        states,
        dim: n,
        step: h,
    })
}

/// Draws `count` states uniformly from `region`.
///
/// Sample `i` uses its own ChaCha stream derived from `seed`, so the result does not
/// depend on how the work is scheduled.
pub fn sample_initial_states(region: &BoxRegion, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    if region.is_degenerate() && count > 1 {
        log::warn!(
            "initial region is a single point; {count} samples coincide and the non-concentrated mass assumption fails"
        );
    }
    Ok((0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = indexed_rng(seed, i as u64);
            region.sample(&mut rng)
        })
        .collect())
}

/// RNG for the `index`-th independent draw under a master seed.
pub(crate) fn indexed_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `M + 1` equally spaced sample times on `[0, horizon]`.
pub fn uniform_sample_times(horizon: f64, steps: usize) -> Vec<f64> {
    let steps = steps.max(1);
    (0..=steps)
        .map(|k| {
            if k == steps {
                horizon
            } else {
                horizon * k as f64 / steps as f64
            }
        })
        .collect()
}

/// Picks the states of `traj` at the grid points nearest to `sample_times`.
///
/// The returned times are the integrator grid times, which differ from the requested
/// ones by at most half a step.
pub fn discretize(traj: &ContinuousTrajectory, sample_times: &[f64]) -> Result<DiscretizedTrajectory> {
    if sample_times.len() < 2 {
        return Err(Error::InvalidArgument("need at least two sample times (M ≥ 1)".into()));
    }
    if sample_times[0] != 0.0 {
        return Err(Error::InvalidArgument(format!(
            "first sample time must be 0, got {}",
            sample_times[0]
        )));
    }
    let horizon = traj.horizon();
    let h = traj.step();
    let slack = 1e-9 * horizon.max(1.0);
    let mut times = Vec::with_capacity(sample_times.len());
    let mut states = Vec::with_capacity(sample_times.len());
    let mut previous: Option<usize> = None;
    for (k, &t) in sample_times.iter().enumerate() {
        if t > horizon + slack {
            return Err(Error::OutOfHorizon { time: t, horizon });
        }
        if k > 0 && t <= sample_times[k - 1] {
            return Err(Error::InvalidArgument(format!(
                "sample times must be strictly increasing (index {k})"
            )));
        }
        let idx = ((t / h).round() as usize).min(traj.len() - 1);
        if (traj.times()[idx] - t).abs() > 0.5 * h + slack {
            return Err(Error::InvalidArgument(format!(
                "sample time {t} is not within half a step of the integrator grid"
            )));
        }
        if previous == Some(idx) {
            return Err(Error::ZeroTimeGap { index: k - 1 });
        }
        previous = Some(idx);
        times.push(traj.times()[idx]);
        states.push(traj.state(idx).to_vec());
    }
    DiscretizedTrajectory::new(times, states)
}

/// Integrates every initial state and keeps both the dense and discretized trajectory.
pub fn simulate_batch(
    system: &SystemModel,
    initial_states: &[Vec<f64>],
    horizon: f64,
    step: f64,
    sample_times: &[f64],
) -> Vec<Result<(ContinuousTrajectory, DiscretizedTrajectory)>> {
    initial_states
        .par_iter()
        .map(|x0| {
            let dense = integrate(system, x0, horizon, step)?;
            let discrete = discretize(&dense, sample_times)?;
            Ok((dense, discrete))
        })
        .collect()
}

/// Like [`simulate_batch`] but drops the dense trajectories; fails on the first error.
pub fn discretized_batch(
    system: &SystemModel,
    initial_states: &[Vec<f64>],
    horizon: f64,
    step: f64,
    sample_times: &[f64],
) -> Result<Vec<DiscretizedTrajectory>> {
    initial_states
        .par_iter()
        .map(|x0| {
            let dense = integrate(system, x0, horizon, step)?;
            discretize(&dense, sample_times)
        })
        .collect()
}
