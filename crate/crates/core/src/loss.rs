//! Barrier conditions on finite grids and the hinge-style training losses.
//!
//! * state loss `l^s`: mean hinge `max{0, B}` over the initial grid plus mean
//!   hinge `max{0, δ − B}` over the unsafe grid;
//! * trajectory loss `l^Δ`: worst forward difference quotient of `B` along a
//!   discretized trajectory minus `(inf_U B − sup_I B) / T`;
//! * total loss `L = l^Δ + l^s`.
//!
//! Infima and suprema over the sets are taken over the grids. Ties in every
//! max/argmax resolve to the lowest index.

use serde::Serialize;

use crate::certificate::{NeuralCertificate, ParamVector};
use crate::dynamics::{BoxRegion, ContinuousTrajectory, DiscretizedTrajectory, RegionSpec, SystemModel};
use crate::error::{Error, Result};

/// Finite point sets standing in for `X_I` and `X_U`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSets {
    dim: usize,
    init_points: Vec<f64>,
    unsafe_points: Vec<f64>,
    margin: f64,
    points_per_dim: usize,
}

impl GridSets {
    /// Boundary-inclusive lattices with `points_per_dim` points per axis on each set.
    pub fn from_regions(regions: &RegionSpec, points_per_dim: usize, margin: f64) -> Result<Self> {
        let mut grids = Self::from_points(
            regions.initial.lattice(points_per_dim),
            regions.unsafe_set.lattice(points_per_dim),
            margin,
        )?;
        grids.points_per_dim = points_per_dim;
        Ok(grids)
    }

    pub fn from_points(init: Vec<Vec<f64>>, unsafe_points: Vec<Vec<f64>>, margin: f64) -> Result<Self> {
        if init.is_empty() {
            return Err(Error::EmptyGrid("initial-set grid has no points"));
        }
        if unsafe_points.is_empty() {
            return Err(Error::EmptyGrid("unsafe-set grid has no points"));
        }
        if !(margin > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "margin δ must be positive, got {margin}"
            )));
        }
        let dim = init[0].len();
        if let Some(p) = init.iter().chain(&unsafe_points).find(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: p.len(),
            });
        }
        Ok(Self {
            dim,
            points_per_dim: 0,
            init_points: init.into_iter().flatten().collect(),
            unsafe_points: unsafe_points.into_iter().flatten().collect(),
            margin,
        })
    }

    /// Checks that every grid point lies in its set.
    pub fn validate(&self, initial: &BoxRegion, unsafe_set: &BoxRegion) -> Result<()> {
        if self.init_points().any(|p| !initial.contains(p)) {
            return Err(Error::InvalidRegion("initial grid point outside X_I".into()));
        }
        if self.unsafe_points().any(|p| !unsafe_set.contains(p)) {
            return Err(Error::InvalidRegion("unsafe grid point outside X_U".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn points_per_dim(&self) -> usize {
        self.points_per_dim
    }

    pub fn init_points(&self) -> impl Iterator<Item = &[f64]> {
        self.init_points.chunks_exact(self.dim)
    }

    pub fn unsafe_points(&self) -> impl Iterator<Item = &[f64]> {
        self.unsafe_points.chunks_exact(self.dim)
    }

    pub fn init_point(&self, i: usize) -> &[f64] {
        &self.init_points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn unsafe_point(&self, i: usize) -> &[f64] {
        &self.unsafe_points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn init_len(&self) -> usize {
        self.init_points.len() / self.dim
    }

    pub fn unsafe_len(&self) -> usize {
        self.unsafe_points.len() / self.dim
    }
}

/// `B` evaluated on both grids for one parameter vector, with the derived
/// quantities every loss needs.
#[derive(Debug, Clone)]
pub struct GridValues {
    pub init: Vec<f64>,
    pub unsafe_values: Vec<f64>,
    /// `(index, value)` of `sup_{𝒳_I} B`.
    pub sup_init: (usize, f64),
    /// `(index, value)` of `inf_{𝒳_U} B`.
    pub inf_unsafe: (usize, f64),
    pub state_loss: f64,
    margin: f64,
}

impl GridValues {
    pub fn compute(cert: &NeuralCertificate, grids: &GridSets) -> Result<Self> {
        if cert.input_dim() != grids.dim() {
            return Err(Error::DimensionMismatch {
                expected: cert.input_dim(),
                actual: grids.dim(),
            });
        }
        let init = cert.eval_many(&grids.init_points);
        let unsafe_values = cert.eval_many(&grids.unsafe_points);
        let sup_init = argmax(&init);
        let inf_unsafe = argmin(&unsafe_values);
        let delta = grids.margin();
        let state_loss = init.iter().map(|b| b.max(0.0)).sum::<f64>() / init.len() as f64
            + unsafe_values.iter().map(|b| (delta - b).max(0.0)).sum::<f64>() / unsafe_values.len() as f64;
        Ok(Self {
            init,
            unsafe_values,
            sup_init,
            inf_unsafe,
            state_loss,
            margin: delta,
        })
    }

    /// Right-hand side `(inf_U B − sup_I B) / T` of the derivative condition.
    pub fn rate_bound(&self, horizon: f64) -> f64 {
        (self.inf_unsafe.1 - self.sup_init.1) / horizon
    }

    /// `B ≤ 0` on every initial grid point and `B ≥ δ` on every unsafe one.
    pub fn psi_s(&self) -> bool {
        self.init.iter().all(|b| *b <= 0.0) && self.unsafe_values.iter().all(|b| *b >= self.margin)
    }

    /// Subgradient of `l^s`, accumulated into `acc` with weight `scale`.
    pub fn accumulate_state_subgrad(
        &self,
        cert: &NeuralCertificate,
        grids: &GridSets,
        scale: f64,
        acc: &mut ParamVector,
    ) {
        let wi = scale / self.init.len() as f64;
        for (i, b) in self.init.iter().enumerate() {
            if *b > 0.0 {
                cert.accumulate_grad_params(grids.init_point(i), wi, acc);
            }
        }
        let wu = scale / self.unsafe_values.len() as f64;
        for (i, b) in self.unsafe_values.iter().enumerate() {
            if *b < self.margin {
                cert.accumulate_grad_params(grids.unsafe_point(i), -wu, acc);
            }
        }
    }
}

fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > best.1 {
            best = (i, *v);
        }
    }
    best
}

fn argmin(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v < best.1 {
            best = (i, *v);
        }
    }
    best
}

/// `(k, max_k (B_k − B_{k−1}) / (t_k − t_{k−1}))` for `k = 1..=M`.
pub fn max_difference_quotient(values: &[f64], times: &[f64]) -> Result<(usize, f64)> {
    debug_assert_eq!(values.len(), times.len());
    let mut best = (0, f64::NEG_INFINITY);
    for k in 1..values.len() {
        let dt = times[k] - times[k - 1];
        if !(dt > 0.0) {
            return Err(Error::ZeroTimeGap { index: k - 1 });
        }
        let q = (values[k] - values[k - 1]) / dt;
        if q > best.1 {
            best = (k, q);
        }
    }
    if best.0 == 0 {
        return Err(Error::InvalidArgument("trajectory needs at least two samples".into()));
    }
    Ok(best)
}

/// All components of `L(θ, ξ̃)` plus the indices that attain the max/inf/sup terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub state_loss: f64,
    pub traj_loss: f64,
    pub total: f64,
    /// Step `k ∈ 1..=M` whose difference quotient is largest.
    pub argmax_step: usize,
    /// Index into the initial grid of `sup B`.
    pub sup_init_index: usize,
    /// Index into the unsafe grid of `inf B`.
    pub inf_unsafe_index: usize,
}

impl LossBreakdown {
    pub fn from_parts(
        values: &GridValues,
        traj: &DiscretizedTrajectory,
        traj_values: &[f64],
        horizon: f64,
    ) -> Result<Self> {
        let (k, q) = max_difference_quotient(traj_values, traj.times())?;
        let traj_loss = q - values.rate_bound(horizon);
        Ok(Self {
            state_loss: values.state_loss,
            traj_loss,
            total: traj_loss + values.state_loss,
            argmax_step: k,
            sup_init_index: values.sup_init.0,
            inf_unsafe_index: values.inf_unsafe.0,
        })
    }
}

fn check_traj(cert: &NeuralCertificate, traj: &DiscretizedTrajectory, horizon: f64) -> Result<()> {
    if traj.dim() != cert.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: cert.input_dim(),
            actual: traj.dim(),
        });
    }
    if !(horizon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    Ok(())
}

/// Sample-independent loss `l^s(θ)`.
pub fn state_loss(cert: &NeuralCertificate, grids: &GridSets) -> Result<f64> {
    Ok(GridValues::compute(cert, grids)?.state_loss)
}

/// Sample-dependent loss `l^Δ(θ, ξ̃)`.
pub fn traj_loss(
    cert: &NeuralCertificate,
    traj: &DiscretizedTrajectory,
    grids: &GridSets,
    horizon: f64,
) -> Result<f64> {
    Ok(total_loss(cert, traj, grids, horizon)?.traj_loss)
}

/// `L(θ, ξ̃) = l^Δ(θ, ξ̃) + l^s(θ)`.
pub fn total_loss(
    cert: &NeuralCertificate,
    traj: &DiscretizedTrajectory,
    grids: &GridSets,
    horizon: f64,
) -> Result<LossBreakdown> {
    check_traj(cert, traj, horizon)?;
    let values = GridValues::compute(cert, grids)?;
    let traj_values = cert.eval_many(traj.flat_states());
    LossBreakdown::from_parts(&values, traj, &traj_values, horizon)
}

/// Subgradient of `l^Δ` at a known breakdown, excluding the `l^s` part.
pub(crate) fn accumulate_traj_subgrad(
    cert: &NeuralCertificate,
    traj: &DiscretizedTrajectory,
    grids: &GridSets,
    horizon: f64,
    breakdown: &LossBreakdown,
    acc: &mut ParamVector,
) {
    let k = breakdown.argmax_step;
    let dt = traj.times()[k] - traj.times()[k - 1];
    cert.accumulate_grad_params(traj.state(k), 1.0 / dt, acc);
    cert.accumulate_grad_params(traj.state(k - 1), -1.0 / dt, acc);
    cert.accumulate_grad_params(grids.unsafe_point(breakdown.inf_unsafe_index), -1.0 / horizon, acc);
    cert.accumulate_grad_params(grids.init_point(breakdown.sup_init_index), 1.0 / horizon, acc);
}

/// A subgradient of `L(·, ξ̃)` at the current parameters, built from the terms that
/// attain each max/inf/sup (lowest index on ties).
pub fn subgrad_total(
    cert: &NeuralCertificate,
    traj: &DiscretizedTrajectory,
    grids: &GridSets,
    horizon: f64,
) -> Result<ParamVector> {
    check_traj(cert, traj, horizon)?;
    let values = GridValues::compute(cert, grids)?;
    let traj_values = cert.eval_many(traj.flat_states());
    let breakdown = LossBreakdown::from_parts(&values, traj, &traj_values, horizon)?;
    let mut g = ParamVector::zeros(cert.param_count());
    values.accumulate_state_subgrad(cert, grids, 1.0, &mut g);
    accumulate_traj_subgrad(cert, traj, grids, horizon, &breakdown, &mut g);
    Ok(g)
}

/// Initial/unsafe conditions on the grids, with the `δ` margin on `𝒳_U`.
pub fn check_psi_s(cert: &NeuralCertificate, grids: &GridSets) -> bool {
    GridValues::compute(cert, grids).map(|v| v.psi_s()).unwrap_or(false)
}

/// Tightened discrete derivative condition: strictly `l^Δ(θ, ξ̃) < −d`.
pub fn check_psi_delta_d(
    cert: &NeuralCertificate,
    traj: &DiscretizedTrajectory,
    grids: &GridSets,
    horizon: f64,
    d: f64,
) -> bool {
    traj_loss(cert, traj, grids, horizon).map(|l| l < -d).unwrap_or(false)
}

/// `(index, max dB/dt)` over the dense points of a trajectory.
pub fn max_time_derivative(
    cert: &NeuralCertificate,
    traj: &ContinuousTrajectory,
    system: &SystemModel,
) -> Result<(usize, f64)> {
    let derivs = time_derivatives(cert, traj, system)?;
    Ok(argmax(&derivs))
}

/// `dB/dt` at every dense point.
pub fn time_derivatives(
    cert: &NeuralCertificate,
    traj: &ContinuousTrajectory,
    system: &SystemModel,
) -> Result<Vec<f64>> {
    traj.states().map(|x| cert.time_derivative(x, system)).collect()
}

/// Continuous derivative condition `dB/dt < (inf_U B − sup_I B)/T`, checked at every
/// dense integrator point.
pub fn check_psi_delta_continuous(
    cert: &NeuralCertificate,
    traj: &ContinuousTrajectory,
    system: &SystemModel,
    grids: &GridSets,
    horizon: f64,
) -> bool {
    let Ok(values) = GridValues::compute(cert, grids) else {
        return false;
    };
    let bound = values.rate_bound(horizon);
    match max_time_derivative(cert, traj, system) {
        Ok((_, max)) => max < bound,
        Err(_) => false,
    }
}
