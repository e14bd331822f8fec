//! Certificate synthesis by inexact subgradient descent with compression-set
//! construction, wrapped in a sampling-and-discarding loop.
//!
//! The inner routine ([`algorithm1`]) first drives the state loss to zero, then
//! descends on the worst sample of its compression set. Whenever a sample whose
//! loss is at least the compression-set maximum has a nonzero subgradient that is
//! misaligned with the current descent direction, the iterate "jumps" along that
//! subgradient and the sample joins the compression set.
//!
//! The outer routine ([`algorithm2`]) repeats the inner one, discarding the
//! compression samples of every round that leaves some retained sample with
//! `l^Δ ≥ −d` or `l^s > 0`.
//!
//! Every decision that depends on samples outside the compression set (bootstrap
//! choice, jump choice, a retained sample still violating once the compression
//! samples are done, a discard triggered by a sample outside the round) selects a
//! sample that then enters the set, and all stopping rules only look at the
//! compression set otherwise. A rerun on the compression samples, kept in their
//! original relative order, therefore retraces the same path and returns the same
//! certificate.

use std::collections::BTreeSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certificate::{structural_bounds, NeuralCertificate, ParamVector};
use crate::dynamics::{BoxRegion, DiscretizedTrajectory, SystemModel};
use crate::error::{Error, Result};
use crate::lipschitz::{certificate_constants, ConstantEstimate, ConstantSet, DEFAULT_SAFETY_FACTOR};
use crate::loss::{accumulate_traj_subgrad, GridSets, GridValues, LossBreakdown};

/// How the tightening parameter `d` is obtained while training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DStrategy {
    /// Re-estimate `𝓛_B`, `𝓜_B` from the current parameters at every check.
    PerIteration,
    /// Use fixed upper bounds valid on a weight-norm ball and project onto it.
    ParamSetBound,
}

/// Gradient bounds valid for every network whose weight matrices have Frobenius
/// norm at most `weight_radius`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamSetBounds {
    pub weight_radius: f64,
    /// `𝓛_B` upper bound; derived structurally from the radius when absent.
    #[serde(default)]
    pub lipschitz_grad: Option<f64>,
    /// `𝓜_B` upper bound; derived structurally from the radius when absent.
    #[serde(default)]
    pub bound_grad: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    /// Constant step size `α`.
    pub step_size: f64,
    /// Tolerance `η` on the running loss.
    pub tolerance: f64,
    /// `(L₀, L₁)`; defaults to `(L* + 2η, L*)` with `L*` the first bootstrap loss.
    pub init_loss_pair: Option<(f64, f64)>,
    /// Consecutive non-improving iterations (by more than `η`) before the inner
    /// loop stops. `1` is the plain single-step test.
    pub patience: usize,
    /// Iterations between success checks `max_{𝒞} L < −d_j`.
    pub check_every: usize,
    pub max_inner_iters: usize,
    pub max_outer_iters: usize,
    pub d_strategy: DStrategy,
    pub param_set_bounds: Option<ParamSetBounds>,
    /// Frobenius radius every weight matrix is projected onto after each step.
    /// Fixes the scale of `B`, to which the loss is otherwise equivariant. Under
    /// [`DStrategy::ParamSetBound`] the radius of `param_set_bounds` is used.
    pub weight_radius: Option<f64>,
    /// Random pairs used for `𝓛_B`/`𝓜_B` under [`DStrategy::PerIteration`].
    pub constant_samples: usize,
    pub constant_seed: u64,
    pub safety_factor: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-2,
            tolerance: 1e-6,
            init_loss_pair: None,
            patience: 200,
            check_every: 10,
            max_inner_iters: 20_000,
            max_outer_iters: 50,
            d_strategy: DStrategy::PerIteration,
            param_set_bounds: None,
            weight_radius: None,
            constant_samples: 20_000,
            constant_seed: 0x5eed,
            safety_factor: DEFAULT_SAFETY_FACTOR,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.step_size > 0.0) {
            return bad(format!("step size must be positive, got {}", self.step_size));
        }
        if !(self.tolerance > 0.0) {
            return bad(format!("tolerance must be positive, got {}", self.tolerance));
        }
        if let Some((l0, l1)) = self.init_loss_pair {
            if !(l1 < l0 && (l1 - l0).abs() > self.tolerance) {
                return bad(format!("need L1 < L0 with |L1 − L0| > η, got ({l0}, {l1})"));
            }
        }
        if self.max_inner_iters == 0 || self.max_outer_iters == 0 || self.patience == 0 || self.check_every == 0 {
            return bad("iteration caps, patience and check interval must be at least 1".into());
        }
        if self.d_strategy == DStrategy::ParamSetBound {
            match self.param_set_bounds {
                Some(b) if b.weight_radius > 0.0 => {}
                _ => return bad("param_set_bound strategy needs a positive weight_radius".into()),
            }
        }
        if self.weight_radius.is_some_and(|r| !(r > 0.0)) {
            return bad("weight_radius must be positive".into());
        }
        if self.constant_samples == 0 {
            return bad("constant_samples must be at least 1".into());
        }
        if !(self.safety_factor >= 1.0) {
            return bad(format!("safety factor must be at least 1, got {}", self.safety_factor));
        }
        Ok(())
    }
}

/// `d = t̄ 𝓜_f (𝓜_B 𝓛_f + 𝓜_f 𝓛_B)`.
pub fn tightening(max_gap: f64, lipschitz_f: f64, bound_f: f64, lipschitz_b: f64, bound_b: f64) -> f64 {
    max_gap * bound_f * (bound_b * lipschitz_f + bound_f * lipschitz_b)
}

/// Tightening parameter from a system with known constants and certificate
/// constants `(𝓛_B, 𝓜_B)`.
pub fn compute_tightening(system: &SystemModel, cert_constants: (f64, f64), max_gap: f64) -> Result<f64> {
    let lf = system
        .lipschitz_f
        .ok_or(Error::MustEstimate("Lf (Lipschitz constant of f)"))?;
    let mf = system.bound_f.ok_or(Error::MustEstimate("Mf (bound on ‖f‖)"))?;
    let (lb, mb) = cert_constants;
    for (name, v) in [("max_gap", max_gap), ("Lf", lf), ("Mf", mf), ("LB", lb), ("MB", mb)] {
        if !(v >= 0.0) {
            return Err(Error::InvalidArgument(format!("{name} must be nonnegative, got {v}")));
        }
    }
    Ok(tightening(max_gap, lf, mf, lb, mb))
}

/// Everything needed to turn a certificate into a tightening parameter.
#[derive(Debug, Clone)]
pub struct Tightening {
    pub lipschitz_f: ConstantEstimate,
    pub bound_f: ConstantEstimate,
    pub max_gap: f64,
    /// Region over which `𝓛_B`, `𝓜_B` are estimated.
    pub domain: BoxRegion,
    pub strategy: DStrategy,
    pub samples: usize,
    pub seed: u64,
    pub safety_factor: f64,
    fixed_cert: Option<(ConstantEstimate, ConstantEstimate)>,
}

impl Tightening {
    pub fn new(
        system_constants: (ConstantEstimate, ConstantEstimate),
        max_gap: f64,
        domain: BoxRegion,
        config: &SynthesisConfig,
        layer_count: usize,
        activation: crate::certificate::Activation,
    ) -> Self {
        let fixed_cert = match (config.d_strategy, config.param_set_bounds) {
            (DStrategy::ParamSetBound, Some(b)) => {
                let (lb, mb) = structural_bounds(std::iter::repeat_n(b.weight_radius, layer_count), activation);
                Some((
                    ConstantEstimate::analytic(b.lipschitz_grad.unwrap_or(lb)),
                    ConstantEstimate::analytic(b.bound_grad.unwrap_or(mb)),
                ))
            }
            _ => None,
        };
        Self {
            lipschitz_f: system_constants.0,
            bound_f: system_constants.1,
            max_gap,
            domain,
            strategy: config.d_strategy,
            samples: config.constant_samples,
            seed: config.constant_seed,
            safety_factor: config.safety_factor,
            fixed_cert,
        }
    }

    /// Largest sampling gap over a set of trajectories.
    pub fn max_gap_of(samples: &[DiscretizedTrajectory]) -> f64 {
        samples.iter().map(DiscretizedTrajectory::max_gap).fold(0.0, f64::max)
    }

    pub fn evaluate(&self, cert: &NeuralCertificate) -> Result<(f64, ConstantSet)> {
        let (lb, mb) = match self.fixed_cert {
            Some(c) => c,
            None => certificate_constants(cert, &self.domain, self.samples, self.seed, self.safety_factor)?,
        };
        let d = tightening(
            self.max_gap,
            self.lipschitz_f.value,
            self.bound_f.value,
            lb.value,
            mb.value,
        );
        Ok((
            d,
            ConstantSet {
                lipschitz_f: self.lipschitz_f,
                bound_f: self.bound_f,
                lipschitz_b: lb,
                bound_b: mb,
            },
        ))
    }

    fn project(&self, cert: &mut NeuralCertificate, config: &SynthesisConfig) {
        let radius = match (self.strategy, config.param_set_bounds) {
            (DStrategy::ParamSetBound, Some(b)) => Some(b.weight_radius),
            _ => config.weight_radius,
        };
        if let Some(r) = radius {
            cert.project_weights(r);
        }
    }
}

/// Samples retained by the synthesis procedure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CompressionSet {
    /// Sample indices in the order they entered the set.
    pub indices: Vec<usize>,
    /// Samples added by jumps (bootstrap included) in the final inner run.
    pub jump_count: usize,
    /// Samples discarded by the outer loop.
    pub discarded_count: usize,
}

impl CompressionSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Shared, read-only problem data.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub samples: &'a [DiscretizedTrajectory],
    pub grids: &'a GridSets,
    pub horizon: f64,
}

/// Losses of a set of samples at one parameter vector.
struct Evaluation {
    grid: GridValues,
    /// Aligned with the `active` index list it was computed for.
    breakdowns: Vec<LossBreakdown>,
}

impl Evaluation {
    fn compute(cert: &NeuralCertificate, problem: &Problem<'_>, active: &[usize]) -> Result<Self> {
        let grid = GridValues::compute(cert, problem.grids)?;
        let breakdowns = active
            .par_iter()
            .map(|&i| {
                let traj = &problem.samples[i];
                let values = cert.eval_many(traj.flat_states());
                LossBreakdown::from_parts(&grid, traj, &values, problem.horizon)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { grid, breakdowns })
    }

    /// Position in `active` of the largest total loss (lowest sample index on ties).
    fn argmax(&self, active: &[usize], within: impl Fn(usize) -> bool) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (pos, b) in self.breakdowns.iter().enumerate() {
            if !within(active[pos]) {
                continue;
            }
            best = match best {
                None => Some(pos),
                Some(p) => {
                    let cur = &self.breakdowns[p];
                    if b.total > cur.total || (b.total == cur.total && active[pos] < active[p]) {
                        Some(pos)
                    } else {
                        Some(p)
                    }
                }
            };
        }
        best
    }

    /// Position in `active` of the largest `l^Δ` (lowest sample index on ties).
    fn worst_traj(&self, active: &[usize], within: impl Fn(usize) -> bool) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (pos, b) in self.breakdowns.iter().enumerate() {
            if !within(active[pos]) {
                continue;
            }
            if best.is_none_or(|p| b.traj_loss > self.breakdowns[p].traj_loss) {
                best = Some(pos);
            }
        }
        best
    }

    fn max_traj_loss(&self) -> f64 {
        self.breakdowns
            .iter()
            .map(|b| b.traj_loss)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn sample_subgrad(
    cert: &NeuralCertificate,
    problem: &Problem<'_>,
    sample: usize,
    breakdown: &LossBreakdown,
    state_grad: &ParamVector,
) -> ParamVector {
    let mut g = state_grad.clone();
    accumulate_traj_subgrad(
        cert,
        &problem.samples[sample],
        problem.grids,
        problem.horizon,
        breakdown,
        &mut g,
    );
    g
}

/// Gradient descent on `l^s` alone until it vanishes.
pub fn phase1_state_descent(
    cert: &NeuralCertificate,
    grids: &GridSets,
    config: &SynthesisConfig,
) -> Result<NeuralCertificate> {
    phase1(cert.clone(), grids, config, None).map(|(c, _)| c)
}

fn phase1(
    mut cert: NeuralCertificate,
    grids: &GridSets,
    config: &SynthesisConfig,
    tightening: Option<&Tightening>,
) -> Result<(NeuralCertificate, usize)> {
    let mut steps = 0;
    loop {
        let values = GridValues::compute(&cert, grids)?;
        if values.state_loss == 0.0 {
            return Ok((cert, steps));
        }
        if steps >= config.max_inner_iters {
            return Err(Error::StateLossNotSeparable {
                iterations: steps,
                last_loss: values.state_loss,
            });
        }
        let mut g = ParamVector::zeros(cert.param_count());
        values.accumulate_state_subgrad(&cert, grids, 1.0, &mut g);
        cert.step(-config.step_size, &g);
        if let Some(t) = tightening {
            t.project(&mut cert, config);
        }
        steps += 1;
    }
}

/// Result of one inner run.
#[derive(Debug, Clone)]
pub struct InnerRun {
    pub certificate: NeuralCertificate,
    /// Sample indices in the order they entered the compression set.
    pub compression: Vec<usize>,
    pub iterations: usize,
    pub state_iterations: usize,
    /// Running loss `L_k` after every iteration, starting with `L₀, L₁`.
    pub running_losses: Vec<f64>,
    /// Whether the run stopped because the compression samples met `L < −d_j`.
    pub met_tightened_condition: bool,
}

/// Inexact subgradient descent with jumps on all samples of `problem`.
pub fn algorithm1(
    cert: &NeuralCertificate,
    problem: &Problem<'_>,
    config: &SynthesisConfig,
    tightening: &Tightening,
) -> Result<InnerRun> {
    let active: Vec<usize> = (0..problem.samples.len()).collect();
    run_inner(cert.clone(), problem, &active, config, tightening)
}

fn run_inner(
    cert: NeuralCertificate,
    problem: &Problem<'_>,
    active: &[usize],
    config: &SynthesisConfig,
    tightening: &Tightening,
) -> Result<InnerRun> {
    if active.is_empty() {
        return Err(Error::InvalidArgument("inner run needs at least one sample".into()));
    }
    let (mut cert, state_iterations) = phase1(cert, problem.grids, config, Some(tightening))?;

    let mut eval = Evaluation::compute(&cert, problem, active)?;
    // bootstrap: the worst sample seeds the compression set
    let first = eval.argmax(active, |_| true).expect("active is nonempty");
    let mut compression = vec![active[first]];
    let mut in_compression: BTreeSet<usize> = compression.iter().copied().collect();

    let (l0, l1) = config.init_loss_pair.unwrap_or_else(|| {
        (
            eval.breakdowns[first].total + 2.0 * config.tolerance,
            eval.breakdowns[first].total,
        )
    });
    let mut running_losses = vec![l0, l1];
    let mut running = l1;
    let mut stall = usize::from((l1 - l0).abs() <= config.tolerance);

    let mut best_params = cert.params();
    let mut iterations = 0;
    while iterations < config.max_inner_iters {
        if stall >= config.patience {
            return Ok(InnerRun {
                certificate: cert,
                compression,
                iterations,
                state_iterations,
                running_losses,
                met_tightened_condition: false,
            });
        }
        if iterations % config.check_every == 0 && eval.grid.state_loss == 0.0 {
            let worst_c = eval.worst_traj(active, |i| in_compression.contains(&i));
            if worst_c.is_some_and(|pos| eval.breakdowns[pos].traj_loss < 0.0) {
                let (d, _) = tightening.evaluate(&cert)?;
                if iterations % 500 == 0 {
                    log::debug!(
                        "iteration {iterations}: max l^Δ over C {:.6e}, d {d:.6e}",
                        eval.breakdowns[worst_c.unwrap()].traj_loss
                    );
                }
                if eval.breakdowns[worst_c.unwrap()].traj_loss < -d {
                    // the compression samples are done; any remaining violator joins them
                    match eval.worst_traj(active, |_| true) {
                        Some(pos) if eval.breakdowns[pos].traj_loss >= -d => {
                            let sample = active[pos];
                            in_compression.insert(sample);
                            compression.push(sample);
                            log::debug!("sample {sample} still violates at iteration {iterations}; added");
                        }
                        _ => {
                            return Ok(InnerRun {
                                certificate: cert,
                                compression,
                                iterations,
                                state_iterations,
                                running_losses,
                                met_tightened_condition: true,
                            })
                        }
                    }
                }
            }
        }
        let c_pos = eval
            .argmax(active, |i| in_compression.contains(&i))
            .expect("compression set is nonempty");
        let c_loss = eval.breakdowns[c_pos];

        let mut state_grad = ParamVector::zeros(cert.param_count());
        eval.grid
            .accumulate_state_subgrad(&cert, problem.grids, 1.0, &mut state_grad);
        let g_c = sample_subgrad(&cert, problem, active[c_pos], &c_loss, &state_grad);

        // samples at least as bad as the compression set, with misaligned subgradients
        let misaligned: Option<(usize, ParamVector)> = eval
            .breakdowns
            .par_iter()
            .enumerate()
            .filter(|(pos, b)| *pos != c_pos && b.total >= c_loss.total)
            .filter_map(|(pos, b)| {
                let g = sample_subgrad(&cert, problem, active[pos], b, &state_grad);
                (g.dot(&g_c) <= 0.0 && !g.is_zero()).then_some((pos, g))
            })
            .collect::<Vec<_>>()
            .into_iter()
            .reduce(|best, cand| {
                let (bt, ct) = (eval.breakdowns[best.0].total, eval.breakdowns[cand.0].total);
                if ct > bt || (ct == bt && active[cand.0] < active[best.0]) {
                    cand
                } else {
                    best
                }
            });

        match misaligned {
            Some((pos, g)) => {
                cert.step(-config.step_size, &g);
                let sample = active[pos];
                if in_compression.insert(sample) {
                    compression.push(sample);
                    log::debug!("jump to sample {sample} at iteration {iterations}");
                }
            }
            None => cert.step(-config.step_size, &g_c),
        }
        tightening.project(&mut cert, config);
        iterations += 1;

        eval = Evaluation::compute(&cert, problem, active)?;
        let c_max = active
            .iter()
            .zip(&eval.breakdowns)
            .filter(|(i, _)| in_compression.contains(i))
            .map(|(_, b)| b.total)
            .fold(f64::NEG_INFINITY, f64::max);
        let next = running.min(c_max);
        if next < running {
            best_params = cert.params();
        }
        if (next - running).abs() <= config.tolerance {
            stall += 1;
        } else {
            stall = 0;
        }
        running = next;
        running_losses.push(running);
        if iterations % 500 == 0 {
            log::debug!(
                "iteration {iterations}: running loss {running:.6e}, state loss {:.3e}, |C| = {}",
                eval.grid.state_loss,
                compression.len()
            );
        }
    }
    Err(Error::NoConvergence {
        iterations,
        best_params: best_params.0,
    })
}

/// Outcome of a successful synthesis.
#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub certificate: NeuralCertificate,
    pub compression: CompressionSet,
    /// `l^Δ` of every sample of the multi-sample at the returned certificate.
    pub final_traj_losses: Vec<f64>,
    pub final_state_loss: f64,
    /// Samples still in play when the outer loop stopped.
    pub retained: Vec<usize>,
    pub d_used: f64,
    pub constants: ConstantSet,
    pub inner_iterations: usize,
    pub state_iterations: usize,
    pub outer_iterations: usize,
    /// Running loss sequence of every inner run.
    pub running_losses: Vec<Vec<f64>>,
    pub wall_time: f64,
}

impl SynthesisResult {
    /// `l^s = 0` and every retained sample has `l^Δ < −d`.
    pub fn is_success(&self) -> bool {
        self.final_state_loss == 0.0 && self.retained.iter().all(|&i| self.final_traj_losses[i] < -self.d_used)
    }

    pub fn max_retained_traj_loss(&self) -> f64 {
        self.retained
            .iter()
            .map(|&i| self.final_traj_losses[i])
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn guard_holds(eval: &Evaluation, d: f64) -> bool {
    eval.grid.state_loss > 0.0 || eval.max_traj_loss() >= -d
}

/// Sampling-and-discarding loop around [`algorithm1`].
pub fn algorithm2(
    problem: &Problem<'_>,
    config: &SynthesisConfig,
    tightening: &Tightening,
    cert0: &NeuralCertificate,
) -> Result<SynthesisResult> {
    config.validate()?;
    if problem.samples.is_empty() {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let started = Instant::now();
    let mut cert = cert0.clone();
    tightening.project(&mut cert, config);
    let mut active: Vec<usize> = (0..problem.samples.len()).collect();
    let mut compression: Vec<usize> = Vec::new();
    let mut discarded_count = 0;
    let mut jump_count = 0;
    let mut inner_iterations = 0;
    let mut state_iterations = 0;
    let mut running_losses = Vec::new();
    let mut outer = 0;

    let mut eval = Evaluation::compute(&cert, problem, &active)?;
    let (mut d, mut constants) = tightening.evaluate(&cert)?;
    while guard_holds(&eval, d) {
        if outer >= config.max_outer_iters {
            return Err(Error::OuterCapExceeded { iterations: outer });
        }
        let run = run_inner(cert, problem, &active, config, tightening)?;
        cert = run.certificate;
        inner_iterations += run.iterations;
        state_iterations += run.state_iterations;
        running_losses.push(run.running_losses);
        let mut round = run.compression;
        outer += 1;

        eval = Evaluation::compute(&cert, problem, &active)?;
        (d, constants) = tightening.evaluate(&cert)?;
        if !guard_holds(&eval, d) {
            jump_count = round.len();
            compression.extend_from_slice(&round);
            break;
        }
        let in_round: BTreeSet<usize> = round.iter().copied().collect();
        let round_clean = eval.grid.state_loss == 0.0
            && eval
                .worst_traj(&active, |i| in_round.contains(&i))
                .is_none_or(|pos| eval.breakdowns[pos].traj_loss < -d);
        if round_clean {
            // only samples outside the round violate: the worst one is discarded too,
            // so that the discard decision is visible from the compression set alone
            let pos = eval
                .worst_traj(&active, |_| true)
                .expect("guard holds on a nonempty set");
            round.push(active[pos]);
        }
        compression.extend_from_slice(&round);
        let dropped: BTreeSet<usize> = round.iter().copied().collect();
        active.retain(|i| !dropped.contains(i));
        discarded_count += dropped.len();
        log::info!(
            "outer iteration {outer}: discarded {} samples, {} remain",
            dropped.len(),
            active.len()
        );
        if active.is_empty() {
            return Err(Error::AllSamplesDiscarded);
        }
        eval = Evaluation::compute(&cert, problem, &active)?;
    }

    let all: Vec<usize> = (0..problem.samples.len()).collect();
    let full = Evaluation::compute(&cert, problem, &all)?;
    Ok(SynthesisResult {
        final_traj_losses: full.breakdowns.iter().map(|b| b.traj_loss).collect(),
        final_state_loss: full.grid.state_loss,
        certificate: cert,
        compression: CompressionSet {
            indices: compression,
            jump_count,
            discarded_count,
        },
        retained: active,
        d_used: d,
        constants,
        inner_iterations,
        state_iterations,
        outer_iterations: outer,
        running_losses,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificate::Activation;

    #[test]
    fn tightening_examples() {
        assert!((tightening(0.1, 1.0, 2.0, 2.0, 3.0) - 1.4).abs() < 1e-12);
        assert_eq!(tightening(0.0, 1.0, 2.0, 2.0, 3.0), 0.0);
        assert_eq!(tightening(0.1, 1.0, 0.0, 2.0, 3.0), 0.0);
    }

    #[test]
    fn compute_tightening_needs_system_constants() {
        let bare = crate::dynamics::jet_engine();
        assert!(matches!(
            compute_tightening(&bare, (2.0, 3.0), 0.1),
            Err(Error::MustEstimate(_))
        ));
        let known = bare.with_constants(Some(1.0), Some(2.0));
        assert!((compute_tightening(&known, (2.0, 3.0), 0.1).unwrap() - 1.4).abs() < 1e-12);
        assert!(compute_tightening(&known, (-1.0, 3.0), 0.1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SynthesisConfig::default().validate().is_ok());
        let bad_pair = SynthesisConfig {
            init_loss_pair: Some((1.0, 1.0)),
            ..Default::default()
        };
        assert!(bad_pair.validate().is_err());
        let no_ball = SynthesisConfig {
            d_strategy: DStrategy::ParamSetBound,
            ..Default::default()
        };
        assert!(no_ball.validate().is_err());
        let zero_step = SynthesisConfig {
            step_size: 0.0,
            ..Default::default()
        };
        assert!(zero_step.validate().is_err());
    }

    #[test]
    fn structural_ball_bounds_feed_fixed_d() {
        let config = SynthesisConfig {
            d_strategy: DStrategy::ParamSetBound,
            param_set_bounds: Some(ParamSetBounds {
                weight_radius: 2.0,
                lipschitz_grad: None,
                bound_grad: Some(5.0),
            }),
            ..Default::default()
        };
        let dom = BoxRegion::new(vec![-1.0], vec![1.0]).unwrap();
        let t = Tightening::new(
            (ConstantEstimate::analytic(1.0), ConstantEstimate::analytic(2.0)),
            0.1,
            dom,
            &config,
            2,
            Activation::Tanh,
        );
        let cert = NeuralCertificate::zeros(&[1, 4, 1], Activation::Tanh).unwrap();
        let (d, c) = t.evaluate(&cert).unwrap();
        assert_eq!(c.bound_b.value, 5.0);
        // one hidden layer: LB ≤ ‖w₂‖·c·‖W₁‖² = 2·c·4
        let lb = 8.0 * Activation::Tanh.max_curvature();
        assert!((c.lipschitz_b.value - lb).abs() < 1e-12);
        assert!((d - tightening(0.1, 1.0, 2.0, lb, 5.0)).abs() < 1e-12);
    }
}
