//! Run configuration and the end-to-end pipeline: sample trajectories, synthesize,
//! bound the risk, validate.
//!
//! A run is fully determined by its [`RunConfig`]; every random stream is derived
//! from the single `seed` field, and the derived seeds are echoed in the report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::certificate::{Activation, NeuralCertificate};
use crate::dynamics::{
    discretized_batch, named_system, sample_initial_states, uniform_sample_times, BoxRegion, DiscretizedTrajectory,
    RegionSpec, SystemModel,
};
use crate::error::{Error, Result};
use crate::lipschitz::{system_constants, ConstantEstimate, ConstantSet, DEFAULT_SAFETY_FACTOR};
use crate::loss::GridSets;
use crate::pac::{assemble_guarantee, GuaranteeStatement, PacBound};
use crate::synthesis::{algorithm2, Problem, SynthesisConfig, SynthesisResult, Tightening};
use crate::validation::{monte_carlo_validate, ValidationReport, ValidationRequest};

pub const SCHEMA_VERSION: u32 = 1;

/// A bundled system by name, or a linear system `ẋ = A x` given inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemSpec {
    Named(String),
    Linear { linear: Vec<Vec<f64>> },
}

impl SystemSpec {
    pub fn build(&self) -> Result<SystemModel> {
        match self {
            SystemSpec::Named(name) => {
                named_system(name).ok_or_else(|| Error::Config(format!("system: unknown system `{name}`")))
            }
            SystemSpec::Linear { linear } => SystemModel::linear(linear.clone()),
        }
    }
}

/// Either `M` equally spaced intervals or an explicit list starting at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleTimes {
    Count { count: usize },
    Explicit { times: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Hidden layer widths; the input width comes from the system and the output is scalar.
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: vec![16, 16],
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Lattice points per coordinate on `X_I` and `X_U`.
    pub points_per_dim: usize,
    /// Margin `δ > 0` required on the unsafe grid.
    pub margin: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            points_per_dim: 11,
            margin: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstantsConfig {
    /// Analytic `𝓛_f`; estimated by sampling when absent.
    #[serde(rename = "Lf")]
    pub lipschitz_f: Option<f64>,
    /// Analytic `𝓜_f`; estimated by sampling when absent.
    #[serde(rename = "Mf")]
    pub bound_f: Option<f64>,
    /// Random pairs / points for every sampled constant.
    pub samples: usize,
    pub safety_factor: f64,
}

impl Default for ConstantsConfig {
    fn default() -> Self {
        Self {
            lipschitz_f: None,
            bound_f: None,
            samples: 20_000,
            safety_factor: DEFAULT_SAFETY_FACTOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationConfig {
    pub n_fresh: usize,
    /// Overrides the seed derived from the run seed.
    pub seed: Option<u64>,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            n_fresh: 10_000,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    #[serde(default)]
    pub name: Option<String>,
    /// Region coordinates are read off a figure rather than stated numerically.
    #[serde(default)]
    pub assumed_from_figure: bool,
    /// Initial-state distribution; only `uniform` on `X_I` is supported.
    #[serde(default = "default_distribution")]
    pub distribution: String,
    pub system: SystemSpec,
    pub regions: RegionSpec,
    /// Region over which `𝓛_f, 𝓜_f, 𝓛_B, 𝓜_B` are estimated; defaults to the domain.
    #[serde(default)]
    pub constants_domain: Option<BoxRegion>,
    pub horizon: f64,
    pub sample_times: SampleTimes,
    /// Dense integrator step; defaults to a tenth of the largest sampling gap.
    #[serde(default)]
    pub integrator_step: Option<f64>,
    pub n_train: usize,
    pub beta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub grids: GridConfig,
    #[serde(default)]
    pub constants: ConstantsConfig,
    #[serde(default)]
    pub validation: ValidationConfig,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub threads: usize,
}

fn default_distribution() -> String {
    "uniform".into()
}

/// Seeds of every random stream of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DerivedSeeds {
    pub run: u64,
    pub samples: u64,
    pub init: u64,
    pub system_constants: u64,
    pub certificate_constants: u64,
    pub validation: u64,
}

impl DerivedSeeds {
    pub fn from_run_seed(seed: u64, validation_override: Option<u64>) -> Self {
        Self {
            run: seed,
            samples: seed,
            init: seed.wrapping_add(1),
            system_constants: seed.wrapping_add(2),
            certificate_constants: seed.wrapping_add(3),
            // far from the training streams so fresh trajectories are never training ones
            validation: validation_override.unwrap_or(seed ^ 0x9e37_79b9_7f4a_7c15),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.schema != SCHEMA_VERSION {
            return bad(format!("schema: expected {SCHEMA_VERSION}, got {}", self.schema));
        }
        if self.distribution != "uniform" {
            return bad(format!(
                "distribution: only `uniform` is supported, got `{}`",
                self.distribution
            ));
        }
        let system = self.system.build()?;
        if self.regions.dim() != system.dim() {
            return bad(format!(
                "regions: dimension {} does not match the system dimension {}",
                self.regions.dim(),
                system.dim()
            ));
        }
        if let Some(dom) = &self.constants_domain {
            if dom.dim() != system.dim() {
                return bad("constants_domain: dimension does not match the system".into());
            }
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon: must be positive, got {}", self.horizon));
        }
        let times = self.sample_times()?;
        if *times.last().expect("at least two times") > self.horizon * (1.0 + 1e-12) {
            return bad("sample_times: last time exceeds the horizon".into());
        }
        if let Some(h) = self.integrator_step {
            if !(h > 0.0) {
                return bad(format!("integrator_step: must be positive, got {h}"));
            }
        }
        if self.n_train == 0 {
            return bad("n_train: must be at least 1".into());
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta: must lie in (0, 1), got {}", self.beta));
        }
        if self.architecture.hidden.contains(&0) {
            return bad("architecture.hidden: widths must be positive".into());
        }
        if self.grids.points_per_dim < 1 {
            return bad("grids.points_per_dim: must be at least 1".into());
        }
        if !(self.grids.margin > 0.0) {
            return bad(format!("grids.margin: must be positive, got {}", self.grids.margin));
        }
        if self.constants.samples == 0 || !(self.constants.safety_factor >= 1.0) {
            return bad("constants: samples must be ≥ 1 and safety_factor ≥ 1".into());
        }
        if self.validation.n_fresh == 0 {
            return bad("validation.n_fresh: must be at least 1".into());
        }
        self.synthesis
            .validate()
            .map_err(|e| Error::Config(format!("synthesis: {e}")))
    }

    pub fn sample_times(&self) -> Result<Vec<f64>> {
        let times = match &self.sample_times {
            SampleTimes::Count { count } => {
                if *count == 0 {
                    return Err(Error::Config("sample_times.count: must be at least 1".into()));
                }
                uniform_sample_times(self.horizon, *count)
            }
            SampleTimes::Explicit { times } => times.clone(),
        };
        if times.len() < 2 || times[0] != 0.0 || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "sample_times: need at least two strictly increasing times starting at 0".into(),
            ));
        }
        Ok(times)
    }

    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.architecture.hidden);
        sizes.push(1);
        sizes
    }

    pub fn seeds(&self) -> DerivedSeeds {
        DerivedSeeds::from_run_seed(self.seed, self.validation.seed)
    }
}

/// Everything a run needs before training starts.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: RunConfig,
    pub seeds: DerivedSeeds,
    pub system: SystemModel,
    pub grids: GridSets,
    pub sample_times: Vec<f64>,
    pub step: f64,
    pub samples: Vec<DiscretizedTrajectory>,
    pub constants_domain: BoxRegion,
    pub system_constants: (ConstantEstimate, ConstantEstimate),
    pub synthesis: SynthesisConfig,
    pub initial_certificate: NeuralCertificate,
}

impl Prepared {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let seeds = config.seeds();
        let system = config
            .system
            .build()?
            .with_constants(config.constants.lipschitz_f, config.constants.bound_f);
        let grids = GridSets::from_regions(&config.regions, config.grids.points_per_dim, config.grids.margin)?;
        let sample_times = config.sample_times()?;
        let max_gap = sample_times.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        let step = config.integrator_step.unwrap_or(max_gap / 10.0);
        let initial_states = sample_initial_states(&config.regions.initial, config.n_train, seeds.samples)?;
        let samples = discretized_batch(&system, &initial_states, config.horizon, step, &sample_times)?;
        let constants_domain = config
            .constants_domain
            .clone()
            .unwrap_or_else(|| config.regions.domain.clone());
        let system_constants = system_constants(
            &system,
            &constants_domain,
            config.constants.samples,
            seeds.system_constants,
            config.constants.safety_factor,
        )?;
        let mut synthesis = config.synthesis.clone();
        synthesis.constant_seed = seeds.certificate_constants;
        synthesis.constant_samples = config.constants.samples;
        synthesis.safety_factor = config.constants.safety_factor;
        let initial_certificate = NeuralCertificate::random(
            &config.layer_sizes(system.dim()),
            config.architecture.activation,
            seeds.init,
        )?;
        Ok(Self {
            config: config.clone(),
            seeds,
            system,
            grids,
            sample_times,
            step,
            samples,
            constants_domain,
            system_constants,
            synthesis,
            initial_certificate,
        })
    }

    pub fn max_gap(&self) -> f64 {
        Tightening::max_gap_of(&self.samples)
    }

    pub fn tightening(&self) -> Tightening {
        Tightening::new(
            self.system_constants,
            self.max_gap(),
            self.constants_domain.clone(),
            &self.synthesis,
            self.config.architecture.hidden.len() + 1,
            self.config.architecture.activation,
        )
    }

    /// Runs the sampling-and-discarding synthesis on all training samples.
    pub fn synthesize(&self) -> Result<SynthesisResult> {
        self.synthesize_on(&self.samples)
    }

    /// Runs the synthesis on a given set of discretized samples.
    pub fn synthesize_on(&self, samples: &[DiscretizedTrajectory]) -> Result<SynthesisResult> {
        let problem = Problem {
            samples,
            grids: &self.grids,
            horizon: self.config.horizon,
        };
        algorithm2(&problem, &self.synthesis, &self.tightening(), &self.initial_certificate)
    }

    /// Reruns the synthesis on exactly the compression samples of `result`, in
    /// their original relative order.
    pub fn rerun_on_compression(&self, result: &SynthesisResult) -> Result<SynthesisResult> {
        let mut indices = result.compression.indices.clone();
        indices.sort_unstable();
        let subset: Vec<DiscretizedTrajectory> = indices.iter().map(|&i| self.samples[i].clone()).collect();
        self.synthesize_on(&subset)
    }

    /// Monte-Carlo validation of `cert` with tightening `d` against risk level `epsilon`.
    pub fn validate(
        &self,
        cert: &NeuralCertificate,
        d: f64,
        epsilon: f64,
        n_fresh: Option<usize>,
    ) -> Result<ValidationReport> {
        let request = ValidationRequest {
            system: &self.system,
            regions: &self.config.regions,
            grids: &self.grids,
            horizon: self.config.horizon,
            sample_times: &self.sample_times,
            step: Some(self.step),
            n_fresh: n_fresh.unwrap_or(self.config.validation.n_fresh),
            d,
            epsilon,
            seed: self.seeds.validation,
            constants_domain: Some(&self.constants_domain),
        };
        monte_carlo_validate(cert, &request)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CompressionReport {
    pub size: usize,
    pub indices: Vec<usize>,
    pub jump_count: usize,
    pub discarded_count: usize,
}

/// Everything needed to audit and re-run a synthesis.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema: u32,
    pub name: Option<String>,
    pub system: String,
    pub success: bool,
    pub distribution: String,
    pub assumed_from_figure: bool,
    pub seeds: DerivedSeeds,
    pub sample_count: usize,
    pub max_sampling_gap: f64,
    pub integrator_step: f64,
    pub compression: CompressionReport,
    pub pac: PacBound,
    pub d: f64,
    pub constants: ConstantSet,
    pub state_loss: f64,
    /// Largest `l^Δ` over the samples not discarded.
    pub max_traj_loss_retained: f64,
    /// Largest `l^Δ` over every training sample, discarded ones included.
    pub max_traj_loss_all: f64,
    pub retained_count: usize,
    pub inner_iterations: usize,
    pub state_iterations: usize,
    pub outer_iterations: usize,
    pub guarantee: Option<GuaranteeStatement>,
    pub wall_time: f64,
    pub config: RunConfig,
}

/// A finished synthesis with its bound and report.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub result: SynthesisResult,
    pub bound: PacBound,
    pub guarantee: Option<GuaranteeStatement>,
    pub report: RunReport,
}

impl RunOutcome {
    pub fn from_result(prepared: &Prepared, result: SynthesisResult) -> Result<Self> {
        let bound = PacBound::new(result.compression.len(), prepared.config.beta, prepared.samples.len())?;
        let guarantee = if result.is_success() {
            Some(assemble_guarantee(&result, bound)?)
        } else {
            None
        };
        let report = RunReport {
            schema: SCHEMA_VERSION,
            name: prepared.config.name.clone(),
            system: prepared.system.name().to_string(),
            success: result.is_success(),
            distribution: prepared.config.distribution.clone(),
            assumed_from_figure: prepared.config.assumed_from_figure,
            seeds: prepared.seeds,
            sample_count: prepared.samples.len(),
            max_sampling_gap: prepared.max_gap(),
            integrator_step: prepared.step,
            compression: CompressionReport {
                size: result.compression.len(),
                indices: result.compression.indices.clone(),
                jump_count: result.compression.jump_count,
                discarded_count: result.compression.discarded_count,
            },
            pac: bound,
            d: result.d_used,
            constants: result.constants,
            state_loss: result.final_state_loss,
            max_traj_loss_retained: result.max_retained_traj_loss(),
            max_traj_loss_all: result
                .final_traj_losses
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max),
            retained_count: result.retained.len(),
            inner_iterations: result.inner_iterations,
            state_iterations: result.state_iterations,
            outer_iterations: result.outer_iterations,
            guarantee: guarantee.clone(),
            wall_time: result.wall_time,
            config: prepared.config.clone(),
        };
        Ok(Self {
            result,
            bound,
            guarantee,
            report,
        })
    }
}

/// Prepares, synthesizes and bounds a run described by `config`.
pub fn run_synthesis(config: &RunConfig) -> Result<(Prepared, RunOutcome)> {
    let prepared = Prepared::new(config)?;
    let result = prepared.synthesize()?;
    let outcome = RunOutcome::from_result(&prepared, result)?;
    Ok((prepared, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema": 1,
        "system": "jet_engine",
        "regions": {
            "domain": {"lower": [-1, -1], "upper": [1, 1]},
            "initial": {"lower": [-0.1, -0.1], "upper": [0.1, 0.1]},
            "unsafe": {"lower": [0.5, 0.5], "upper": [1, 1]}
        },
        "horizon": 1.0,
        "sample_times": {"count": 10},
        "n_train": 5,
        "beta": 0.01
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.architecture, Architecture::default());
        assert_eq!(c.grids, GridConfig::default());
        assert_eq!(c.distribution, "uniform");
        assert_eq!(c.sample_times().unwrap().len(), 11);
        assert_eq!(c.layer_sizes(2), vec![2, 16, 16, 1]);
    }

    #[test]
    fn config_errors_name_the_field() {
        let unknown = MINIMAL.replace("\"n_train\"", "\"n_trian\"");
        let e = RunConfig::from_json(&unknown).unwrap_err().to_string();
        assert!(e.contains("n_trian"), "{e}");
        let schema = MINIMAL.replace("\"schema\": 1", "\"schema\": 2");
        assert!(RunConfig::from_json(&schema)
            .unwrap_err()
            .to_string()
            .contains("schema"));
        let beta = MINIMAL.replace("\"beta\": 0.01", "\"beta\": 1.5");
        assert!(RunConfig::from_json(&beta).unwrap_err().to_string().contains("beta"));
        let overlap = MINIMAL.replace("[0.5, 0.5]", "[0.0, 0.0]");
        assert!(RunConfig::from_json(&overlap)
            .unwrap_err()
            .to_string()
            .contains("intersect"));
        let system = MINIMAL.replace("jet_engine", "pendulum");
        assert!(RunConfig::from_json(&system)
            .unwrap_err()
            .to_string()
            .contains("pendulum"));
    }

    #[test]
    fn inline_linear_system() {
        let text = MINIMAL.replace("\"jet_engine\"", r#"{"linear": [[0, 1], [-1, 0]]}"#);
        let c = RunConfig::from_json(&text).unwrap();
        let s = c.system.build().unwrap();
        assert_eq!(s.eval(&[1.0, 2.0]).unwrap(), vec![2.0, -1.0]);
    }

    #[test]
    fn seeds_are_distinct() {
        let s = DerivedSeeds::from_run_seed(7, None);
        let all = [
            s.samples,
            s.init,
            s.system_constants,
            s.certificate_constants,
            s.validation,
        ];
        let unique: std::collections::BTreeSet<_> = all.iter().collect();
        assert_eq!(unique.len(), all.len());
        assert_eq!(DerivedSeeds::from_run_seed(7, Some(1)).validation, 1);
    }

    #[test]
    fn preparation_is_deterministic() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        let a = Prepared::new(&c).unwrap();
        let b = Prepared::new(&c).unwrap();
        assert_eq!(a.samples.len(), 5);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.flat_states(), y.flat_states());
        }
        assert_eq!(a.initial_certificate.params(), b.initial_certificate.params());
        assert_eq!(a.system_constants, b.system_constants);
    }
}
