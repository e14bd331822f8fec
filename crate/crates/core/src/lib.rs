//! Neural barrier-certificate synthesis for continuous-time systems with
//! probably-approximately-correct guarantees from sampled trajectories.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certificate;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod lipschitz;
pub mod loss;
pub mod pac;
pub mod synthesis;
pub mod validation;

pub use certificate::{Activation, NeuralCertificate, ParamVector};
pub use dynamics::{BoxRegion, ContinuousTrajectory, DiscretizedTrajectory, RegionSpec, SystemModel};
pub use error::{Error, Result};
pub use pac::{epsilon, PacBound};
pub use synthesis::{algorithm2, SynthesisConfig, SynthesisResult};
