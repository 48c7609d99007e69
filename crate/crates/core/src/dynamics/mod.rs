//! The coefficient-dynamics engine.
//!
//! A sequence model's output at read time `i` is a linear combination of the
//! value vectors seen so far. Each combination weight is produced by a tiny
//! autonomous linear system: the key at position `j`, scaled by `b_j`, enters
//! as an impulse, evolves through the per-step operators `A_t`, and is read
//! out against the query through a pointwise map. Everything in this module
//! manipulates that quadruple (readout, evolution, scaling, normalization).
//!
//! Two evaluation routes exist and must agree when the readout is linear:
//! the dense route materializes every weight, the recurrent route folds the
//! whole history into one `n x d_v` state.

pub(crate) mod engine;
mod projection;
mod readout;
mod rules;

pub use engine::{
    coefficient_matrix, dense_forward, forward_recurrent, impulse_state, mix_values, CoefficientMatrix,
    RecurrentState,
};
pub use projection::{project, Projected, ProjectionSet};
pub use readout::{KernelFeatureMap, ReadoutMap};
pub use rules::{
    apply_to_columns, evolution_apply, floor_eta, step_operator_matrix, Activation, DerivedScalar,
    DirectionSource, EvolutionKind, EvolutionRule, HouseholderRule, NormalizationRule, ScalarRule,
    ScalingRule, StepOperator, VectorRule, ETA_FLOOR,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Problem dimensions: input `d`, state `n`, value `d_v`, and head count.
/// Heads run independent dynamics on `n/heads`-dimensional slices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    pub n: usize,
    pub d_v: usize,
    pub heads: usize,
}

impl Dims {
    pub fn new(d: usize, n: usize, d_v: usize, heads: usize) -> Result<Self> {
        let dims = Dims { d, n, d_v, heads };
        dims.validate()?;
        Ok(dims)
    }

    /// Single-head square dims, the common test configuration.
    pub fn square(n: usize) -> Self {
        Dims { d: n, n, d_v: n, heads: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 || self.d_v == 0 || self.heads == 0 {
            return Err(Error::InvalidConfig("all dimensions must be positive".into()));
        }
        if self.n % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "state dimension {} is not divisible by {} heads",
                self.n, self.heads
            )));
        }
        if self.d_v % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "value dimension {} is not divisible by {} heads",
                self.d_v, self.heads
            )));
        }
        Ok(())
    }

    /// Per-head state dimension.
    pub fn head_dim(&self) -> usize {
        self.n / self.heads
    }

    /// Per-head value dimension.
    pub fn value_head_dim(&self) -> usize {
        self.d_v / self.heads
    }
}

/// A full coefficient-dynamics instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSpec {
    pub readout: ReadoutMap,
    pub evolution: EvolutionRule,
    pub scaling: ScalingRule,
    pub normalization: NormalizationRule,
    pub dims: Dims,
    /// L2-normalize each head's key slice right after projection. The
    /// rank-one evolution families assume unit keys; turning this off
    /// reproduces their instability.
    #[serde(default)]
    pub normalize_keys: bool,
}

impl DynamicsSpec {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.evolution.validate(self.dims.heads, self.dims.n, self.dims.d)?;
        self.scaling.validate(self.dims.heads, self.dims.d)?;
        self.normalization.validate(self.dims.heads, self.dims.d)?;
        Ok(())
    }

    /// Plain unnormalized linear attention at the given dims; a convenient
    /// base spec for tests and probes.
    pub fn linear_base(dims: Dims) -> Self {
        DynamicsSpec {
            readout: ReadoutMap::Identity,
            evolution: EvolutionRule::identity(),
            scaling: ScalingRule::InverseSqrtN,
            normalization: NormalizationRule::One,
            dims,
            normalize_keys: false,
        }
    }
}

/// One impulse response: the state obtained by injecting key `j` and
/// evolving up to read time `i`. Head slices are concatenated.
#[derive(Clone, Debug, PartialEq)]
pub struct ImpulseState {
    pub vector: ndarray::Array1<f64>,
    pub source_index: usize,
    pub read_index: usize,
}
