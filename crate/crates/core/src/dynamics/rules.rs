//! Evolution, scaling, and normalization rules.
//!
//! A rule is a recipe; materializing it at a step yields concrete numbers.
//! Input-derived rules read the raw input vector `x_t` (and, for key-driven
//! directions, the key `k_t`), so the same spec can be evaluated on any
//! sequence.

use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{sigmoid, softplus};

/// Pointwise activation for derived per-step parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Activation {
    Identity,
    Sigmoid,
    /// `1 - sigmoid(x)`; the gate complement used by coupled input/forget
    /// parameterizations.
    SigmoidComplement,
    Softplus,
    /// `exp(clamp(x, lo, hi))`; log-domain gates with a hard clamp.
    ExpClamped { lo: f64, hi: f64 },
    /// `exp(-rate * softplus(x))`; discretized state decay.
    ExpNegSoftplus { rate: f64 },
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Sigmoid => sigmoid(x),
            Activation::SigmoidComplement => 1.0 - sigmoid(x),
            Activation::Softplus => softplus(x),
            Activation::ExpClamped { lo, hi } => x.clamp(*lo, *hi).exp(),
            Activation::ExpNegSoftplus { rate } => (-rate * softplus(x)).exp(),
        }
    }

    /// Output range over all real inputs, used for stability declarations.
    fn range(&self) -> (f64, f64) {
        match self {
            Activation::Identity => (f64::NEG_INFINITY, f64::INFINITY),
            Activation::Sigmoid | Activation::SigmoidComplement => (0.0, 1.0),
            Activation::Softplus => (0.0, f64::INFINITY),
            Activation::ExpClamped { lo, hi } => (lo.exp(), hi.exp()),
            Activation::ExpNegSoftplus { .. } => (0.0, 1.0),
        }
    }
}

/// A per-head scalar computed from the input: `scale * act(w[h] . x + bias[h])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedScalar {
    /// One weight row per head, each of input dimension `d`.
    pub w: Vec<Vec<f64>>,
    /// One bias per head.
    pub bias: Vec<f64>,
    pub activation: Activation,
    pub scale: f64,
}

impl DerivedScalar {
    pub fn eval(&self, head: usize, x: ArrayView1<f64>) -> f64 {
        let row = &self.w[head];
        let mut acc = self.bias[head];
        for (wi, xi) in row.iter().zip(x.iter()) {
            acc += wi * xi;
        }
        self.scale * self.activation.apply(acc)
    }

    fn validate(&self, heads: usize, d: usize, what: &str) -> Result<()> {
        if self.w.len() != heads || self.bias.len() != heads {
            return Err(Error::InvalidConfig(format!(
                "{what}: expected {heads} head rows, got {} weights / {} biases",
                self.w.len(),
                self.bias.len()
            )));
        }
        for row in &self.w {
            if row.len() != d {
                return Err(Error::InvalidConfig(format!(
                    "{what}: weight row has length {}, input dimension is {d}",
                    row.len()
                )));
            }
        }
        Ok(())
    }

    /// Magnitude bound of the produced scalar, if one exists.
    fn magnitude_bound(&self) -> Option<f64> {
        let (lo, hi) = self.activation.range();
        if lo.is_finite() && hi.is_finite() {
            Some(self.scale.abs() * lo.abs().max(hi.abs()))
        } else {
            None
        }
    }
}

/// Source of a per-step scalar parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "source")]
pub enum ScalarRule {
    Constant { value: f64 },
    /// Prescribed value per position; positions beyond the table repeat the
    /// last entry.
    PerPosition { values: Vec<f64> },
    InputDerived(DerivedScalar),
}

impl ScalarRule {
    pub fn eval(&self, head: usize, t: usize, x: ArrayView1<f64>) -> f64 {
        match self {
            ScalarRule::Constant { value } => *value,
            ScalarRule::PerPosition { values } => {
                let idx = t.min(values.len().saturating_sub(1));
                values[idx]
            }
            ScalarRule::InputDerived(d) => d.eval(head, x),
        }
    }

    fn magnitude_bound(&self) -> Option<f64> {
        match self {
            ScalarRule::Constant { value } => Some(value.abs()),
            ScalarRule::PerPosition { values } => values
                .iter()
                .map(|v| v.abs())
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v)))),
            ScalarRule::InputDerived(d) => d.magnitude_bound(),
        }
    }

    fn validate(&self, heads: usize, d: usize, what: &str) -> Result<()> {
        match self {
            ScalarRule::InputDerived(ds) => ds.validate(heads, d, what),
            ScalarRule::PerPosition { values } if values.is_empty() => Err(Error::InvalidConfig(
                format!("{what}: per-position table is empty"),
            )),
            _ => Ok(()),
        }
    }
}

/// A per-step vector in the full state dimension `n`; heads read their slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "source")]
pub enum VectorRule {
    Constant { values: Vec<f64> },
    /// `scale * act(W x + bias)` with `W` of shape `n x d`.
    InputDerived {
        w: Vec<Vec<f64>>,
        bias: Vec<f64>,
        activation: Activation,
        scale: f64,
    },
}

impl VectorRule {
    /// Evaluate the slice for `head` (rows `head*hd .. (head+1)*hd`).
    pub fn eval(&self, head: usize, head_dim: usize, x: ArrayView1<f64>) -> Array1<f64> {
        let lo = head * head_dim;
        match self {
            VectorRule::Constant { values } => Array1::from_iter(values[lo..lo + head_dim].iter().copied()),
            VectorRule::InputDerived {
                w,
                bias,
                activation,
                scale,
            } => Array1::from_iter((lo..lo + head_dim).map(|r| {
                let mut acc = bias[r];
                for (wi, xi) in w[r].iter().zip(x.iter()) {
                    acc += wi * xi;
                }
                scale * activation.apply(acc)
            })),
        }
    }

    fn magnitude_bound(&self) -> Option<f64> {
        match self {
            VectorRule::Constant { values } => values
                .iter()
                .map(|v| v.abs())
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v)))),
            VectorRule::InputDerived { activation, scale, .. } => {
                let (lo, hi) = activation.range();
                if lo.is_finite() && hi.is_finite() {
                    Some(scale.abs() * lo.abs().max(hi.abs()))
                } else {
                    None
                }
            }
        }
    }

    fn validate(&self, n: usize, d: usize, what: &str) -> Result<()> {
        match self {
            VectorRule::Constant { values } => {
                if values.len() != n {
                    return Err(Error::InvalidConfig(format!(
                        "{what}: constant vector has length {}, state dimension is {n}",
                        values.len()
                    )));
                }
            }
            VectorRule::InputDerived { w, bias, .. } => {
                if w.len() != n || bias.len() != n {
                    return Err(Error::InvalidConfig(format!(
                        "{what}: expected {n} rows, got {} weights / {} biases",
                        w.len(),
                        bias.len()
                    )));
                }
                for row in w {
                    if row.len() != d {
                        return Err(Error::InvalidConfig(format!(
                            "{what}: weight row has length {}, input dimension is {d}",
                            row.len()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Where the rank-one direction of a Householder step comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "source")]
pub enum DirectionSource {
    /// The key at the step itself.
    Keys,
    /// A fixed vector in the full state dimension; heads read their slice.
    Constant { values: Vec<f64> },
    /// `W x`, with `W` of shape `n x d`.
    InputDerived { w: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HouseholderRule {
    pub direction: DirectionSource,
    pub beta: ScalarRule,
    /// Unit-normalize the direction before forming the step operator. With
    /// this on and beta in [0, 2] every eigenvalue stays in [-1, 1].
    pub normalize_direction: bool,
}

/// Evolution rule: the structured family of per-step operators plus the
/// stability declaration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionRule {
    #[serde(flatten)]
    pub kind: EvolutionKind,
    /// Must be set to construct rules that admit |eigenvalue| > 1.
    #[serde(default)]
    pub allow_unstable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum EvolutionKind {
    Identity,
    Scalar { rule: ScalarRule },
    Diagonal { rule: VectorRule },
    Householder(HouseholderRule),
    GatedHouseholder {
        gate: ScalarRule,
        householder: HouseholderRule,
    },
}

/// A materialized per-step operator acting on one head's state slice.
#[derive(Clone, Debug, PartialEq)]
pub enum StepOperator {
    Identity,
    Scalar(f64),
    Diagonal(Array1<f64>),
    Householder { z: Array1<f64>, beta: f64 },
    GatedHouseholder { gate: f64, z: Array1<f64>, beta: f64 },
}

impl EvolutionRule {
    pub fn identity() -> Self {
        EvolutionRule {
            kind: EvolutionKind::Identity,
            allow_unstable: false,
        }
    }

    pub fn constant_scalar(value: f64) -> Result<Self> {
        let rule = EvolutionRule {
            kind: EvolutionKind::Scalar {
                rule: ScalarRule::Constant { value },
            },
            allow_unstable: false,
        };
        rule.check_stability()?;
        Ok(rule)
    }

    /// Like [`EvolutionRule::constant_scalar`] but with the instability
    /// declaration set, for probes that need |lambda| > 1.
    pub fn unstable_scalar(value: f64) -> Self {
        EvolutionRule {
            kind: EvolutionKind::Scalar {
                rule: ScalarRule::Constant { value },
            },
            allow_unstable: true,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, EvolutionKind::Identity)
    }

    /// Reject rules that admit |eigenvalue| > 1 unless `allow_unstable`.
    pub fn check_stability(&self) -> Result<()> {
        if self.allow_unstable {
            return Ok(());
        }
        let fail = |detail: String| Err(Error::Unstable { detail });
        match &self.kind {
            EvolutionKind::Identity => Ok(()),
            EvolutionKind::Scalar { rule } => match rule.magnitude_bound() {
                Some(b) if b <= 1.0 + 1e-12 => Ok(()),
                Some(b) => fail(format!("scalar magnitude bound {b} exceeds 1")),
                None => fail("scalar rule has unbounded range".into()),
            },
            EvolutionKind::Diagonal { rule } => match rule.magnitude_bound() {
                Some(b) if b <= 1.0 + 1e-12 => Ok(()),
                Some(b) => fail(format!("diagonal magnitude bound {b} exceeds 1")),
                None => fail("diagonal rule has unbounded range".into()),
            },
            EvolutionKind::Householder(h) => Self::check_householder(h, 1.0),
            EvolutionKind::GatedHouseholder { gate, householder } => {
                let g = match gate.magnitude_bound() {
                    Some(b) if b <= 1.0 + 1e-12 => b,
                    Some(b) => return fail(format!("gate magnitude bound {b} exceeds 1")),
                    None => return fail("gate rule has unbounded range".into()),
                };
                Self::check_householder(householder, g)
            }
        }
    }

    fn check_householder(h: &HouseholderRule, gate_bound: f64) -> Result<()> {
        if !h.normalize_direction {
            return Err(Error::Unstable {
                detail: "householder direction is not unit-normalized".into(),
            });
        }
        match h.beta.magnitude_bound() {
            // Eigenvalues are gate * {1, 1 - beta}; beta in [0, 2] keeps
            // 1 - beta in [-1, 1].
            Some(b) if b <= 2.0 + 1e-12 && gate_bound <= 1.0 + 1e-12 => Ok(()),
            Some(b) => Err(Error::Unstable {
                detail: format!("householder strength bound {b} exceeds 2"),
            }),
            None => Err(Error::Unstable {
                detail: "householder strength has unbounded range".into(),
            }),
        }
    }

    pub fn validate(&self, heads: usize, n: usize, d: usize) -> Result<()> {
        match &self.kind {
            EvolutionKind::Identity => {}
            EvolutionKind::Scalar { rule } => rule.validate(heads, d, "scalar evolution")?,
            EvolutionKind::Diagonal { rule } => rule.validate(n, d, "diagonal evolution")?,
            EvolutionKind::Householder(h) => Self::validate_householder(h, heads, n, d)?,
            EvolutionKind::GatedHouseholder { gate, householder } => {
                gate.validate(heads, d, "householder gate")?;
                Self::validate_householder(householder, heads, n, d)?;
            }
        }
        self.check_stability()
    }

    fn validate_householder(h: &HouseholderRule, heads: usize, n: usize, d: usize) -> Result<()> {
        h.beta.validate(heads, d, "householder strength")?;
        match &h.direction {
            DirectionSource::Keys => Ok(()),
            DirectionSource::Constant { values } => {
                if values.len() != n {
                    Err(Error::InvalidConfig(format!(
                        "householder direction has length {}, state dimension is {n}",
                        values.len()
                    )))
                } else {
                    Ok(())
                }
            }
            DirectionSource::InputDerived { w } => {
                if w.len() != n || w.iter().any(|r| r.len() != d) {
                    Err(Error::InvalidConfig(
                        "householder direction weights must be n x d".into(),
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Materialize the operator applied at step `t` on one head's slice.
    ///
    /// `x_t` is the raw input at the step, `k_t` the head's key slice (only
    /// read when the direction comes from the keys).
    pub fn step_operator(
        &self,
        head: usize,
        head_dim: usize,
        t: usize,
        x_t: ArrayView1<f64>,
        k_t: ArrayView1<f64>,
    ) -> Result<StepOperator> {
        match &self.kind {
            EvolutionKind::Identity => Ok(StepOperator::Identity),
            EvolutionKind::Scalar { rule } => Ok(StepOperator::Scalar(rule.eval(head, t, x_t))),
            EvolutionKind::Diagonal { rule } => Ok(StepOperator::Diagonal(rule.eval(head, head_dim, x_t))),
            EvolutionKind::Householder(h) => {
                let (z, beta) = Self::materialize_householder(h, head, head_dim, t, x_t, k_t)?;
                Ok(StepOperator::Householder { z, beta })
            }
            EvolutionKind::GatedHouseholder { gate, householder } => {
                let (z, beta) = Self::materialize_householder(householder, head, head_dim, t, x_t, k_t)?;
                Ok(StepOperator::GatedHouseholder {
                    gate: gate.eval(head, t, x_t),
                    z,
                    beta,
                })
            }
        }
    }

    fn materialize_householder(
        h: &HouseholderRule,
        head: usize,
        head_dim: usize,
        t: usize,
        x_t: ArrayView1<f64>,
        k_t: ArrayView1<f64>,
    ) -> Result<(Array1<f64>, f64)> {
        let mut z = match &h.direction {
            DirectionSource::Keys => k_t.to_owned(),
            DirectionSource::Constant { values } => {
                let lo = head * head_dim;
                Array1::from_iter(values[lo..lo + head_dim].iter().copied())
            }
            DirectionSource::InputDerived { w } => {
                let lo = head * head_dim;
                Array1::from_iter((lo..lo + head_dim).map(|r| {
                    w[r].iter().zip(x_t.iter()).map(|(wi, xi)| wi * xi).sum::<f64>()
                }))
            }
        };
        let norm = z.dot(&z).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroDirection { step: t });
        }
        if h.normalize_direction {
            z /= norm;
        }
        Ok((z, h.beta.eval(head, t, x_t)))
    }
}

/// Apply a step operator to a single state vector.
pub fn evolution_apply(op: &StepOperator, v: ArrayView1<f64>) -> Array1<f64> {
    match op {
        StepOperator::Identity => v.to_owned(),
        StepOperator::Scalar(lambda) => &v * *lambda,
        StepOperator::Diagonal(lambda) => &v * lambda,
        StepOperator::Householder { z, beta } => {
            let mut out = v.to_owned();
            out.scaled_add(-beta * z.dot(&v), z);
            out
        }
        StepOperator::GatedHouseholder { gate, z, beta } => {
            let mut out = v.to_owned();
            out.scaled_add(-beta * z.dot(&v), z);
            out *= *gate;
            out
        }
    }
}

/// Apply a step operator to every column of `m` (`head_dim x c`) in place.
pub fn apply_to_columns(op: &StepOperator, m: &mut ArrayViewMut2<f64>) {
    match op {
        StepOperator::Identity => {}
        StepOperator::Scalar(lambda) => m.map_inplace(|v| *v *= lambda),
        StepOperator::Diagonal(lambda) => {
            for (mut row, l) in m.rows_mut().into_iter().zip(lambda.iter()) {
                row.map_inplace(|v| *v *= l);
            }
        }
        StepOperator::Householder { z, beta } => {
            householder_columns(m, z, *beta);
        }
        StepOperator::GatedHouseholder { gate, z, beta } => {
            householder_columns(m, z, *beta);
            m.map_inplace(|v| *v *= gate);
        }
    }
}

fn householder_columns(m: &mut ArrayViewMut2<f64>, z: &Array1<f64>, beta: f64) {
    // m <- m - beta z (z^T m), column by column.
    let cols = m.ncols();
    for c in 0..cols {
        let mut col = m.column_mut(c);
        let zc: f64 = z.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
        let f = beta * zc;
        for (dst, zi) in col.iter_mut().zip(z.iter()) {
            *dst -= f * zi;
        }
    }
}

/// Dense matrix form of a step operator, for eigenvalue probes.
pub fn step_operator_matrix(op: &StepOperator, head_dim: usize) -> Array2<f64> {
    let mut a = Array2::<f64>::eye(head_dim);
    match op {
        StepOperator::Identity => {}
        StepOperator::Scalar(lambda) => a *= *lambda,
        StepOperator::Diagonal(lambda) => {
            for (r, l) in lambda.iter().enumerate() {
                a[[r, r]] = *l;
            }
        }
        StepOperator::Householder { z, beta } => {
            for p in 0..head_dim {
                for q in 0..head_dim {
                    a[[p, q]] -= beta * z[p] * z[q];
                }
            }
        }
        StepOperator::GatedHouseholder { gate, z, beta } => {
            for p in 0..head_dim {
                for q in 0..head_dim {
                    a[[p, q]] -= beta * z[p] * z[q];
                }
            }
            a *= *gate;
        }
    }
    a
}

/// Per-position input scaling `b_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ScalingRule {
    Constant { value: f64 },
    /// Exactly `1/sqrt(head_dim)`.
    InverseSqrtN,
    InputDerived(DerivedScalar),
    PerPosition { values: Vec<f64> },
}

impl ScalingRule {
    pub fn eval(&self, head: usize, head_dim: usize, t: usize, x: ArrayView1<f64>) -> f64 {
        match self {
            ScalingRule::Constant { value } => *value,
            ScalingRule::InverseSqrtN => 1.0 / (head_dim as f64).sqrt(),
            ScalingRule::InputDerived(d) => d.eval(head, x),
            ScalingRule::PerPosition { values } => {
                let idx = t.min(values.len().saturating_sub(1));
                values[idx]
            }
        }
    }

    pub fn validate(&self, heads: usize, d: usize) -> Result<()> {
        match self {
            ScalingRule::InputDerived(ds) => ds.validate(heads, d, "scaling"),
            ScalingRule::PerPosition { values } if values.is_empty() => {
                Err(Error::InvalidConfig("scaling: per-position table is empty".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Floor applied to normalization factors so that normalized coefficients
/// stay finite. Sign-preserving; an exact zero floors to +eps.
pub const ETA_FLOOR: f64 = 1e-30;

pub fn floor_eta(eta: f64) -> f64 {
    if eta.abs() >= ETA_FLOOR {
        eta
    } else if eta < 0.0 {
        -ETA_FLOOR
    } else {
        ETA_FLOOR
    }
}

/// Per-read-time normalization factor `eta_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum NormalizationRule {
    One,
    /// `eta_i = sum_j alpha_{i,j}` (floored).
    CoefficientSum,
    /// `eta_i = rho^i` with 1-based read index.
    Geometric { rho: f64 },
    /// `eta_i = max(|sum_j alpha_{i,j}|, floor) / o_i`, where the accumulator
    /// mirrors the state dynamics and `o_i` is an output gate.
    ExternalState {
        output_gate: ScalarRule,
        floor: f64,
    },
    /// `eta_i` computed directly from the input at the read position.
    PositionDerived(DerivedScalar),
}

impl NormalizationRule {
    pub fn validate(&self, heads: usize, d: usize) -> Result<()> {
        match self {
            NormalizationRule::Geometric { rho } if *rho <= 0.0 => {
                Err(Error::InvalidConfig(format!("geometric normalization needs rho > 0, got {rho}")))
            }
            NormalizationRule::ExternalState { output_gate, floor } => {
                if *floor <= 0.0 {
                    return Err(Error::InvalidConfig("external-state floor must be > 0".into()));
                }
                output_gate.validate(heads, d, "output gate")
            }
            NormalizationRule::PositionDerived(ds) => ds.validate(heads, d, "normalization"),
            _ => Ok(()),
        }
    }
}
