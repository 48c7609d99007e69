//! Positional information and growth of normalized coefficients.

use ndarray::{s, Array2};
use serde::Serialize;

use crate::dynamics::engine::{finalize_row, HeadScan};
use crate::dynamics::{coefficient_matrix, project, DynamicsSpec, ProjectionSet};
use crate::error::{Error, Result};

/// Coefficients carry positional information when two identical inputs at
/// different positions produce different coefficients at the same read time.
///
/// Requires `inputs[j] == inputs[j_bar]` exactly; returns whether any head
/// separates the pair beyond 1e-12.
pub fn positional_distinguishability(
    spec: &DynamicsSpec,
    proj: &ProjectionSet,
    inputs: &Array2<f64>,
    j: usize,
    j_bar: usize,
    read_index: usize,
) -> Result<bool> {
    if j == j_bar {
        return Err(Error::InvalidConfig("duplicate positions must differ".into()));
    }
    if j.max(j_bar) > read_index || read_index >= inputs.nrows() {
        return Err(Error::InvalidConfig(
            "duplicate positions must precede the read index".into(),
        ));
    }
    let same = inputs
        .row(j)
        .iter()
        .zip(inputs.row(j_bar).iter())
        .all(|(a, b)| a == b);
    if !same {
        return Err(Error::InvalidConfig(format!(
            "inputs at {j} and {j_bar} are not identical"
        )));
    }
    let coeffs = coefficient_matrix(spec, inputs, proj)?;
    Ok(coeffs.iter().any(|cm| {
        (cm.raw[[read_index, j]] - cm.raw[[read_index, j_bar]]).abs() > 1e-12
    }))
}

/// Trajectory of the worst normalized coefficient magnitude per read time.
#[derive(Clone, Debug, Serialize)]
pub struct GrowthProbe {
    /// `max_j |alpha_{i,j} / eta_i|` for each read time reached.
    pub trajectory: Vec<f64>,
    pub cap: f64,
    pub bounded: bool,
    /// Read time at which the cap was breached or the computation overflowed.
    pub first_unbounded_index: Option<usize>,
}

impl GrowthProbe {
    pub fn write_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "row,max_normalized_coefficient")?;
        for (i, v) in self.trajectory.iter().enumerate() {
            writeln!(w, "{i},{v}")?;
        }
        Ok(())
    }
}

/// Scan read times up to `horizon` and classify the spec as bounded or not
/// under its own normalization. Overflow is data here, not an error: the
/// probe stops and reports the failing index.
pub fn normalized_growth_probe(
    spec: &DynamicsSpec,
    proj: &ProjectionSet,
    inputs: &Array2<f64>,
    horizon: usize,
    cap: f64,
) -> Result<GrowthProbe> {
    if horizon < 2 {
        return Err(Error::InvalidConfig("growth probe needs a horizon of at least 2".into()));
    }
    if inputs.nrows() < horizon {
        return Err(Error::InvalidConfig(format!(
            "probe horizon {horizon} exceeds the {} provided inputs",
            inputs.nrows()
        )));
    }
    spec.validate()?;
    let projected = project(proj, inputs)?;
    let hd = spec.dims.head_dim();

    let mut trajectory: Vec<f64> = Vec::with_capacity(horizon);
    let mut first_unbounded = None;

    'heads: for h in 0..spec.dims.heads {
        let lo = h * hd;
        let q_h = projected.queries.slice(s![.., lo..lo + hd]);
        let k_h = projected.keys.slice(s![.., lo..lo + hd]);
        let mut scan = HeadScan::new(spec, h, inputs, q_h, k_h);
        let mut scores = vec![0.0; horizon];
        let mut raw = vec![0.0; horizon];
        let mut normalized = vec![0.0; horizon];
        for i in 0..horizon {
            let step = scan
                .advance(&mut scores[..=i])
                .and_then(|_| {
                    finalize_row(
                        spec,
                        h,
                        i,
                        inputs.row(i),
                        &scores[..=i],
                        &mut raw[..=i],
                        &mut normalized[..=i],
                    )
                });
            if step.is_err() {
                first_unbounded = Some(i);
                trajectory.truncate(i);
                break 'heads;
            }
            let row_max = normalized[..=i].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if h == 0 {
                trajectory.push(row_max);
            } else if row_max > trajectory[i] {
                trajectory[i] = row_max;
            }
            if !row_max.is_finite() || row_max > cap {
                first_unbounded = Some(i);
                trajectory.truncate(i + 1);
                break 'heads;
            }
        }
    }

    Ok(GrowthProbe {
        trajectory,
        cap,
        bounded: first_unbounded.is_none(),
        first_unbounded_index: first_unbounded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{
        Dims, EvolutionRule, NormalizationRule, ReadoutMap, ScalingRule,
    };
    use crate::verify::specgen::random_inputs;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn duplicated_inputs(len: usize, d: usize, j: usize, j_bar: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = random_inputs(&mut rng, len, d);
        let row = inputs.row(j).to_owned();
        inputs.row_mut(j_bar).assign(&row);
        inputs
    }

    #[test]
    fn identity_evolution_cannot_distinguish_positions() {
        let spec = {
            let mut s = DynamicsSpec::linear_base(Dims::square(4));
            s.readout = ReadoutMap::Exponential;
            s.normalization = NormalizationRule::CoefficientSum;
            s
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let proj = ProjectionSet::random(&spec.dims, &mut rng);
        let inputs = duplicated_inputs(8, 4, 2, 5, 2);
        assert!(!positional_distinguishability(&spec, &proj, &inputs, 2, 5, 7).unwrap());
    }

    #[test]
    fn decaying_scalar_distinguishes_positions() {
        let mut spec = DynamicsSpec::linear_base(Dims::square(4));
        spec.evolution = EvolutionRule::constant_scalar(0.95).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let proj = ProjectionSet::random(&spec.dims, &mut rng);
        let inputs = duplicated_inputs(8, 4, 2, 5, 4);
        assert!(positional_distinguishability(&spec, &proj, &inputs, 2, 5, 7).unwrap());
    }

    #[test]
    fn zero_keys_defeat_positional_information() {
        let mut spec = DynamicsSpec::linear_base(Dims::square(2));
        spec.evolution = EvolutionRule::constant_scalar(0.95).unwrap();
        let proj = ProjectionSet::identity(2);
        // Both duplicates are zero vectors; their coefficients vanish alike.
        let mut inputs = random_inputs(&mut ChaCha8Rng::seed_from_u64(5), 6, 2);
        inputs.row_mut(1).fill(0.0);
        inputs.row_mut(3).fill(0.0);
        assert!(!positional_distinguishability(&spec, &proj, &inputs, 1, 3, 5).unwrap());
    }

    #[test]
    fn mismatched_duplicates_are_rejected() {
        let spec = DynamicsSpec::linear_base(Dims::square(2));
        let proj = ProjectionSet::identity(2);
        let inputs = random_inputs(&mut ChaCha8Rng::seed_from_u64(6), 5, 2);
        let err = positional_distinguishability(&spec, &proj, &inputs, 0, 2, 4).unwrap_err();
        assert!(err.to_string().contains("not identical"));
    }

    #[test]
    fn geometric_normalization_bounds_matched_growth() {
        // Unstable scalar 1.05 with identity readout against eta = 1.05^i:
        // the normalized coefficients stay bounded.
        let mut spec = DynamicsSpec::linear_base(Dims::square(4));
        spec.evolution = EvolutionRule::unstable_scalar(1.05);
        spec.normalization = NormalizationRule::Geometric { rho: 1.05 };
        spec.scaling = ScalingRule::Constant { value: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let proj = ProjectionSet::random(&spec.dims, &mut rng);
        let inputs = random_inputs(&mut rng, 64, 4);
        let probe = normalized_growth_probe(&spec, &proj, &inputs, 64, 1e6).unwrap();
        assert!(probe.bounded, "trajectory: {:?}", &probe.trajectory[..8]);
    }

    #[test]
    fn exponential_readout_outgrows_geometric_normalization() {
        let mut spec = DynamicsSpec::linear_base(Dims::square(4));
        spec.readout = ReadoutMap::Exponential;
        spec.evolution = EvolutionRule::unstable_scalar(1.05);
        spec.normalization = NormalizationRule::Geometric { rho: 1.05 };
        spec.scaling = ScalingRule::Constant { value: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let proj = ProjectionSet::random(&spec.dims, &mut rng);
        let inputs = random_inputs(&mut rng, 256, 4);
        let probe = normalized_growth_probe(&spec, &proj, &inputs, 256, 1e6).unwrap();
        assert!(!probe.bounded);
        assert!(probe.first_unbounded_index.is_some());
    }

    #[test]
    fn sum_normalization_caps_the_trajectory_at_one() {
        let mut spec = DynamicsSpec::linear_base(Dims::square(4));
        spec.readout = ReadoutMap::Softplus;
        spec.evolution = EvolutionRule::unstable_scalar(1.05);
        spec.normalization = NormalizationRule::CoefficientSum;
        spec.scaling = ScalingRule::Constant { value: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let proj = ProjectionSet::random(&spec.dims, &mut rng);
        let inputs = random_inputs(&mut rng, 64, 4);
        let probe = normalized_growth_probe(&spec, &proj, &inputs, 64, 1e6).unwrap();
        assert!(probe.bounded);
        assert!(probe.trajectory.iter().all(|v| *v <= 1.0 + 1e-12));
    }
}
