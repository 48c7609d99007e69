//! Randomized spec and input generators shared by the invariant checks.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dynamics::{
    Activation, DerivedScalar, Dims, DirectionSource, DynamicsSpec, EvolutionKind, EvolutionRule,
    HouseholderRule, NormalizationRule, ReadoutMap, ScalarRule, ScalingRule, VectorRule,
};

pub fn standard_normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let g: f64 = StandardNormal.sample(rng);
        g * std
    })
}

pub fn random_inputs(rng: &mut impl Rng, len: usize, d: usize) -> Array2<f64> {
    standard_normal_matrix(rng, len, d, 1.0)
}

pub fn random_derived_scalar(
    rng: &mut impl Rng,
    heads: usize,
    d: usize,
    activation: Activation,
    scale: f64,
    bias: f64,
) -> DerivedScalar {
    let std = 1.0 / (d as f64).sqrt();
    DerivedScalar {
        w: (0..heads)
            .map(|_| {
                (0..d)
                    .map(|_| {
                        let g: f64 = StandardNormal.sample(rng);
                        g * std
                    })
                    .collect()
            })
            .collect(),
        bias: vec![bias; heads],
        activation,
        scale,
    }
}

/// Evolution-rule kinds used by randomized sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvolutionFamily {
    Identity,
    ConstantScalar,
    DerivedScalar,
    Diagonal,
    Householder,
    GatedHouseholder,
}

pub const NON_IDENTITY_FAMILIES: [EvolutionFamily; 5] = [
    EvolutionFamily::ConstantScalar,
    EvolutionFamily::DerivedScalar,
    EvolutionFamily::Diagonal,
    EvolutionFamily::Householder,
    EvolutionFamily::GatedHouseholder,
];

pub fn random_evolution(rng: &mut impl Rng, family: EvolutionFamily, dims: &Dims) -> EvolutionRule {
    let kind = match family {
        EvolutionFamily::Identity => EvolutionKind::Identity,
        EvolutionFamily::ConstantScalar => EvolutionKind::Scalar {
            rule: ScalarRule::Constant {
                value: rng.random_range(0.5..0.95),
            },
        },
        EvolutionFamily::DerivedScalar => EvolutionKind::Scalar {
            rule: ScalarRule::InputDerived(random_derived_scalar(
                rng,
                dims.heads,
                dims.d,
                Activation::Sigmoid,
                1.0,
                1.0,
            )),
        },
        EvolutionFamily::Diagonal => EvolutionKind::Diagonal {
            rule: VectorRule::Constant {
                values: (0..dims.n).map(|_| rng.random_range(0.3..0.95)).collect(),
            },
        },
        EvolutionFamily::Householder => EvolutionKind::Householder(random_householder(rng, dims)),
        EvolutionFamily::GatedHouseholder => EvolutionKind::GatedHouseholder {
            gate: ScalarRule::InputDerived(random_derived_scalar(
                rng,
                dims.heads,
                dims.d,
                Activation::Sigmoid,
                1.0,
                2.0,
            )),
            householder: random_householder(rng, dims),
        },
    };
    EvolutionRule {
        kind,
        allow_unstable: false,
    }
}

fn random_householder(rng: &mut impl Rng, dims: &Dims) -> HouseholderRule {
    HouseholderRule {
        direction: DirectionSource::Keys,
        beta: ScalarRule::InputDerived(random_derived_scalar(
            rng,
            dims.heads,
            dims.d,
            Activation::Sigmoid,
            2.0,
            0.0,
        )),
        normalize_direction: true,
    }
}

/// A spec with the requested readout over a randomly drawn evolution family
/// and an unproblematic scaling/normalization pairing.
pub fn random_spec(rng: &mut impl Rng, dims: Dims, readout: ReadoutMap) -> DynamicsSpec {
    let family = NON_IDENTITY_FAMILIES[rng.random_range(0..NON_IDENTITY_FAMILIES.len())];
    let evolution = random_evolution(rng, family, &dims);
    let normalize_keys = matches!(
        evolution.kind,
        EvolutionKind::Householder(_) | EvolutionKind::GatedHouseholder { .. }
    );
    DynamicsSpec {
        readout,
        evolution,
        scaling: ScalingRule::InverseSqrtN,
        normalization: if readout.nonnegative() {
            NormalizationRule::CoefficientSum
        } else {
            NormalizationRule::One
        },
        dims,
        normalize_keys,
    }
}
