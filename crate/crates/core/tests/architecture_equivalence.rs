//! Cross-route checks: the engine's dense route against each architecture's
//! native formulation, and the documented degenerate reductions.

use coeffdyn::architectures::{native_forward, preset, ArchitectureName, HyperParams, ALL_ARCHITECTURES};
use coeffdyn::dynamics::{
    coefficient_matrix, dense_forward, project, Dims, DynamicsSpec, EvolutionKind, EvolutionRule,
    HouseholderRule, NormalizationRule, ProjectionSet, ReadoutMap, ScalarRule, ScalingRule, VectorRule,
};
use coeffdyn::verify::specgen::random_inputs;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max)
}

fn engine_forward(spec: &DynamicsSpec, proj: &ProjectionSet, inputs: &Array2<f64>) -> Array2<f64> {
    let p = project(proj, inputs).unwrap();
    dense_forward(spec, &p.queries, &p.keys, &p.values, inputs).unwrap()
}

#[test]
fn native_matches_engine_for_every_preset() {
    // Smoke version of the full acceptance sweep: a few random instances per
    // architecture, multi-head included.
    let hyper = HyperParams::default();
    for (idx, name) in ALL_ARCHITECTURES.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + idx as u64);
        for trial in 0..5 {
            let heads = if trial % 2 == 0 { 1 } else { 2 };
            let dims = Dims::new(6, 4 * heads, 4 * heads, heads).unwrap();
            let p = preset(name, dims, &hyper, 7_000 + trial as u64).unwrap();
            let inputs = random_inputs(&mut rng, 12, dims.d);
            let native = native_forward(name, &p.spec, &p.proj, &inputs).unwrap();
            let engine = engine_forward(&p.spec, &p.proj, &inputs);
            let diff = max_abs_diff(&native, &engine);
            assert!(diff < 1e-10, "{name} trial {trial}: max abs diff {diff}");
        }
    }
}

#[test]
fn single_token_softmax_copies_the_value() {
    let dims = Dims::square(4);
    let p = preset(ArchitectureName::Softmax, dims, &HyperParams::default(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let inputs = random_inputs(&mut rng, 1, 4);
    let projected = project(&p.proj, &inputs).unwrap();
    let y = native_forward(ArchitectureName::Softmax, &p.spec, &p.proj, &inputs).unwrap();
    // One token: the single normalized coefficient is exactly 1.
    for (a, b) in y.iter().zip(projected.values.iter()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn gla_with_unit_gates_is_unnormalized_linear_attention() {
    let dims = Dims::square(4);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let inputs = random_inputs(&mut rng, 10, 4);
    let proj = ProjectionSet::random(&dims, &mut rng);

    let mut gla = DynamicsSpec::linear_base(dims);
    gla.evolution = EvolutionRule {
        kind: EvolutionKind::Diagonal {
            rule: VectorRule::Constant { values: vec![1.0; 4] },
        },
        allow_unstable: false,
    };
    let plain = DynamicsSpec::linear_base(dims);

    let via_native = native_forward(ArchitectureName::Gla, &gla, &proj, &inputs).unwrap();
    let via_plain = engine_forward(&plain, &proj, &inputs);
    assert!(max_abs_diff(&via_native, &via_plain) < 1e-12);
}

#[test]
fn gated_deltanet_with_unit_gate_reduces_to_deltanet() {
    let dims = Dims::square(4);
    let hyper = HyperParams::default();
    let gated = preset(ArchitectureName::GatedDeltanet, dims, &hyper, 5).unwrap();
    // Same write strength, gate pinned to exactly 1.
    let (beta, householder) = match &gated.spec.evolution.kind {
        EvolutionKind::GatedHouseholder { householder, .. } => {
            (householder.beta.clone(), householder.clone())
        }
        other => panic!("unexpected shape {other:?}"),
    };
    let mut unit_gate = gated.spec.clone();
    unit_gate.evolution = EvolutionRule {
        kind: EvolutionKind::GatedHouseholder {
            gate: ScalarRule::Constant { value: 1.0 },
            householder: householder.clone(),
        },
        allow_unstable: false,
    };
    let mut plain = gated.spec.clone();
    plain.evolution = EvolutionRule {
        kind: EvolutionKind::Householder(HouseholderRule {
            direction: householder.direction.clone(),
            beta,
            normalize_direction: householder.normalize_direction,
        }),
        allow_unstable: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let inputs = random_inputs(&mut rng, 9, 4);
    let a = engine_forward(&unit_gate, &gated.proj, &inputs);
    let b = engine_forward(&plain, &gated.proj, &inputs);
    // Multiplying by the exact constant 1.0 is exact.
    assert_eq!(a, b);
}

#[test]
fn mlstm_with_unit_gates_reduces_to_scaled_dot_products() {
    // f = 0, i = 0, o = 1: raw coefficients become q.k/sqrt(head_dim).
    let dims = Dims::square(4);
    let mut spec = DynamicsSpec::linear_base(dims);
    spec.evolution = EvolutionRule {
        kind: EvolutionKind::Scalar {
            rule: ScalarRule::Constant { value: 1.0 },
        },
        allow_unstable: false,
    };
    spec.normalization = NormalizationRule::ExternalState {
        output_gate: ScalarRule::Constant { value: 1.0 },
        floor: 1.0,
    };
    let plain = DynamicsSpec::linear_base(dims);

    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let proj = ProjectionSet::random(&dims, &mut rng);
    // Small inputs keep |sum of coefficients| under the normalizer floor, so
    // eta pins to 1 and outputs match the unnormalized form exactly.
    let inputs = random_inputs(&mut rng, 8, 4) * 0.05;

    let raw_mlstm = &coefficient_matrix(&spec, &inputs, &proj).unwrap()[0];
    let raw_plain = &coefficient_matrix(&plain, &inputs, &proj).unwrap()[0];
    for i in 0..8 {
        for j in 0..=i {
            assert!((raw_mlstm.raw[[i, j]] - raw_plain.raw[[i, j]]).abs() < 1e-15);
        }
        assert_eq!(raw_mlstm.eta[i], 1.0, "floor should pin eta at this input scale");
    }
    let a = engine_forward(&spec, &proj, &inputs);
    let b = engine_forward(&plain, &proj, &inputs);
    assert!(max_abs_diff(&a, &b) < 1e-15);
}

#[test]
fn normalized_attn_without_features_uses_identity_readout() {
    let mut hyper = HyperParams::default();
    hyper.nonnegative_features = false;
    let p = preset(ArchitectureName::NormalizedAttn, Dims::square(4), &hyper, 9).unwrap();
    assert_eq!(p.spec.readout, ReadoutMap::Identity);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inputs = random_inputs(&mut rng, 6, 4);
    let native = native_forward(ArchitectureName::NormalizedAttn, &p.spec, &p.proj, &inputs).unwrap();
    let engine = engine_forward(&p.spec, &p.proj, &inputs);
    assert!(max_abs_diff(&native, &engine) < 1e-10);
}

#[test]
fn preset_scaling_matches_head_dimension() {
    // The inverse-sqrt scaling uses the per-head dimension, not n.
    let dims = Dims::new(8, 8, 8, 4).unwrap();
    let spec = DynamicsSpec::linear_base(dims);
    let b = match spec.scaling {
        ScalingRule::InverseSqrtN => ScalingRule::InverseSqrtN.eval(0, dims.head_dim(), 0, ndarray::Array1::zeros(8).view()),
        _ => unreachable!(),
    };
    assert_eq!(b, 1.0 / (2.0f64).sqrt());
}
