//! Near-zero sets, suppression geometry, and combination classes.

use ndarray::{Array1, Array2, ArrayView1};
use serde::Serialize;

use crate::dynamics::{
    impulse_state, project, Activation, CoefficientMatrix, DerivedScalar, DynamicsSpec,
    NormalizationRule, ProjectionSet, ReadoutMap, ScalarRule,
};
use crate::error::Result;
use crate::linalg;

/// Relative tolerance for span-dimension decisions, against double-precision
/// orthogonalization noise.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// How many mixing coefficients sit inside the near-zero band.
#[derive(Clone, Debug, Serialize)]
pub struct NearZeroReport {
    pub epsilon: f64,
    /// Count of `|alpha| <= epsilon` over the lower triangle, divided by the
    /// triangle size.
    pub fraction: f64,
    pub per_row_counts: Vec<usize>,
    /// Length of `{x : |phi(x)| <= epsilon}` on a probe interval, when the
    /// caller attaches it.
    pub theoretical_measure: Option<f64>,
    /// Whether the counts were taken on normalized or raw coefficients.
    pub on_normalized: bool,
}

impl NearZeroReport {
    pub fn write_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "row,near_zero_count")?;
        for (i, c) in self.per_row_counts.iter().enumerate() {
            writeln!(w, "{i},{c}")?;
        }
        Ok(())
    }
}

/// Count lower-triangle entries within the band.
pub fn near_zero_fraction(coeffs: &CoefficientMatrix, epsilon: f64, on_normalized: bool) -> NearZeroReport {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let len = coeffs.len();
    let m = if on_normalized { &coeffs.normalized } else { &coeffs.raw };
    let mut per_row_counts = Vec::with_capacity(len);
    let mut total = 0usize;
    for i in 0..len {
        let count = (0..=i).filter(|&j| m[[i, j]].abs() <= epsilon).count();
        total += count;
        per_row_counts.push(count);
    }
    let triangle = len * (len + 1) / 2;
    NearZeroReport {
        epsilon,
        fraction: total as f64 / triangle as f64,
        per_row_counts,
        theoretical_measure: None,
        on_normalized,
    }
}

/// The measure of a readout map's near-zero set on an interval.
#[derive(Clone, Debug, Serialize)]
pub struct MeasureReport {
    pub epsilon: f64,
    pub interval: (f64, f64),
    /// Midpoint-rule integral of the indicator `|phi(x)| <= epsilon`.
    pub numeric: f64,
    /// Closed form where the map has an analytic inverse.
    pub analytic: Option<f64>,
}

/// Numerically (and where possible analytically) measure
/// `{x in [lo, hi] : |phi(x)| <= epsilon}`.
///
/// A kernel-product readout acts like the identity map in feature space, so
/// its near-zero set is scored as the identity's.
pub fn readout_near_zero_measure(
    readout: &ReadoutMap,
    epsilon: f64,
    interval: (f64, f64),
    resolution: usize,
) -> MeasureReport {
    let (lo, hi) = interval;
    assert!(lo < hi, "interval must be ordered");
    assert!(resolution >= 2, "resolution must be at least 2");
    assert!(epsilon > 0.0, "epsilon must be positive");

    let effective = match readout {
        ReadoutMap::KernelProduct { .. } => &ReadoutMap::Identity,
        other => other,
    };

    let dx = (hi - lo) / resolution as f64;
    let mut numeric = 0.0;
    for k in 0..resolution {
        let x = lo + (k as f64 + 0.5) * dx;
        if effective.apply(x).abs() <= epsilon {
            numeric += dx;
        }
    }

    // Each map is monotone, so the band is a single interval with closed-form
    // endpoints.
    let clamp_len = |a: f64, b: f64| (b.min(hi) - a.max(lo)).max(0.0);
    let analytic = match effective {
        ReadoutMap::Identity => Some(clamp_len(-epsilon, epsilon)),
        ReadoutMap::Exponential => Some(clamp_len(f64::NEG_INFINITY, epsilon.ln())),
        ReadoutMap::Relu => Some(clamp_len(f64::NEG_INFINITY, epsilon)),
        ReadoutMap::Softplus => {
            // softplus(x) <= eps  <=>  x <= ln(e^eps - 1)
            Some(clamp_len(f64::NEG_INFINITY, (epsilon.exp() - 1.0).ln()))
        }
        ReadoutMap::SigmoidLike => {
            if epsilon >= 1.0 {
                Some(hi - lo)
            } else {
                Some(clamp_len(f64::NEG_INFINITY, (epsilon / (1.0 - epsilon)).ln()))
            }
        }
        ReadoutMap::KernelProduct { .. } => unreachable!(),
    };

    MeasureReport {
        epsilon,
        interval,
        numeric,
        analytic,
    }
}

/// A nonzero query orthogonal to every given state, when one exists.
///
/// Exists iff the states span a proper subspace of the `dim`-dimensional
/// space (rank decided at [`RANK_TOLERANCE`]). An empty state list is
/// vacuous: any unit vector works.
pub fn suppressing_query(states: &[Array1<f64>], dim: usize) -> Option<Array1<f64>> {
    if states.is_empty() {
        let mut q = Array1::<f64>::zeros(dim);
        q[0] = 1.0;
        return Some(q);
    }
    let views: Vec<ArrayView1<f64>> = states.iter().map(|s| s.view()).collect();
    let basis = linalg::orthonormal_basis(&views, RANK_TOLERANCE);
    linalg::orthogonal_complement_direction(&basis, dim)
}

/// Per-row counts of suppressed coefficients, optionally paired with the
/// span dimension of the suppressed states.
#[derive(Clone, Debug, Serialize)]
pub struct ZeroCountProfile {
    pub threshold: f64,
    /// Per row: entries with `|alpha_raw| <= threshold`.
    pub raw_counts: Vec<usize>,
    /// Per row: dimension of the span of the suppressed states.
    pub independent_counts: Vec<usize>,
    /// `head_dim - 1` for identity-readout specs, where the simultaneous
    /// suppression bound applies.
    pub bound: Option<usize>,
}

impl ZeroCountProfile {
    pub fn write_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "row,raw_count,independent_count")?;
        for i in 0..self.raw_counts.len() {
            writeln!(w, "{},{},{}", i, self.raw_counts[i], self.independent_counts[i])?;
        }
        Ok(())
    }
}

/// Count raw coefficients at or below the threshold, row by row.
pub fn zero_count_profile(coeffs: &CoefficientMatrix, threshold: f64) -> Vec<usize> {
    (0..coeffs.len())
        .map(|i| (0..=i).filter(|&j| coeffs.raw[[i, j]].abs() <= threshold).count())
        .collect()
}

/// Full profile for one head: raw counts plus the span dimension of the
/// suppressed impulse states.
pub fn zero_count_profile_with_states(
    spec: &DynamicsSpec,
    inputs: &Array2<f64>,
    proj: &ProjectionSet,
    head: usize,
    threshold: f64,
) -> Result<ZeroCountProfile> {
    let coeffs = crate::dynamics::coefficient_matrix(spec, inputs, proj)?;
    let cm = &coeffs[head];
    let keys = project(proj, inputs)?.keys;
    let hd = spec.dims.head_dim();
    let lo = head * hd;

    let raw_counts = zero_count_profile(cm, threshold);
    let mut independent_counts = Vec::with_capacity(cm.len());
    for i in 0..cm.len() {
        let mut suppressed = Vec::new();
        for j in 0..=i {
            if cm.raw[[i, j]].abs() <= threshold {
                let state = impulse_state(spec, &keys, inputs, j, i)?;
                suppressed.push(state.vector.slice(ndarray::s![lo..lo + hd]).to_owned());
            }
        }
        let views: Vec<ArrayView1<f64>> = suppressed.iter().map(|s| s.view()).collect();
        independent_counts.push(linalg::rank(&views, RANK_TOLERANCE));
    }
    Ok(ZeroCountProfile {
        threshold,
        raw_counts,
        independent_counts,
        bound: spec.readout.is_linear().then(|| hd - 1),
    })
}

/// Geometric class of the linear combination a spec produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassLabel {
    Convex,
    Conical,
    Affine,
    Linear,
}

impl std::fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ClassLabel::Convex => "convex",
            ClassLabel::Conical => "conical",
            ClassLabel::Affine => "affine",
            ClassLabel::Linear => "linear",
        })
    }
}

fn activation_positive(a: &Activation) -> bool {
    matches!(
        a,
        Activation::Sigmoid
            | Activation::SigmoidComplement
            | Activation::ExpClamped { .. }
            | Activation::ExpNegSoftplus { .. }
    )
}

fn derived_positive(ds: &DerivedScalar) -> bool {
    ds.scale > 0.0 && activation_positive(&ds.activation)
}

fn scalar_rule_positive(rule: &ScalarRule) -> bool {
    match rule {
        ScalarRule::Constant { value } => *value > 0.0,
        ScalarRule::PerPosition { values } => values.iter().all(|v| *v > 0.0),
        ScalarRule::InputDerived(ds) => derived_positive(ds),
    }
}

/// Whether the normalization factor is guaranteed positive given nonnegative
/// (or arbitrary) coefficients.
fn eta_positive(norm: &NormalizationRule, coeffs_nonnegative: bool) -> bool {
    match norm {
        NormalizationRule::One => true,
        NormalizationRule::CoefficientSum => coeffs_nonnegative,
        NormalizationRule::Geometric { rho } => *rho > 0.0,
        NormalizationRule::ExternalState { output_gate, floor } => {
            *floor > 0.0 && scalar_rule_positive(output_gate)
        }
        NormalizationRule::PositionDerived(ds) => derived_positive(ds),
    }
}

/// Label per the sign/sum constraints the spec imposes on its normalized
/// coefficients: nonnegative and summing to one is convex, nonnegative alone
/// is conical, summing to one alone is affine, otherwise linear.
pub fn combination_class(spec: &DynamicsSpec) -> ClassLabel {
    let nonneg = spec.readout.nonnegative() && eta_positive(&spec.normalization, true);
    let sums_to_one = matches!(spec.normalization, NormalizationRule::CoefficientSum);
    match (nonneg, sums_to_one) {
        (true, true) => ClassLabel::Convex,
        (true, false) => ClassLabel::Conical,
        (false, true) => ClassLabel::Affine,
        (false, false) => ClassLabel::Linear,
    }
}

/// Check the class's defining constraints on concrete normalized
/// coefficients.
pub fn membership_check(coeffs: &CoefficientMatrix, label: ClassLabel, tol: f64) -> bool {
    let len = coeffs.len();
    let in_unit = |v: f64| (-tol..=1.0 + tol).contains(&v);
    let nonneg = |v: f64| v >= -tol;
    for i in 0..len {
        let row_sum: f64 = (0..=i).map(|j| coeffs.normalized[[i, j]]).sum();
        let entries = (0..=i).map(|j| coeffs.normalized[[i, j]]);
        let ok = match label {
            ClassLabel::Convex => {
                (row_sum - 1.0).abs() <= tol && entries.clone().all(in_unit)
            }
            ClassLabel::Conical => entries.clone().all(nonneg),
            ClassLabel::Affine => (row_sum - 1.0).abs() <= tol,
            ClassLabel::Linear => true,
        };
        if !ok {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architectures::{preset, ArchitectureName, HyperParams, ALL_ARCHITECTURES};
    use crate::dynamics::{coefficient_matrix, Dims, EvolutionRule, ScalingRule};
    use crate::verify::specgen::random_inputs;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn all_zero_matrix_has_fraction_one() {
        let cm = CoefficientMatrix {
            head: 0,
            raw: Array2::zeros((3, 3)),
            normalized: Array2::zeros((3, 3)),
            eta: Array1::ones(3),
            raw_overflow: vec![],
        };
        let r = near_zero_fraction(&cm, 1e-3, true);
        assert_eq!(r.fraction, 1.0);
        assert_eq!(r.per_row_counts, vec![1, 2, 3]);
    }

    #[test]
    fn one_hot_softmax_rows_leave_only_the_diagonal_of_ones() {
        // Saturated rows: one weight ~1, the rest ~0. The near-zero count is
        // everything except one entry per row.
        let l = 5;
        let mut normalized = Array2::<f64>::zeros((l, l));
        for i in 0..l {
            for j in 0..=i {
                normalized[[i, j]] = if j == 0 { 1.0 - 1e-9 } else { 1e-9 };
            }
        }
        let cm = CoefficientMatrix {
            head: 0,
            raw: normalized.clone(),
            normalized,
            eta: Array1::ones(l),
            raw_overflow: vec![],
        };
        let r = near_zero_fraction(&cm, 1e-3, true);
        let triangle = l * (l + 1) / 2;
        assert!((r.fraction - (triangle - l) as f64 / triangle as f64).abs() < 1e-12);
    }

    #[test]
    fn relu_measure_analytic_value() {
        let m = readout_near_zero_measure(&ReadoutMap::Relu, 1e-3, (-5.0, 5.0), 100_000);
        let analytic = m.analytic.unwrap();
        assert!((analytic - 5.001).abs() < 1e-12);
        assert!((m.numeric - analytic).abs() < 1e-3);
    }

    #[test]
    fn identity_measure_is_two_epsilon() {
        for eps in [1e-3, 0.05, 0.5] {
            let m = readout_near_zero_measure(&ReadoutMap::Identity, eps, (-10.0, 10.0), 400_000);
            assert!((m.analytic.unwrap() - 2.0 * eps).abs() < 1e-12);
            assert!((m.numeric - 2.0 * eps).abs() < 2e-4);
        }
    }

    #[test]
    fn exp_measure_analytic_value() {
        let m = readout_near_zero_measure(&ReadoutMap::Exponential, 1e-3, (-10.0, 10.0), 100_000);
        let expected = 10.0 + (1e-3f64).ln();
        assert!((m.analytic.unwrap() - expected).abs() < 1e-12);
        assert!((expected - 3.0922).abs() < 1e-3);
        assert!((m.numeric - expected).abs() < 1e-3);
    }

    #[test]
    fn numeric_measure_tracks_analytic_for_all_scalar_maps() {
        for map in [
            ReadoutMap::Identity,
            ReadoutMap::Exponential,
            ReadoutMap::Relu,
            ReadoutMap::Softplus,
            ReadoutMap::SigmoidLike,
        ] {
            let m = readout_near_zero_measure(&map, 1e-2, (-8.0, 8.0), 200_000);
            let a = m.analytic.unwrap();
            assert!(
                (m.numeric - a).abs() < 1e-3,
                "{}: numeric {} vs analytic {a}",
                map.name(),
                m.numeric
            );
        }
    }

    #[test]
    fn suppressing_query_from_rank_deficient_states() {
        // Three independent states in dimension 4 leave a one-dimensional
        // orthogonal complement.
        let states = vec![
            array![1.0, 0.0, 0.0, 0.0],
            array![1.0, 1.0, 0.0, 0.0],
            array![0.0, 0.0, 1.0, 0.0],
        ];
        let q = suppressing_query(&states, 4).unwrap();
        for s in &states {
            assert!(q.dot(s).abs() < 1e-10);
        }
    }

    #[test]
    fn full_span_has_no_suppressing_query() {
        let states = vec![
            array![1.0, 0.0],
            array![0.3, 0.9],
        ];
        assert!(suppressing_query(&states, 2).is_none());
    }

    #[test]
    fn collinear_states_are_rank_one() {
        let base = array![0.3, -0.7, 0.2, 0.5];
        let states: Vec<Array1<f64>> = (1..=10).map(|k| &base * (k as f64)).collect();
        let q = suppressing_query(&states, 4).unwrap();
        for s in &states {
            assert!(q.dot(s).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_state_list_is_vacuous() {
        let q = suppressing_query(&[], 3).unwrap();
        assert!((q.dot(&q) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn preset_class_labels() {
        let hyper = HyperParams::default();
        let expected = [
            (ArchitectureName::Softmax, ClassLabel::Convex),
            (ArchitectureName::LinearAttn, ClassLabel::Convex),
            (ArchitectureName::NormalizedAttn, ClassLabel::Conical),
            (ArchitectureName::Gla, ClassLabel::Linear),
            (ArchitectureName::Mamba2, ClassLabel::Linear),
            (ArchitectureName::Deltanet, ClassLabel::Linear),
            (ArchitectureName::GatedDeltanet, ClassLabel::Linear),
            (ArchitectureName::Mlstm, ClassLabel::Linear),
        ];
        for (name, label) in expected {
            let p = preset(name, Dims::square(4), &hyper, 1).unwrap();
            assert_eq!(combination_class(&p.spec), label, "{name}");
        }
        assert_eq!(ALL_ARCHITECTURES.len(), expected.len());
    }

    #[test]
    fn normalized_attn_class_flips_without_features() {
        let mut hyper = HyperParams::default();
        hyper.nonnegative_features = false;
        let p = preset(ArchitectureName::NormalizedAttn, Dims::square(4), &hyper, 1).unwrap();
        assert_eq!(combination_class(&p.spec), ClassLabel::Linear);
    }

    #[test]
    fn affine_class_from_identity_readout_with_sum_normalizer() {
        let mut spec = DynamicsSpec::linear_base(Dims::square(3));
        spec.normalization = NormalizationRule::CoefficientSum;
        assert_eq!(combination_class(&spec), ClassLabel::Affine);
    }

    #[test]
    fn membership_check_agrees_with_labels_on_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let inputs = random_inputs(&mut rng, 8, 4);
        for name in [ArchitectureName::Softmax, ArchitectureName::NormalizedAttn, ArchitectureName::Mamba2] {
            let p = preset(name, Dims::square(4), &HyperParams::default(), 17).unwrap();
            let cm = &coefficient_matrix(&p.spec, &inputs, &p.proj).unwrap()[0];
            let label = combination_class(&p.spec);
            assert!(membership_check(cm, label, 1e-12), "{name} fails its own class");
        }
    }

    #[test]
    fn exp_readout_can_exceed_the_linear_suppression_bound() {
        // With a nonlinear readout the count of suppressed coefficients is
        // not limited by the state dimension: drive every score very
        // negative and the whole row collapses.
        let dims = Dims::square(2);
        let mut spec = DynamicsSpec::linear_base(dims);
        spec.readout = ReadoutMap::Exponential;
        spec.evolution = EvolutionRule::identity();
        spec.scaling = ScalingRule::Constant { value: 1.0 };
        // Keys projected to the opposite of the queries, so every score is
        // strongly negative and the exponential collapses the whole row.
        let proj = ProjectionSet {
            w_q: Array2::eye(2),
            w_k: Array2::eye(2) * -1.0,
            w_v: Array2::eye(2),
        };
        let inputs = Array2::from_shape_fn((6, 2), |(_, c)| if c == 0 { -8.0 } else { 8.0 });
        let cm = &coefficient_matrix(&spec, &inputs, &proj).unwrap()[0];
        let counts = zero_count_profile(cm, 1e-6);
        let head_dim = dims.head_dim();
        assert!(
            counts.iter().any(|&c| c > head_dim - 1),
            "expected a row above the linear bound, got {counts:?}"
        );
    }

    #[test]
    fn all_zero_profile_counts_whole_rows() {
        let cm = CoefficientMatrix {
            head: 0,
            raw: Array2::zeros((4, 4)),
            normalized: Array2::zeros((4, 4)),
            eta: Array1::ones(4),
            raw_overflow: vec![],
        };
        assert_eq!(zero_count_profile(&cm, 1e-6), vec![1, 2, 3, 4]);
    }

    #[test]
    fn independent_counts_respect_the_bound_for_identity_readout() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dims = Dims::new(4, 8, 8, 1).unwrap();
        let spec = crate::verify::specgen::random_spec(&mut rng, dims, ReadoutMap::Identity);
        let inputs = random_inputs(&mut rng, 12, 4);
        let proj = ProjectionSet::random(&dims, &mut rng);
        let profile = zero_count_profile_with_states(&spec, &inputs, &proj, 0, 1e-6).unwrap();
        let bound = profile.bound.unwrap();
        assert_eq!(bound, 7);
        for (i, c) in profile.independent_counts.iter().enumerate() {
            assert!(*c <= bound, "row {i}: independent count {c} above bound {bound}");
        }
    }
}
