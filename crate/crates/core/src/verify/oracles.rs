//! Reference implementations that deliberately avoid the engine's scan.
//!
//! The brute-force coefficient route rebuilds the operator product from
//! scratch for every `(i, j)` pair using dense matrices. It is quadratically
//! slower than the engine and exists purely as an independent cross-check.

use ndarray::{s, Array1, Array2};

use crate::dynamics::{
    floor_eta, project, step_operator_matrix, CoefficientMatrix, DynamicsSpec, NormalizationRule,
    ProjectionSet, ReadoutMap, StepOperator,
};
use crate::error::Result;

/// Per-pair brute force: for every `(i, j)` the product `A_i ... A_{j+1}` is
/// reassembled as dense matrices and applied to `b_j k_j`.
pub fn coefficient_matrix_brute(
    spec: &DynamicsSpec,
    inputs: &Array2<f64>,
    proj: &ProjectionSet,
) -> Result<Vec<CoefficientMatrix>> {
    spec.validate()?;
    let projected = project(proj, inputs)?;
    let len = inputs.nrows();
    let hd = spec.dims.head_dim();
    let heads = spec.dims.heads;

    // Key normalization, redone here without touching the engine helper.
    let mut keys = projected.keys.clone();
    if spec.normalize_keys {
        for mut row in keys.rows_mut() {
            for h in 0..heads {
                let sl = h * hd..(h + 1) * hd;
                let norm: f64 = row.slice(s![sl.clone()]).iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for r in sl {
                        row[r] /= norm;
                    }
                }
            }
        }
    }

    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let lo = h * hd;
        let mut raw = Array2::<f64>::zeros((len, len));
        for i in 0..len {
            for j in 0..=i {
                let b = spec.scaling.eval(h, hd, j, inputs.row(j));
                let mut state: Array1<f64> = keys.slice(s![j, lo..lo + hd]).to_owned() * b;
                for t in (j + 1)..=i {
                    let op = spec.evolution.step_operator(
                        h,
                        hd,
                        t,
                        inputs.row(t),
                        keys.slice(s![t, lo..lo + hd]),
                    )?;
                    let dense = step_operator_matrix(&op, hd);
                    state = dense.dot(&state);
                }
                let q = projected.queries.slice(s![i, lo..lo + hd]);
                raw[[i, j]] = match &spec.readout {
                    ReadoutMap::KernelProduct { feature_map } => {
                        let pq = q.mapv(|v| feature_map.apply(v));
                        let ph = state.mapv(|v| feature_map.apply(v));
                        pq.dot(&ph)
                    }
                    other => other.apply(q.dot(&state)),
                };
            }
        }
        let mut eta = Array1::<f64>::zeros(len);
        let mut normalized = Array2::<f64>::zeros((len, len));
        for i in 0..len {
            eta[i] = match &spec.normalization {
                NormalizationRule::One => 1.0,
                NormalizationRule::CoefficientSum => {
                    floor_eta((0..=i).map(|j| raw[[i, j]]).sum())
                }
                NormalizationRule::Geometric { rho } => rho.powi(i as i32 + 1),
                NormalizationRule::ExternalState { output_gate, floor } => {
                    let sum: f64 = (0..=i).map(|j| raw[[i, j]]).sum();
                    let o = floor_eta(output_gate.eval(h, i, inputs.row(i)));
                    sum.abs().max(*floor) / o
                }
                NormalizationRule::PositionDerived(ds) => floor_eta(ds.eval(h, inputs.row(i))),
            };
            for j in 0..=i {
                normalized[[i, j]] = raw[[i, j]] / eta[i];
            }
        }
        out.push(CoefficientMatrix {
            head: h,
            raw,
            normalized,
            eta,
            raw_overflow: Vec::new(),
        });
    }
    Ok(out)
}

/// Double-loop value mixing, the reference for the matrix-product route.
pub fn mix_values_brute(coeffs: &[CoefficientMatrix], values: &Array2<f64>) -> Array2<f64> {
    let len = coeffs[0].len();
    let heads = coeffs.len();
    let vd = values.ncols() / heads;
    let mut out = Array2::<f64>::zeros((len, values.ncols()));
    for (h, cm) in coeffs.iter().enumerate() {
        for i in 0..len {
            for j in 0..=i {
                for c in 0..vd {
                    out[[i, h * vd + c]] += cm.normalized[[i, j]] * values[[j, h * vd + c]];
                }
            }
        }
    }
    out
}

/// The product `A_i ... A_{m+1}` applied to an arbitrary vector, built from
/// dense matrices; used by the semigroup check.
pub fn evolve_brute(
    spec: &DynamicsSpec,
    keys: &Array2<f64>,
    inputs: &Array2<f64>,
    head: usize,
    from_exclusive: usize,
    to_inclusive: usize,
    v: &Array1<f64>,
) -> Result<Array1<f64>> {
    let hd = spec.dims.head_dim();
    let lo = head * hd;
    let mut state = v.clone();
    for t in (from_exclusive + 1)..=to_inclusive {
        let op: StepOperator =
            spec.evolution
                .step_operator(head, hd, t, inputs.row(t), keys.slice(s![t, lo..lo + hd]))?;
        let dense = step_operator_matrix(&op, hd);
        state = dense.dot(&state);
    }
    Ok(state)
}
