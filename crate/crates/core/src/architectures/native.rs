//! Native single-purpose implementations of each architecture.
//!
//! These follow each layer's own update equations: softmax as the explicit
//! ratio of exponentials, everything else as its `s_t` recurrence. They read
//! parameter values (gate weights, write strengths, step sizes) out of the
//! preset spec so both routes see the same numbers, but share none of the
//! engine's state-scan machinery.

use ndarray::{s, Array1, Array2, ArrayView2};

use super::ArchitectureName;
use crate::dynamics::{
    floor_eta, project, DynamicsSpec, EvolutionKind, NormalizationRule, ProjectionSet, ReadoutMap,
    ScalarRule, ScalingRule,
};
use crate::error::{Error, Result};

/// Compute the layer exactly as its source formulation states.
///
/// `spec` must be the matching preset's spec (the parameter values are read
/// from it); a structurally different spec is rejected.
pub fn native_forward(
    name: ArchitectureName,
    spec: &DynamicsSpec,
    proj: &ProjectionSet,
    inputs: &Array2<f64>,
) -> Result<Array2<f64>> {
    let projected = project(proj, inputs)?;
    let len = inputs.nrows();
    let dims = &spec.dims;
    let hd = dims.head_dim();
    let vd = dims.value_head_dim();
    let inv_sqrt = 1.0 / (hd as f64).sqrt();

    // Key preprocessing, redone locally.
    let mut keys = projected.keys;
    if spec.normalize_keys {
        for mut row in keys.rows_mut() {
            for h in 0..dims.heads {
                let lo = h * hd;
                let norm: f64 = (lo..lo + hd).map(|r| row[r] * row[r]).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for r in lo..lo + hd {
                        row[r] /= norm;
                    }
                }
            }
        }
    }

    let mut out = Array2::<f64>::zeros((len, dims.d_v));
    for h in 0..dims.heads {
        let qlo = h * hd;
        let vlo = h * vd;
        let q_h = projected.queries.slice(s![.., qlo..qlo + hd]);
        let k_h = keys.slice(s![.., qlo..qlo + hd]);
        let v_h = projected.values.slice(s![.., vlo..vlo + vd]);
        let y_h = match name {
            ArchitectureName::Softmax => softmax_head(q_h, k_h, v_h, inv_sqrt),
            ArchitectureName::LinearAttn => linear_attn_head(spec, q_h, k_h, v_h, inv_sqrt)?,
            ArchitectureName::NormalizedAttn => normalized_attn_head(spec, h, inputs, q_h, k_h, v_h, inv_sqrt)?,
            ArchitectureName::Gla => gla_head(spec, h, inputs, q_h, k_h, v_h, inv_sqrt)?,
            ArchitectureName::Mamba2 => mamba2_head(spec, h, inputs, q_h, k_h, v_h)?,
            ArchitectureName::Deltanet => deltanet_head(spec, h, inputs, q_h, k_h, v_h, inv_sqrt, false)?,
            ArchitectureName::GatedDeltanet => deltanet_head(spec, h, inputs, q_h, k_h, v_h, inv_sqrt, true)?,
            ArchitectureName::Mlstm => mlstm_head(spec, h, inputs, q_h, k_h, v_h)?,
        };
        out.slice_mut(s![.., vlo..vlo + vd]).assign(&y_h);
    }
    Ok(out)
}

fn shape_err(name: ArchitectureName) -> Error {
    Error::InvalidConfig(format!(
        "spec does not have the parameter shape of the `{name}` preset"
    ))
}

/// Ratio-of-exponentials form, no recurrence, no stabilization.
fn softmax_head(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    inv_sqrt: f64,
) -> Array2<f64> {
    let len = q.nrows();
    let mut out = Array2::<f64>::zeros((len, v.ncols()));
    for i in 0..len {
        let mut den = 0.0;
        let mut num = Array1::<f64>::zeros(v.ncols());
        for j in 0..=i {
            let e = (q.row(i).dot(&k.row(j)) * inv_sqrt).exp();
            den += e;
            num.scaled_add(e, &v.row(j));
        }
        out.row_mut(i).assign(&(num / den));
    }
    out
}

/// Feature-mapped running sums: `s_t = s_{t-1} + psi(k_t/sqrt(n)) v_t^T`,
/// `z_t = z_{t-1} + psi(k_t/sqrt(n))`.
fn linear_attn_head(
    spec: &DynamicsSpec,
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    inv_sqrt: f64,
) -> Result<Array2<f64>> {
    let feature_map = match spec.readout {
        ReadoutMap::KernelProduct { feature_map } => feature_map,
        _ => return Err(shape_err(ArchitectureName::LinearAttn)),
    };
    let len = q.nrows();
    let hd = q.ncols();
    let mut state = Array2::<f64>::zeros((hd, v.ncols()));
    let mut zsum = Array1::<f64>::zeros(hd);
    let mut out = Array2::<f64>::zeros((len, v.ncols()));
    for i in 0..len {
        let pk = k.row(i).mapv(|x| feature_map.apply(x * inv_sqrt));
        for (r, pkr) in pk.iter().enumerate() {
            for (c, vc) in v.row(i).iter().enumerate() {
                state[[r, c]] += pkr * vc;
            }
            zsum[r] += pkr;
        }
        let pq = q.row(i).mapv(|x| feature_map.apply(x));
        let den = pq.dot(&zsum);
        out.row_mut(i).assign(&(pq.dot(&state) / den));
    }
    Ok(out)
}

/// Plain (optionally feature-mapped) dot-product scores divided by an
/// input-derived normalizer.
fn normalized_attn_head(
    spec: &DynamicsSpec,
    head: usize,
    inputs: &Array2<f64>,
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    inv_sqrt: f64,
) -> Result<Array2<f64>> {
    let eta_rule = match &spec.normalization {
        NormalizationRule::PositionDerived(ds) => ds,
        _ => return Err(shape_err(ArchitectureName::NormalizedAttn)),
    };
    let len = q.nrows();
    let mut out = Array2::<f64>::zeros((len, v.ncols()));
    for i in 0..len {
        let eta = floor_eta(eta_rule.eval(head, inputs.row(i)));
        let mut num = Array1::<f64>::zeros(v.ncols());
        for j in 0..=i {
            let score = match spec.readout {
                ReadoutMap::Identity => q.row(i).dot(&k.row(j)) * inv_sqrt,
                ReadoutMap::KernelProduct { feature_map } => {
                    let pq = q.row(i).mapv(|x| feature_map.apply(x));
                    let pk = k.row(j).mapv(|x| feature_map.apply(x * inv_sqrt));
                    pq.dot(&pk)
                }
                _ => return Err(shape_err(ArchitectureName::NormalizedAttn)),
            };
            num.scaled_add(score, &v.row(j));
        }
        out.row_mut(i).assign(&(num / eta));
    }
    Ok(out)
}

/// `s_t = diag(g_t) s_{t-1} + (k_t/sqrt(n)) v_t^T`, `y_i = q_i^T s_i`.
fn gla_head(
    spec: &DynamicsSpec,
    head: usize,
    inputs: &Array2<f64>,
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    inv_sqrt: f64,
) -> Result<Array2<f64>> {
    let gate_rule = match &spec.evolution.kind {
        EvolutionKind::Diagonal { rule } => rule,
        _ => return Err(shape_err(ArchitectureName::Gla)),
    };
    let len = q.nrows();
    let hd = q.ncols();
    let mut state = Array2::<f64>::zeros((hd, v.ncols()));
    let mut out = Array2::<f64>::zeros((len, v.ncols()));
    for i in 0..len {
        if i > 0 {
            let g = gate_rule.eval(head, hd, inputs.row(i));
            for (r, gr) in g.iter().enumerate() {
                for c in 0..v.ncols() {
                    state[[r, c]] *= gr;
                }
            }
        }
        for (r, kr) in k.row(i).iter().enumerate() {
            let bk = kr * inv_sqrt;
            for (c, vc) in v.row(i).iter().enumerate() {
                state[[r, c]] += bk * vc;
            }
        }
        out.row_mut(i).assign(&q.row(i).dot(&state));
    }
    Ok(out)
}

/// `s_t = exp(-delta_t a) s_{t-1} + delta_t k_t v_t^T`, `y_i = q_i^T s_i`.
fn mamba2_head(
    spec: &DynamicsSpec,
    head: usize,
    inputs: &Array2<f64>,
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let decay_rule = match &spec.evolution.kind {
        EvolutionKind::Scalar {
            rule: ScalarRule::InputDerived(ds),
        } => ds,
        _ => return Err(shape_err(ArchitectureName::Mamba2)),
    };
    let delta_rule = match &spec.scaling {
        ScalingRule::InputDerived(ds) => ds,
        _ => return Err(shape_err(ArchitectureName::Mamba2)),
    };
    let len = q.nrows();
    let hd = q.ncols();
    let mut state = Array2::<f64>::zeros((hd, v.ncols()));
    let mut out = Array2::<f64>::zeros((len, v.ncols()));
    for i in 0..len {
        if i > 0 {
            let decay = decay_rule.eval(head, inputs.row(i));
            state *= decay;
        }
        let delta = delta_rule.eval(head, inputs.row(i));
        for (r, kr) in k.row(i).iter().enumerate() {
            for (c, vc) in v.row(i).iter().enumerate() {
                state[[r, c]] += delta * kr * vc;
            }
        }
        out.row_mut(i).assign(&q.row(i).dot(&state));
    }
    Ok(out)
}

/// Delta-rule update on unit keys, optionally gated:
/// `s_t = g_t (I - beta_t k_t k_t^T) s_{t-1} + (beta_t/sqrt(n)) k_t v_t^T`.
#[allow(clippy::too_many_arguments)]
fn deltanet_head(
    spec: &DynamicsSpec,
    head: usize,
    inputs: &Array2<f64>,
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    inv_sqrt: f64,
    gated: bool,
) -> Result<Array2<f64>> {
    let which = if gated {
        ArchitectureName::GatedDeltanet
    } else {
        ArchitectureName::Deltanet
    };
    let (beta_rule, gate_rule) = match (&spec.evolution.kind, gated) {
        (EvolutionKind::Householder(h), false) => (&h.beta, None),
        (EvolutionKind::GatedHouseholder { gate, householder }, true) => (&householder.beta, Some(gate)),
        _ => return Err(shape_err(which)),
    };
    let len = q.nrows();
    let hd = q.ncols();
    let mut state = Array2::<f64>::zeros((hd, v.ncols()));
    let mut out = Array2::<f64>::zeros((len, v.ncols()));
    for i in 0..len {
        let beta = beta_rule.eval(head, i, inputs.row(i));
        if i > 0 {
            // s <- s - beta k (k^T s)
            let kts = k.row(i).dot(&state);
            for (r, kr) in k.row(i).iter().enumerate() {
                for (c, kc) in kts.iter().enumerate() {
                    state[[r, c]] -= beta * kr * kc;
                }
            }
            if let Some(g) = gate_rule {
                state *= g.eval(head, i, inputs.row(i));
            }
        }
        let bw = beta * inv_sqrt;
        for (r, kr) in k.row(i).iter().enumerate() {
            for (c, vc) in v.row(i).iter().enumerate() {
                state[[r, c]] += bw * kr * vc;
            }
        }
        out.row_mut(i).assign(&q.row(i).dot(&state));
    }
    Ok(out)
}

/// Log-gated recurrence with a matching normalizer state:
/// `s_t = e^{f_t} s_{t-1} + (e^{i_t}/sqrt(n)) k_t v_t^T`,
/// `n_t = e^{f_t} n_{t-1} + (e^{i_t}/sqrt(n)) k_t`,
/// `y_i = o_i q_i^T s_i / max(|q_i^T n_i|, floor)`.
fn mlstm_head(
    spec: &DynamicsSpec,
    head: usize,
    inputs: &Array2<f64>,
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let forget_rule = match &spec.evolution.kind {
        EvolutionKind::Scalar {
            rule: ScalarRule::InputDerived(ds),
        } => ds,
        _ => return Err(shape_err(ArchitectureName::Mlstm)),
    };
    let input_rule = match &spec.scaling {
        ScalingRule::InputDerived(ds) => ds,
        _ => return Err(shape_err(ArchitectureName::Mlstm)),
    };
    let (output_rule, floor) = match &spec.normalization {
        NormalizationRule::ExternalState { output_gate, floor } => (output_gate, *floor),
        _ => return Err(shape_err(ArchitectureName::Mlstm)),
    };
    let len = q.nrows();
    let hd = q.ncols();
    let mut state = Array2::<f64>::zeros((hd, v.ncols()));
    let mut nacc = Array1::<f64>::zeros(hd);
    let mut out = Array2::<f64>::zeros((len, v.ncols()));
    for i in 0..len {
        let x_i = inputs.row(i);
        if i > 0 {
            let f = forget_rule.eval(head, x_i);
            state *= f;
            nacc *= f;
        }
        let b = input_rule.eval(head, x_i);
        for (r, kr) in k.row(i).iter().enumerate() {
            let bk = b * kr;
            for (c, vc) in v.row(i).iter().enumerate() {
                state[[r, c]] += bk * vc;
            }
            nacc[r] += bk;
        }
        let o = floor_eta(output_rule.eval(head, i, x_i));
        let eta = q.row(i).dot(&nacc).abs().max(floor);
        let y = q.row(i).dot(&state) * (o / eta);
        out.row_mut(i).assign(&y);
    }
    Ok(out)
}
